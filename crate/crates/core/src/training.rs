//! Two-stage alternating training.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DialogueExample, EntailmentExample, NliLabel};
use crate::error::{contract, Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, DDM_PARAMS, DIALOGUE_HEADS, ERM_PARAMS};
use crate::objective::{dialogue_forward, entailment_forward, memory_orthogonality};
use crate::optim::{adamw_step, Moments, OptimConfig, StepOutcome};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Entailment,
    Dialogue,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Entailment => 1,
            Stage::Dialogue => 2,
        }
    }

    /// Parameters excluded from updates while this stage runs.
    pub fn freeze_set(self) -> BTreeSet<String> {
        let names: Vec<&str> = match self {
            Stage::Entailment => [DDM_PARAMS.as_slice(), DIALOGUE_HEADS.as_slice()].concat(),
            Stage::Dialogue => ERM_PARAMS.to_vec(),
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Stage, String> {
        match v {
            1 => Ok(Stage::Entailment),
            2 => Ok(Stage::Dialogue),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

/// Training hyper-parameters beyond the optimizer itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss_weights: LossWeights,
    pub epochs_per_stage: usize,
    pub max_outer_iters: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Distractors per turn.
    pub distractors: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            optim: OptimConfig::default(),
            loss_weights: LossWeights::default(),
            epochs_per_stage: 1,
            max_outer_iters: 10,
            patience: 2,
            min_delta: 1e-3,
            distractors: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.epochs_per_stage == 0 || self.max_outer_iters == 0 || self.patience == 0 {
            return Err(contract("epochs_per_stage, max_outer_iters and patience must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(contract("min_delta must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub moments: BTreeMap<String, Moments>,
    pub stage: Stage,
    pub freeze_set: BTreeSet<String>,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub best_validation: Option<f64>,
}

impl TrainState {
    pub fn new(model: Model, stage: Stage) -> TrainState {
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x7472_6169_6e00);
        TrainState {
            model,
            moments: BTreeMap::new(),
            stage,
            freeze_set: stage.freeze_set(),
            step: 0,
            epoch: 0,
            rng,
            best_validation: None,
        }
    }

    /// Switches stage, replacing the freeze set and dropping moments of the
    /// newly frozen parameters.
    pub fn enter_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.freeze_set = stage.freeze_set();
        let frozen = &self.freeze_set;
        self.moments.retain(|name, _| !frozen.contains(name));
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.freeze_set.contains(name)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(contract(format!(
                "expected stage {}, state is in stage {}",
                stage.number(),
                self.stage.number()
            )));
        }
        Ok(())
    }

    fn apply(&mut self, cfg: &OptimConfig) -> StepOutcome {
        let frozen = self.freeze_set.clone();
        let out = adamw_step(
            &mut self.model.params,
            &|n| !frozen.contains(n),
            &mut self.moments,
            cfg,
        );
        self.step += 1;
        out
    }
}

/// One optimizer step's losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_erm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ddm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_bow: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_lm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cls: Option<f64>,
    pub total: f64,
    pub grad_norm: Option<f64>,
    pub skipped: bool,
}

impl StepLog {
    fn record_outcome(&mut self, out: StepOutcome) {
        match out {
            StepOutcome::Applied { grad_norm, .. } => self.grad_norm = Some(grad_norm),
            StepOutcome::Skipped { .. } => self.skipped = true,
        }
    }
}

/// Sums `weight * loss` into a single scalar on the tape.
fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = tape.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    Ok(acc)
}

/// One stage-1 optimizer step on a batch of entailment pairs.
pub fn stage1_update(state: &mut TrainState, batch: &[&EntailmentExample], cfg: &TrainConfig) -> Result<StepLog> {
    state.require(Stage::Entailment)?;
    if batch.is_empty() {
        return Err(Error::Empty("stage-1 batch"));
    }
    if let Some(ex) = batch.iter().find(|e| e.label != NliLabel::Entailment) {
        return Err(contract(format!("stage-1 batch contains a {:?} pair", ex.label)));
    }
    let frozen = state.freeze_set.clone();
    let trainable = |n: &str| !frozen.contains(n);
    let mut tape = Tape::new();
    let g = state.model.bind(&mut tape, &trainable);
    let w = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    let (mut correct, mut tokens) = (0, 0);
    for ex in batch {
        let f = entailment_forward(&g, &mut tape, ex)?;
        terms.push((f.loss, w));
        correct += f.correct;
        tokens += f.tokens;
    }
    let loss = weighted_sum(&mut tape, &terms)?.expect("non-empty batch");
    let total = tape.item(loss)?;
    tape.backward(loss)?;
    let vars = g.vars().to_vec();
    state.model.params.accumulate_from(&tape, &vars, 1.0)?;
    drop(tape);
    let mut log = StepLog {
        stage: 1,
        step: state.step,
        l_erm: Some(total),
        token_acc: Some(correct as f64 / tokens as f64),
        l_ddm: None,
        l_bow: None,
        l_lm: None,
        l_cls: None,
        total,
        grad_norm: None,
        skipped: false,
    };
    let out = state.apply(&cfg.optim);
    log.record_outcome(out);
    Ok(log)
}

fn check_candidates(ex: &DialogueExample, cfg: &TrainConfig) -> Result<()> {
    if cfg.distractors > 0 && ex.candidates.len() < 2 {
        return Err(Error::Data(format!(
            "turn has no distractors but {} were requested",
            cfg.distractors
        )));
    }
    Ok(())
}

/// One stage-2 optimizer step. Gradients of every micro-batch accumulate, the
/// per-example losses are averaged over all examples of the step, and the
/// orthogonality term is added once.
pub fn stage2_update(
    state: &mut TrainState,
    micro_batches: &[&[DialogueExample]],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    state.require(Stage::Dialogue)?;
    let n: usize = micro_batches.iter().map(|b| b.len()).sum();
    if n == 0 {
        return Err(Error::Empty("stage-2 step"));
    }
    let lw = &cfg.loss_weights;
    let frozen = state.freeze_set.clone();
    let trainable = |n: &str| !frozen.contains(n);
    let w = 1.0 / n as f64;
    let (mut bow, mut lm, mut cls) = (0.0, 0.0, 0.0);
    for micro in micro_batches.iter().filter(|b| !b.is_empty()) {
        let mut tape = Tape::new();
        let g = state.model.bind(&mut tape, &trainable);
        let mut terms = Vec::new();
        for ex in micro.iter() {
            check_candidates(ex, cfg)?;
            let f = dialogue_forward(&g, &mut tape, ex)?;
            bow += tape.item(f.l_bow)? * w;
            lm += tape.item(f.l_lm)? * w;
            cls += tape.item(f.l_cls)? * w;
            terms.push((f.l_bow, lw.bow * w));
            terms.push((f.l_lm, lw.lm * w));
            terms.push((f.l_cls, lw.cls * w));
        }
        let loss = weighted_sum(&mut tape, &terms)?.expect("non-empty micro-batch");
        tape.backward(loss)?;
        let vars = g.vars().to_vec();
        state.model.params.accumulate_from(&tape, &vars, 1.0)?;
    }
    let ddm = {
        let mut tape = Tape::new();
        let g = state.model.bind(&mut tape, &trainable);
        let l = memory_orthogonality(&g, &mut tape)?;
        let value = tape.item(l)?;
        let scaled = tape.scale(l, lw.ddm);
        tape.backward(scaled)?;
        let vars = g.vars().to_vec();
        state.model.params.accumulate_from(&tape, &vars, 1.0)?;
        value
    };
    let b = LossBreakdown::from_components(ddm, bow, lm, cls, lw);
    let mut log = StepLog {
        stage: 2,
        step: state.step,
        l_erm: None,
        token_acc: None,
        l_ddm: Some(b.l_ddm),
        l_bow: Some(b.l_bow),
        l_lm: Some(b.l_lm),
        l_cls: Some(b.l_cls),
        total: b.total,
        grad_norm: None,
        skipped: false,
    };
    let out = state.apply(&cfg.optim);
    log.record_outcome(out);
    Ok(log)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// One shuffled epoch of stage 1.
pub fn train_stage1(state: &mut TrainState, examples: &[EntailmentExample], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    state.require(Stage::Entailment)?;
    if examples.is_empty() {
        return Err(Error::Empty("entailment corpus"));
    }
    let order = shuffled(examples.len(), &mut state.rng);
    let mut logs = Vec::new();
    for chunk in order.chunks(cfg.optim.batch_size_stage1) {
        let batch: Vec<&EntailmentExample> = chunk.iter().map(|&i| &examples[i]).collect();
        logs.push(stage1_update(state, &batch, cfg)?);
    }
    state.epoch += 1;
    Ok(logs)
}

/// One shuffled epoch of stage 2 with gradient accumulation.
pub fn train_stage2(state: &mut TrainState, examples: &[DialogueExample], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    state.require(Stage::Dialogue)?;
    if examples.is_empty() {
        return Err(Error::Empty("dialogue corpus"));
    }
    let order = shuffled(examples.len(), &mut state.rng);
    let shuffled_examples: Vec<DialogueExample> = order.iter().map(|&i| examples[i].clone()).collect();
    let per_step = cfg.optim.batch_size_stage2 * cfg.optim.grad_accum_steps;
    let mut logs = Vec::new();
    for step_chunk in shuffled_examples.chunks(per_step) {
        let micro: Vec<&[DialogueExample]> = step_chunk.chunks(cfg.optim.batch_size_stage2).collect();
        logs.push(stage2_update(state, &micro, cfg)?);
    }
    state.epoch += 1;
    Ok(logs)
}

/// Mean stage-2 losses over a set without touching parameters.
pub fn dialogue_losses(model: &Model, examples: &[DialogueExample], w: &LossWeights) -> Result<LossBreakdown> {
    if examples.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let n = examples.len() as f64;
    let (mut bow, mut lm, mut cls) = (0.0, 0.0, 0.0);
    for ex in examples {
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let f = dialogue_forward(&g, &mut tape, ex)?;
        bow += tape.item(f.l_bow)? / n;
        lm += tape.item(f.l_lm)? / n;
        cls += tape.item(f.l_cls)? / n;
    }
    let mut tape = Tape::new();
    let g = model.bind(&mut tape, &|_| false);
    let l = memory_orthogonality(&g, &mut tape)?;
    let ddm = tape.item(l)?;
    Ok(LossBreakdown::from_components(ddm, bow, lm, cls, w))
}

/// Hypothesis token accuracy under teacher forcing.
pub fn entailment_accuracy(model: &Model, examples: &[EntailmentExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("entailment set"));
    }
    let (mut correct, mut tokens) = (0, 0);
    for ex in examples {
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let f = entailment_forward(&g, &mut tape, ex)?;
        correct += f.correct;
        tokens += f.tokens;
    }
    Ok(correct as f64 / tokens as f64)
}

/// Everything `alternate` needs besides the state.
pub struct Corpora<'a> {
    pub entailment: &'a [EntailmentExample],
    pub dialogue: &'a [DialogueExample],
    /// Falls back to `dialogue` when empty.
    pub validation: &'a [DialogueExample],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseLog {
    pub outer_iter: usize,
    pub stage: u8,
    pub epoch: u64,
    pub steps: Vec<StepLog>,
}

#[derive(Debug)]
pub struct AlternateOutcome {
    /// Snapshot with the best validation loss.
    pub best: TrainState,
    pub outer_iters: usize,
    pub validation: Vec<f64>,
    pub phases: Vec<PhaseLog>,
    pub stopped_early: bool,
}

/// Stage 1 then stage 2 per outer iteration, stopping once the validation
/// total has not improved by `min_delta` for `patience` iterations.
pub fn alternate(
    mut state: TrainState,
    corpora: &Corpora<'_>,
    cfg: &TrainConfig,
    on_phase: &mut dyn FnMut(&TrainState, &PhaseLog) -> Result<()>,
) -> Result<AlternateOutcome> {
    cfg.validate()?;
    let validation = if corpora.validation.is_empty() {
        corpora.dialogue
    } else {
        corpora.validation
    };
    let mut best: Option<TrainState> = None;
    let mut best_value = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut phases = Vec::new();
    let mut outer_iters = 0;
    let mut stopped_early = false;
    for it in 0..cfg.max_outer_iters {
        outer_iters = it + 1;
        for stage in [Stage::Entailment, Stage::Dialogue] {
            state.enter_stage(stage);
            let mut steps = Vec::new();
            for _ in 0..cfg.epochs_per_stage {
                let logs = match stage {
                    Stage::Entailment => train_stage1(&mut state, corpora.entailment, cfg)?,
                    Stage::Dialogue => train_stage2(&mut state, corpora.dialogue, cfg)?,
                };
                steps.extend(logs);
            }
            let phase = PhaseLog {
                outer_iter: it,
                stage: stage.number(),
                epoch: state.epoch,
                steps,
            };
            on_phase(&state, &phase)?;
            phases.push(phase);
        }
        let v = dialogue_losses(&state.model, validation, &cfg.loss_weights)?.total;
        log::info!("outer iteration {it}: validation total {v:.6}");
        history.push(v);
        if v < best_value - cfg.min_delta {
            best_value = v;
            state.best_validation = Some(v);
            best = Some(state.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let best = best.unwrap_or(state);
    Ok(AlternateOutcome {
        best,
        outer_iters,
        validation: history,
        phases,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_ddm_input, assemble_erm_input, decoder_sequence};
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            k: 3,
            l: 3,
            max_len: 16,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn nli(label: NliLabel) -> EntailmentExample {
        EntailmentExample {
            premise: assemble_erm_input(&[11, 12, 13], 16).unwrap(),
            decoder_ids: decoder_sequence(&[11, 13], 16),
            label,
        }
    }

    fn dialogue(gold: u32) -> DialogueExample {
        DialogueExample {
            context: assemble_ddm_input(&[vec![11, 12]], &[], &[14, 15], 16).unwrap(),
            persona_premise: assemble_erm_input(&[11, 12], 16).unwrap(),
            candidates: vec![decoder_sequence(&[gold, 16], 16), decoder_sequence(&[17], 16)],
            gold_index: 0,
        }
    }

    #[test]
    fn stage_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Stage::Dialogue).unwrap(), "2");
        assert!(serde_json::from_str::<Stage>("3").is_err());
    }

    #[test]
    fn stage1_rejects_non_entailment() {
        let mut s = TrainState::new(tiny(), Stage::Entailment);
        let ex = nli(NliLabel::Neutral);
        assert!(stage1_update(&mut s, &[&ex], &TrainConfig::default()).is_err());
    }

    #[test]
    fn stage2_leaves_entailment_memory_untouched() {
        let mut s = TrainState::new(tiny(), Stage::Dialogue);
        let erm = |s: &TrainState| s.model.params.checksum(&|n| ERM_PARAMS.contains(&n));
        let before = erm(&s);
        let ddm_before = s.model.params.checksum(&|n| n == "ddm.rows");
        let data = [dialogue(18), dialogue(19)];
        train_stage2(&mut s, &data, &TrainConfig::default()).unwrap();
        assert_eq!(erm(&s), before);
        assert_ne!(s.model.params.checksum(&|n| n == "ddm.rows"), ddm_before);
        assert!(s.moments.keys().all(|k| !ERM_PARAMS.contains(&k.as_str())));
    }

    #[test]
    fn stage1_leaves_discourse_memory_untouched() {
        let mut s = TrainState::new(tiny(), Stage::Entailment);
        let ddm = |s: &TrainState| s.model.params.checksum(&|n| n.starts_with("ddm.") || n.starts_with("cls.") || n.starts_with("bow."));
        let before = ddm(&s);
        let erm_before = s.model.params.checksum(&|n| n == "erm.rows");
        train_stage1(&mut s, &[nli(NliLabel::Entailment)], &TrainConfig::default()).unwrap();
        assert_eq!(ddm(&s), before);
        assert_ne!(s.model.params.checksum(&|n| n == "erm.rows"), erm_before);
    }

    #[test]
    fn stage_switch_drops_frozen_moments() {
        let mut s = TrainState::new(tiny(), Stage::Entailment);
        train_stage1(&mut s, &[nli(NliLabel::Entailment)], &TrainConfig::default()).unwrap();
        assert!(s.moments.contains_key("erm.rows"));
        s.enter_stage(Stage::Dialogue);
        assert!(!s.moments.contains_key("erm.rows"));
        assert!(s.moments.contains_key("embed.tok"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut s = TrainState::new(tiny(), Stage::Entailment);
        let before = s.model.params.checksum(&|_| true);
        let mut cfg = TrainConfig::default();
        cfg.optim.learning_rate = 0.0;
        train_stage1(&mut s, &[nli(NliLabel::Entailment)], &cfg).unwrap();
        assert_eq!(s.model.params.checksum(&|_| true), before);
    }

    #[test]
    fn missing_distractors_are_an_error() {
        let mut s = TrainState::new(tiny(), Stage::Dialogue);
        let mut ex = dialogue(18);
        ex.candidates.truncate(1);
        let cfg = TrainConfig::default();
        assert!(stage2_update(&mut s, &[std::slice::from_ref(&ex)], &cfg).is_err());
        let cfg0 = TrainConfig {
            distractors: 0,
            ..TrainConfig::default()
        };
        assert!(stage2_update(&mut s, &[std::slice::from_ref(&ex)], &cfg0).is_ok());
    }

    #[test]
    fn single_outer_iteration_runs_both_stages() {
        let nli_set = [nli(NliLabel::Entailment)];
        let dia = [dialogue(18)];
        let corpora = Corpora {
            entailment: &nli_set,
            dialogue: &dia,
            validation: &[],
        };
        let cfg = TrainConfig {
            max_outer_iters: 1,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let out = alternate(TrainState::new(tiny(), Stage::Entailment), &corpora, &cfg, &mut |_, p| {
            seen.push(p.stage);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [1, 2]);
        assert_eq!(out.outer_iters, 1);
        assert!(out.best.best_validation.is_some());
    }

    #[test]
    fn patience_returns_best_snapshot() {
        let nli_set = [nli(NliLabel::Entailment)];
        let dia = [dialogue(18)];
        let corpora = Corpora {
            entailment: &nli_set,
            dialogue: &dia,
            validation: &[],
        };
        // A huge min_delta means nothing after the first iteration counts as improvement.
        let cfg = TrainConfig {
            max_outer_iters: 5,
            patience: 2,
            min_delta: 1e9,
            ..TrainConfig::default()
        };
        let mut snapshots = Vec::new();
        let out = alternate(TrainState::new(tiny(), Stage::Entailment), &corpora, &cfg, &mut |s, p| {
            if p.stage == 2 {
                snapshots.push(s.model.params.checksum(&|_| true));
            }
            Ok(())
        })
        .unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.outer_iters, 3);
        assert_eq!(out.best.model.params.checksum(&|_| true), snapshots[0]);
    }
}
