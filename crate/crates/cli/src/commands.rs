//! Subcommand implementations. Each returns what `main` prints.

use std::fs;
use std::path::{Path, PathBuf};

use dialmem::checkpoint::{latest_checkpoint, load_checkpoint, load_model, save_checkpoint, MODEL_FILE};
use dialmem::data::{
    build_dialogue_examples, entailment_only, read_dialogues, read_nli, write_atomic, write_jsonl, DialogueExample,
    DialogueSession, DistractorPool, Distractors, EntailmentExample, NliPair, Vocab,
};
use dialmem::evaluation::{evaluate as run_evaluation, EvalReport};
use dialmem::generation::generate_response;
use dialmem::gradcheck::check_ops;
use dialmem::tensor::FaultInjection;
use dialmem::training::{
    alternate, dialogue_losses, entailment_accuracy, train_stage1, train_stage2, Corpora, PhaseLog, Stage, StepLog,
    TrainState,
};
use dialmem::verify::{check_reference, TOLERANCE};
use dialmem::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{sha256_hex, RunConfig};
use crate::exit::{Failure, EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH, EXIT_VERIFY};
use crate::synth;

pub const VOCAB_FILE: &str = "vocab.txt";
/// Names the final `step-<n>` directory under the checkpoint root.
pub const FINAL_POINTER: &str = "FINAL";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Nli,
    Dialogue,
}

pub fn synth(kind: SynthKind, size: usize, seed: u64, candidates: usize, out: &Path) -> Result<String, Failure> {
    if size == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--size must be at least 1"));
    }
    match kind {
        SynthKind::Nli => write_jsonl(out, &synth::nli(size, seed))?,
        SynthKind::Dialogue => write_jsonl(out, &synth::dialogue(size, seed, candidates))?,
    }
    Ok(format!("wrote {size} items to {}", out.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Stage1,
    Stage2,
    Alternate,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("data.{key} is not set in the config")))
}

/// Fails with the mismatch code when `ckpt` disagrees with the configured
/// architecture. A configured `vocab_size` of 0 matches anything.
pub fn check_architecture(ckpt: &ModelConfig, cfg: &ModelConfig) -> Result<(), Failure> {
    let fields = [
        ("d_model", ckpt.d_model, cfg.d_model),
        ("n_layers_enc", ckpt.n_layers_enc, cfg.n_layers_enc),
        ("n_layers_dec", ckpt.n_layers_dec, cfg.n_layers_dec),
        ("n_heads", ckpt.n_heads, cfg.n_heads),
        ("d_ff", ckpt.d_ff, cfg.d_ff),
        ("k", ckpt.k, cfg.k),
        ("l", ckpt.l, cfg.l),
        ("max_len", ckpt.max_len, cfg.max_len),
        ("vocab_size", ckpt.vocab_size, if cfg.vocab_size == 0 { ckpt.vocab_size } else { cfg.vocab_size }),
    ];
    for (name, a, b) in fields {
        if a != b {
            return Err(Failure::new(
                EXIT_MISMATCH,
                format!("checkpoint has model.{name} = {a} but the config has {b}"),
            ));
        }
    }
    Ok(())
}

/// Accepts a `step-<n>` directory, or a checkpoint root holding a
/// [`FINAL_POINTER`] or step directories.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf, Failure> {
    if path.join(MODEL_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let pointer = path.join(FINAL_POINTER);
    if pointer.is_file() {
        let name = fs::read_to_string(&pointer).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", pointer.display())))?;
        return Ok(path.join(name.trim()));
    }
    if path.is_dir() {
        if let Some(p) = latest_checkpoint(path)? {
            return Ok(p);
        }
    }
    Err(Failure::new(EXIT_IO, format!("no checkpoint found at {}", path.display())))
}

fn load_vocab(dir: &Path) -> Result<Vocab, Failure> {
    Ok(Vocab::load(&dir.join(VOCAB_FILE))?)
}

fn corpus_texts<'a>(nli: &'a [NliPair], sessions: &'a [DialogueSession]) -> Vec<&'a str> {
    let mut docs = Vec::new();
    for p in nli {
        docs.push(p.premise.as_str());
        docs.push(p.hypothesis.as_str());
    }
    for s in sessions {
        docs.extend(s.persona.iter().map(String::as_str));
        for t in &s.turns {
            docs.push(&t.query);
            docs.push(&t.response);
            docs.extend(t.candidates.iter().flatten().map(String::as_str));
        }
    }
    docs
}

/// Turn examples with `t` distractors sampled from the corpus's own
/// responses when the corpus provides none.
fn dialogue_examples(sessions: &[DialogueSession], vocab: &Vocab, max_len: usize, t: usize, seed: u64) -> Result<Vec<DialogueExample>, Failure> {
    let pool = DistractorPool::from_sessions(sessions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(build_dialogue_examples(
        sessions,
        vocab,
        max_len,
        Distractors::Sample {
            pool: &pool,
            t,
            rng: &mut rng,
        },
    )?)
}

struct TrainLogs {
    dir: PathBuf,
    stage1: Vec<StepLog>,
    stage2: Vec<StepLog>,
}

impl TrainLogs {
    fn push(&mut self, stage: Stage, steps: &[StepLog]) -> dialmem::Result<()> {
        let (file, logs) = match stage {
            Stage::Entailment => ("stage1.jsonl", &mut self.stage1),
            Stage::Dialogue => ("stage2.jsonl", &mut self.stage2),
        };
        logs.extend_from_slice(steps);
        write_jsonl(&self.dir.join(file), logs)
    }
}

/// Trains and returns the final checkpoint directory. Writes
/// `out/ckpt/step-<n>/`, `out/ckpt/FINAL` and `out/logs/stage{1,2}.jsonl`.
pub fn train(cfg: &RunConfig, mode: TrainMode, init: Option<&Path>, out: &Path) -> Result<PathBuf, Failure> {
    let nli: Vec<NliPair> = match mode {
        TrainMode::Stage2 => Vec::new(),
        _ => entailment_only(read_nli(required(&cfg.data.nli, "nli")?)?),
    };
    let sessions = match mode {
        TrainMode::Stage1 => Vec::new(),
        _ => read_dialogues(required(&cfg.data.dialogue, "dialogue")?)?,
    };
    let validation_sessions = match (&cfg.data.validation, mode) {
        (Some(p), TrainMode::Alternate) => read_dialogues(p)?,
        _ => Vec::new(),
    };

    let first = if mode == TrainMode::Stage2 { Stage::Dialogue } else { Stage::Entailment };
    let (mut state, vocab) = match init {
        Some(path) => {
            let dir = resolve_checkpoint(path)?;
            let ckpt = load_checkpoint(&dir)?;
            check_architecture(&ckpt.state.model.config, &cfg.model)?;
            (ckpt.state, load_vocab(&dir)?)
        }
        None => {
            let mut docs = corpus_texts(&nli, &sessions);
            docs.extend(corpus_texts(&[], &validation_sessions));
            let vocab = Vocab::build(docs, cfg.data.min_count)?;
            let mut mc = cfg.model.clone();
            if mc.vocab_size == 0 {
                mc.vocab_size = vocab.len();
            } else if mc.vocab_size != vocab.len() {
                return Err(Failure::new(
                    EXIT_CONFIG,
                    format!("model.vocab_size = {} but the corpora give {} tokens", mc.vocab_size, vocab.len()),
                ));
            }
            (TrainState::new(Model::new(mc)?, first), vocab)
        }
    };
    let max_len = state.model.config.max_len;

    let entailment = nli
        .iter()
        .map(|p| EntailmentExample::from_pair(p, &vocab, max_len))
        .collect::<dialmem::Result<Vec<_>>>()?;
    if mode != TrainMode::Stage2 && entailment.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "the NLI corpus has no entailment pairs"));
    }
    let t = cfg.train.distractors;
    let dialogue = dialogue_examples(&sessions, &vocab, max_len, t, cfg.seed())?;
    let validation = dialogue_examples(&validation_sessions, &vocab, max_len, t, cfg.seed() ^ 1)?;

    let ckpt_root = out.join("ckpt");
    let config_text = cfg.to_toml();
    let vocab_text = vocab.to_text();
    let extra = [(VOCAB_FILE, vocab_text.as_bytes())];
    let mut logs = TrainLogs {
        dir: out.join("logs"),
        stage1: Vec::new(),
        stage2: Vec::new(),
    };

    let final_dir = match mode {
        TrainMode::Stage1 | TrainMode::Stage2 => {
            state.enter_stage(first);
            let mut steps = Vec::new();
            for _ in 0..cfg.train.epochs_per_stage {
                steps.extend(match first {
                    Stage::Entailment => train_stage1(&mut state, &entailment, &cfg.train)?,
                    Stage::Dialogue => train_stage2(&mut state, &dialogue, &cfg.train)?,
                });
            }
            logs.push(first, &steps)?;
            let metrics = match first {
                Stage::Entailment => json!({
                    "stage": 1,
                    "step": state.step,
                    "token_accuracy": entailment_accuracy(&state.model, &entailment)?,
                }),
                Stage::Dialogue => json!({
                    "stage": 2,
                    "step": state.step,
                    "losses": dialogue_losses(&state.model, &dialogue, &cfg.train.loss_weights)?,
                }),
            };
            save_checkpoint(&ckpt_root, &state, &config_text, &metrics, &extra)?
        }
        TrainMode::Alternate => {
            let corpora = Corpora {
                entailment: &entailment,
                dialogue: &dialogue,
                validation: &validation,
            };
            let mut on_phase = |s: &TrainState, phase: &PhaseLog| -> dialmem::Result<()> {
                logs.push(s.stage, &phase.steps)?;
                let metrics = json!({
                    "stage": phase.stage,
                    "step": s.step,
                    "outer_iter": phase.outer_iter,
                    "last_total": phase.steps.last().map(|l| l.total),
                });
                save_checkpoint(&ckpt_root, s, &config_text, &metrics, &extra)?;
                Ok(())
            };
            let outcome = alternate(state, &corpora, &cfg.train, &mut on_phase)?;
            let metrics = json!({
                "step": outcome.best.step,
                "outer_iters": outcome.outer_iters,
                "stopped_early": outcome.stopped_early,
                "validation": outcome.validation,
                "best_validation": outcome.best.best_validation,
            });
            save_checkpoint(&ckpt_root, &outcome.best, &config_text, &metrics, &extra)?
        }
    };
    let name = final_dir.file_name().expect("step directory").to_string_lossy().into_owned();
    write_atomic(&ckpt_root.join(FINAL_POINTER), format!("{name}\n").as_bytes())?;
    Ok(final_dir)
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub persona: Vec<String>,
    /// Prior turns as `query|response`.
    pub turns: Vec<String>,
    pub query: String,
    pub beam: Option<usize>,
    pub verbose: bool,
}

fn format_weights(w: &[f64]) -> String {
    let items: Vec<String> = w.iter().map(|v| format!("{v:.6}")).collect();
    format!("[{}]", items.join(", "))
}

/// `check_arch` compares the checkpoint against `cfg.model`; used when a
/// config file was given.
pub fn generate(cfg: &RunConfig, check_arch: bool, args: &GenerateArgs) -> Result<String, Failure> {
    let dir = resolve_checkpoint(&args.checkpoint)?;
    let model = load_model(&dir)?;
    if check_arch {
        check_architecture(&model.config, &cfg.model)?;
    }
    let vocab = load_vocab(&dir)?;
    let history = args
        .turns
        .iter()
        .map(|t| {
            t.split_once('|')
                .map(|(q, r)| (q.trim().to_owned(), r.trim().to_owned()))
                .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("--turn expects \"query|response\", got {t:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut gen = cfg.generation.clone();
    if let Some(b) = args.beam {
        if b == 0 {
            return Err(Failure::new(EXIT_CONFIG, "--beam must be at least 1"));
        }
        gen.beam_size = b;
    }
    let (text, g) = generate_response(&model, &vocab, &args.persona, &history, &args.query, &gen)?;
    let mut out = text;
    if args.verbose {
        out.push_str(&format!(
            "\nscore: {:.6}\nfinished: {}\npi: {}\nrho: {}",
            g.score,
            g.finished(),
            format_weights(&g.pi),
            format_weights(&g.rho)
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct ReportFile {
    pub config_fingerprint: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub corpus_sha256: String,
    #[serde(flatten)]
    pub metrics: EvalReport,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

/// Writes the report to `out` and returns a summary table.
pub fn evaluate(cfg: &RunConfig, check_arch: bool, checkpoint: &Path, corpus: Option<&Path>, out: &Path) -> Result<String, Failure> {
    let corpus = match corpus {
        Some(c) => c,
        None => required(&cfg.data.eval, "eval")?,
    };
    let dir = resolve_checkpoint(checkpoint)?;
    let model = load_model(&dir)?;
    if check_arch {
        check_architecture(&model.config, &cfg.model)?;
    }
    let vocab = load_vocab(&dir)?;
    let sessions = read_dialogues(corpus)?;
    // corpus candidates only; the gold lands at a seeded position
    let examples = dialogue_examples(&sessions, &vocab, model.config.max_len, 0, cfg.seed())?;
    let metrics = run_evaluation(&model, &examples, &cfg.generation)?;
    let report = ReportFile {
        config_fingerprint: cfg.fingerprint(),
        checkpoint: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        checkpoint_sha256: sha256_hex(&read_bytes(&dir.join(MODEL_FILE))?),
        corpus_sha256: sha256_hex(&read_bytes(corpus)?),
        metrics,
    };
    let body = serde_json::to_string_pretty(&report).map_err(dialmem::Error::from)? + "\n";
    write_atomic(out, body.as_bytes())?;

    let m = &report.metrics;
    let mut rows = vec![("examples".to_owned(), m.n_examples.to_string())];
    if let Some(h) = m.hits_at_1 {
        rows.push(("hits@1".into(), format!("{h:.4}")));
    }
    rows.push(("ppl".into(), format!("{:.4}", m.ppl)));
    rows.push(("f1".into(), format!("{:.4}", m.f1)));
    rows.push(("dist-1".into(), format!("{:.4}", m.dist1)));
    rows.push(("dist-2".into(), format!("{:.4}", m.dist2)));
    for (i, b) in m.bleu.iter().enumerate() {
        rows.push((format!("bleu-{}", i + 1), format!("{b:.4}")));
    }
    let table: Vec<String> = rows.iter().map(|(k, v)| format!("{k:<10} {v:>10}")).collect();
    Ok(table.join("\n"))
}

/// Runs the per-op suite and every training objective. Returns the printed
/// lines, failing with [`EXIT_VERIFY`] naming each op or component over
/// tolerance.
pub fn gradcheck(seed: u64, fault: FaultInjection) -> Result<String, Failure> {
    let mut lines = Vec::new();
    let mut failing = Vec::new();
    let mut record = |kind: &str, name: &str, err: f64, at: Option<&str>| {
        let ok = err < TOLERANCE;
        let at = at.map(|p| format!(" at {p}")).unwrap_or_default();
        lines.push(format!("{kind:<9} {name:<18} max_rel_error {err:.3e}{at} {}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            failing.push(format!("{kind} {name}"));
        }
    };
    for (name, r) in check_ops(seed, fault)? {
        record("op", name, r.max_rel_error, None);
    }
    for c in check_reference(seed, fault)? {
        record("objective", c.component, c.result.max_rel_error, c.worst_param.as_deref());
    }
    let report = lines.join("\n");
    if failing.is_empty() {
        Ok(report)
    } else {
        Err(Failure::new(
            EXIT_VERIFY,
            format!("{report}\ngradient check failed: {}", failing.join(", ")),
        ))
    }
}
