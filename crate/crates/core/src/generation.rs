//! Response generation and candidate ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{
    assemble_ddm_input, assemble_persona_premise, decoder_sequence, is_special, EncodedSequence, Vocab, BOS, EOS, SOH,
};
use crate::error::{contract, Result};
use crate::model::{Graph, Model};
use crate::objective::{argmax, dual_read, DualRead};
use crate::tensor::{Axis, Tape};

/// Hard ceiling on generated tokens, `[EOS]` included.
pub const MAX_GENERATED_TOKENS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Multiple-choice head on the final decoder state.
    Classifier,
    /// Mean token log-likelihood under teacher forcing.
    LmLikelihood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub length_alpha: f64,
    pub rank_by: RankBy,
}

impl Default for GenerationConfig {
    fn default() -> GenerationConfig {
        GenerationConfig {
            beam_size: 4,
            max_new_tokens: MAX_GENERATED_TOKENS,
            length_alpha: 0.7,
            rank_by: RankBy::Classifier,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens; ends with `[EOS]` iff finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn empty() -> BeamHypothesis {
        BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    /// `log_prob / len^alpha`.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(alpha)
    }

    /// Tokens without the trailing `[EOS]`.
    pub fn words(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn extend(&self, tok: u32, lp: f64) -> BeamHypothesis {
        let mut tokens = self.tokens.clone();
        tokens.push(tok);
        BeamHypothesis {
            tokens,
            log_prob: self.log_prob + lp,
            finished: tok == EOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub hypothesis: BeamHypothesis,
    pub score: f64,
    /// Entailment-memory read weights.
    pub pi: Vec<f64>,
    /// Discourse-memory read weights.
    pub rho: Vec<f64>,
}

impl Generation {
    pub fn finished(&self) -> bool {
        self.hypothesis.finished
    }

    pub fn words(&self) -> &[u32] {
        self.hypothesis.words()
    }
}

/// Encoded context and latents for one turn, ready for repeated decoding.
pub struct Conditioned<'m> {
    tape: Tape,
    graph: Graph<'m>,
    read: DualRead,
}

impl<'m> Conditioned<'m> {
    pub fn new(model: &'m Model, context: &EncodedSequence, persona_premise: &EncodedSequence) -> Result<Conditioned<'m>> {
        let mut tape = Tape::new();
        let graph = model.bind(&mut tape, &|_| false);
        let read = dual_read(&graph, &mut tape, context, persona_premise)?;
        Ok(Conditioned { tape, graph, read })
    }

    pub fn pi(&self) -> Vec<f64> {
        self.tape.value(self.read.entailment.weights).to_vec()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.tape.value(self.read.discourse.weights).to_vec()
    }

    /// Log-probabilities of the next token after `[SOH] [BOS] prefix`.
    pub fn next_log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut ids = vec![SOH, BOS];
        ids.extend_from_slice(prefix);
        let out = self
            .graph
            .decode(&mut self.tape, Some(&self.read.context), &ids, self.read.injection())?;
        let (rows, cols) = self.tape.dims2(out.logits);
        let row = &self.tape.value(out.logits)[(rows - 1) * cols..];
        Ok(log_softmax(row))
    }

    /// Classification-head score of a full decoder sequence.
    pub fn classifier_score(&mut self, decoder_ids: &[u32]) -> Result<f64> {
        let out = self
            .graph
            .decode(&mut self.tape, Some(&self.read.context), decoder_ids, self.read.injection())?;
        let h = self.tape.slice(out.hidden, Axis::Rows, decoder_ids.len() - 1, 1)?;
        let s = self.graph.candidate_score(&mut self.tape, h)?;
        self.tape.item(s)
    }

    /// Summed log-probability of `t1 … tn [EOS]` given `[SOH] [BOS]`, with
    /// the number of scored tokens.
    pub fn log_likelihood(&mut self, decoder_ids: &[u32]) -> Result<(f64, usize)> {
        if decoder_ids.len() < 3 {
            return Err(contract("decoder sequence needs [SOH] [BOS] … [EOS]"));
        }
        let out = self
            .graph
            .decode(&mut self.tape, Some(&self.read.context), decoder_ids, self.read.injection())?;
        let (_, cols) = self.tape.dims2(out.logits);
        let v = self.tape.value(out.logits);
        let targets = &decoder_ids[2..];
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let p = i + 1;
                log_softmax(&v[p * cols..(p + 1) * cols])[t as usize]
            })
            .sum();
        Ok((total, targets.len()))
    }

    pub fn mean_log_likelihood(&mut self, decoder_ids: &[u32]) -> Result<f64> {
        let (ll, n) = self.log_likelihood(decoder_ids)?;
        Ok(ll / n as f64)
    }

    fn cap(&self, max_new_tokens: usize) -> usize {
        max_new_tokens
            .min(MAX_GENERATED_TOKENS)
            .min(self.graph.config().max_len.saturating_sub(2))
    }

    /// Repeated argmax over generable tokens.
    pub fn greedy(&mut self, max_new_tokens: usize) -> Result<BeamHypothesis> {
        let mut h = BeamHypothesis::empty();
        for _ in 0..self.cap(max_new_tokens) {
            let lp = self.next_log_probs(&h.tokens)?;
            let tok = best_allowed(&lp);
            h = h.extend(tok, lp[tok as usize]);
            if h.finished {
                break;
            }
        }
        Ok(h)
    }

    /// Beam search over cumulative log-probability. Each step keeps the top
    /// `beam_size` expansions (ties: earlier beam, then lower token id);
    /// expansions ending in `[EOS]` leave the beam. The result is the best
    /// finished hypothesis by length-normalized score, falling back to the
    /// best unfinished one when nothing finished within the budget.
    pub fn beam_search(&mut self, cfg: &GenerationConfig) -> Result<BeamHypothesis> {
        if cfg.beam_size == 0 {
            return Err(contract("beam_size must be at least 1"));
        }
        let cap = self.cap(cfg.max_new_tokens);
        let mut beams = vec![BeamHypothesis::empty()];
        let mut done: Vec<BeamHypothesis> = Vec::new();
        for _ in 0..cap {
            let mut expansions: Vec<(f64, usize, u32)> = Vec::new();
            for (b, h) in beams.iter().enumerate() {
                let lp = self.next_log_probs(&h.tokens)?;
                for (tok, &l) in lp.iter().enumerate() {
                    if allowed(tok as u32) {
                        expansions.push((h.log_prob + l, b, tok as u32));
                    }
                }
            }
            expansions.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
            let mut next = Vec::new();
            for &(total, b, tok) in expansions.iter().take(cfg.beam_size) {
                let mut h = beams[b].extend(tok, 0.0);
                h.log_prob = total;
                if h.finished {
                    done.push(h);
                } else {
                    next.push(h);
                }
            }
            beams = next;
            if beams.is_empty() {
                break;
            }
        }
        let mut pool = if done.is_empty() { beams } else { done };
        if cfg.beam_size > 1 {
            pool.push(self.greedy(cfg.max_new_tokens)?);
        }
        Ok(select(pool, cfg.length_alpha))
    }
}

/// Best hypothesis preferring finished ones, then higher normalized score,
/// then earlier position.
fn select(pool: Vec<BeamHypothesis>, alpha: f64) -> BeamHypothesis {
    let mut best: Option<BeamHypothesis> = None;
    for h in pool {
        let better = match &best {
            None => true,
            Some(b) => (h.finished && !b.finished) || (h.finished == b.finished && h.score(alpha) > b.score(alpha)),
        };
        if better {
            best = Some(h);
        }
    }
    best.expect("non-empty pool")
}

fn allowed(tok: u32) -> bool {
    tok == EOS || !is_special(tok)
}

fn best_allowed(lp: &[f64]) -> u32 {
    let mut best: Option<usize> = None;
    for (i, &l) in lp.iter().enumerate() {
        if allowed(i as u32) && best.is_none_or(|b| l > lp[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary contains [EOS]") as u32
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Encoder inputs for a persona, prior turns and the current query.
pub fn turn_inputs(
    vocab: &Vocab,
    persona: &[String],
    history: &[(String, String)],
    query: &str,
    max_len: usize,
) -> Result<(EncodedSequence, EncodedSequence)> {
    let persona: Vec<Vec<u32>> = persona.iter().map(|s| vocab.encode(s)).collect();
    let history: Vec<(Vec<u32>, Vec<u32>)> = history.iter().map(|(q, r)| (vocab.encode(q), vocab.encode(r))).collect();
    let context = assemble_ddm_input(&persona, &history, &vocab.encode(query), max_len)?;
    let premise = assemble_persona_premise(&persona, max_len)?;
    Ok((context, premise))
}

pub fn generate(
    model: &Model,
    context: &EncodedSequence,
    persona_premise: &EncodedSequence,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    let mut c = Conditioned::new(model, context, persona_premise)?;
    let hypothesis = c.beam_search(cfg)?;
    if !hypothesis.finished {
        log::warn!("no hypothesis finished within the token budget");
    }
    Ok(Generation {
        score: hypothesis.score(cfg.length_alpha),
        hypothesis,
        pi: c.pi(),
        rho: c.rho(),
    })
}

pub fn greedy_decode(
    model: &Model,
    context: &EncodedSequence,
    persona_premise: &EncodedSequence,
    max_new_tokens: usize,
) -> Result<BeamHypothesis> {
    Conditioned::new(model, context, persona_premise)?.greedy(max_new_tokens)
}

/// Text-level entry point: returns the detokenized response with the raw result.
pub fn generate_response(
    model: &Model,
    vocab: &Vocab,
    persona: &[String],
    history: &[(String, String)],
    query: &str,
    cfg: &GenerationConfig,
) -> Result<(String, Generation)> {
    let (context, premise) = turn_inputs(vocab, persona, history, query, model.config.max_len)?;
    let g = generate(model, &context, &premise, cfg)?;
    Ok((vocab.decode(g.words()), g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub scores: Vec<f64>,
    pub best_index: usize,
}

/// Scores each candidate (word ids, no specials) independently. Empty
/// candidates score −∞; ties go to the lower index.
pub fn rank_candidates(
    model: &Model,
    context: &EncodedSequence,
    persona_premise: &EncodedSequence,
    candidates: &[Vec<u32>],
    rank_by: RankBy,
) -> Result<Ranking> {
    if candidates.len() < 2 {
        return Err(contract("ranking needs at least two candidates"));
    }
    let mut c = Conditioned::new(model, context, persona_premise)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if cand.is_empty() {
            scores.push(f64::NEG_INFINITY);
            continue;
        }
        let ids = decoder_sequence(cand, model.config.max_len);
        scores.push(match rank_by {
            RankBy::Classifier => c.classifier_score(&ids)?,
            RankBy::LmLikelihood => c.mean_log_likelihood(&ids)?,
        });
    }
    let best_index = argmax(&scores);
    Ok(Ranking { scores, best_index })
}
