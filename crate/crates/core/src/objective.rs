//! Per-example forward passes for both training stages.

use crate::data::{DialogueExample, EncodedSequence, EntailmentExample};
use crate::error::{contract, Result};
use crate::losses::{bow_loss, cls_loss, erm_lm_loss, orthogonality_loss, response_lm_loss};
use crate::model::{EncoderOutput, Graph, Injection, MemoryKind, MemoryRead};
use crate::tensor::{Axis, Tape, Var};

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct EntailmentForward {
    pub loss: Var,
    pub read: MemoryRead,
    pub correct: usize,
    pub tokens: usize,
}

/// Encodes the premise, reads the entailment memory, injects `z`, and scores
/// the hypothesis under teacher forcing.
pub fn entailment_forward(g: &Graph<'_>, tape: &mut Tape, ex: &EntailmentExample) -> Result<EntailmentForward> {
    let ids = &ex.decoder_ids;
    if ids.len() < 3 {
        return Err(contract("decoder sequence needs [SOH] [BOS] … [EOS]"));
    }
    let enc = g.encode(tape, &ex.premise)?;
    let read = g.read_memory(tape, MemoryKind::Entailment, enc.h_z)?;
    let input = &ids[..ids.len() - 1];
    let out = g.decode(tape, Some(&enc), input, Injection { z: Some(read.latent), z_d: None })?;
    let targets = &ids[2..];
    let logits = tape.slice(out.logits, Axis::Rows, 1, targets.len())?;
    let loss = erm_lm_loss(tape, logits, targets, None)?;
    let correct = count_correct(tape, logits, targets);
    Ok(EntailmentForward {
        loss,
        read,
        correct,
        tokens: targets.len(),
    })
}

fn count_correct(tape: &Tape, logits: Var, targets: &[u32]) -> usize {
    let (_, c) = tape.dims2(logits);
    let v = tape.value(logits);
    targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(&v[i * c..(i + 1) * c]) == t as usize)
        .count()
}

/// Both memory reads for one dialogue context.
#[derive(Clone, Debug)]
pub struct DualRead {
    /// Encoding of the persona + dialogue context (decoder cross-attends to it).
    pub context: EncoderOutput,
    pub entailment: MemoryRead,
    pub discourse: MemoryRead,
}

impl DualRead {
    pub fn injection(&self) -> Injection {
        Injection {
            z: Some(self.entailment.latent),
            z_d: Some(self.discourse.latent),
        }
    }
}

/// Discourse read on the context layout plus entailment read on the persona
/// in premise layout.
pub fn dual_read(
    g: &Graph<'_>,
    tape: &mut Tape,
    context: &EncodedSequence,
    persona_premise: &EncodedSequence,
) -> Result<DualRead> {
    let ctx = g.encode(tape, context)?;
    let discourse = g.read_memory(tape, MemoryKind::Discourse, ctx.h_z)?;
    let per = g.encode(tape, persona_premise)?;
    let entailment = g.read_memory(tape, MemoryKind::Entailment, per.h_z)?;
    Ok(DualRead {
        context: ctx,
        entailment,
        discourse,
    })
}

#[derive(Clone, Debug)]
pub struct DialogueForward {
    pub l_bow: Var,
    pub l_lm: Var,
    pub l_cls: Var,
    /// Candidate scores in candidate order.
    pub scores: Vec<f64>,
    pub read: DualRead,
    pub gold_correct: usize,
    pub gold_tokens: usize,
}

/// One decoder pass per candidate; the gold candidate's logits double as the
/// LM prediction (the inputs are identical), its final hidden state feeds the
/// classification head like every other candidate.
pub fn dialogue_forward(g: &Graph<'_>, tape: &mut Tape, ex: &DialogueExample) -> Result<DialogueForward> {
    if ex.candidates.is_empty() || ex.gold_index >= ex.candidates.len() {
        return Err(contract("dialogue example has no gold candidate"));
    }
    let read = dual_read(g, tape, &ex.context, &ex.persona_premise)?;
    let mut score_vars = Vec::with_capacity(ex.candidates.len());
    let mut lm = None;
    for (i, cand) in ex.candidates.iter().enumerate() {
        if cand.len() < 3 {
            return Err(contract("candidate decoder sequence needs [SOH] [BOS] … [EOS]"));
        }
        let out = g.decode(tape, Some(&read.context), cand, read.injection())?;
        let h_eos = tape.slice(out.hidden, Axis::Rows, cand.len() - 1, 1)?;
        score_vars.push(g.candidate_score(tape, h_eos)?);
        if i == ex.gold_index {
            let targets = &cand[2..];
            let logits = tape.slice(out.logits, Axis::Rows, 1, targets.len())?;
            lm = Some((logits, targets));
        }
    }
    let (logits, targets) = lm.expect("gold candidate decoded");
    let l_lm = response_lm_loss(tape, logits, targets, None)?;
    let gold_correct = count_correct(tape, logits, targets);
    let scores_col = tape.concat(&score_vars, Axis::Rows)?;
    let scores: Vec<f64> = tape.value(scores_col).to_vec();
    let l_cls = cls_loss(tape, scores_col, ex.gold_index)?;
    let bow = g.bow_logits(tape, read.entailment.latent, read.discourse.latent)?;
    let l_bow = bow_loss(tape, bow, ex.gold_words())?;
    Ok(DialogueForward {
        l_bow,
        l_lm,
        l_cls,
        scores,
        read,
        gold_correct,
        gold_tokens: targets.len(),
    })
}

/// Orthogonality between the two memory row matrices.
pub fn memory_orthogonality(g: &Graph<'_>, tape: &mut Tape) -> Result<Var> {
    orthogonality_loss(tape, g.param("erm.rows"), g.param("ddm.rows"))
}
