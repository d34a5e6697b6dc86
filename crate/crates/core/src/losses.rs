//! Training objectives, all expressed as tape compositions.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Axis, Tape, Tensor, Var};

/// Denominator guard for the cosine terms of [`orthogonality_loss`].
pub const COSINE_EPS: f64 = 1e-12;

/// Row-wise log-softmax built from the primitive ops. The row maxima enter
/// as constants; the result is exact because log-softmax is shift-invariant.
pub fn log_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (r, c) = tape.dims2(logits);
    let v = tape.value(logits);
    let maxes: Vec<f64> = (0..r)
        .map(|i| v[i * c..(i + 1) * c].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = tape.constant(Tensor::new(vec![r, 1], maxes)?);
    let shifted = tape.sub(logits, shift)?;
    let e = tape.exp(shifted);
    let s = tape.sum_cols(e);
    let lse = tape.log(s);
    tape.sub(shifted, lse)
}

/// Mean negative log-likelihood of `targets` under row-wise `logits`.
/// With a mask, only rows marked true count (padding is excluded).
pub fn token_nll(tape: &mut Tape, logits: Var, targets: &[u32], mask: Option<&[bool]>) -> Result<Var> {
    let (r, c) = tape.dims2(logits);
    if r != targets.len() {
        return Err(contract(format!(
            "{} logit rows for {} targets",
            r,
            targets.len()
        )));
    }
    if mask.is_some_and(|m| m.len() != r) {
        return Err(contract("target mask length differs from target count"));
    }
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let count = (0..r).filter(|&i| live(i)).count();
    if count == 0 {
        return Err(contract("no non-padding target tokens"));
    }
    let mut pick = vec![0.0; r * c];
    for (i, &t) in targets.iter().enumerate() {
        if !live(i) {
            continue;
        }
        if t as usize >= c {
            return Err(contract(format!("target id {t} outside {c} classes")));
        }
        pick[i * c + t as usize] = 1.0;
    }
    let lp = log_softmax(tape, logits)?;
    let pick = tape.constant(Tensor::new(vec![r, c], pick)?);
    let chosen = tape.mul(lp, pick)?;
    let total = tape.sum(chosen);
    Ok(tape.scale(total, -1.0 / count as f64))
}

/// Teacher-forced entailment LM loss over hypothesis positions.
pub fn erm_lm_loss(tape: &mut Tape, logits: Var, hypothesis_ids: &[u32], mask: Option<&[bool]>) -> Result<Var> {
    token_nll(tape, logits, hypothesis_ids, mask)
}

/// Teacher-forced response LM loss with both latents injected.
pub fn response_lm_loss(tape: &mut Tape, logits: Var, response_ids: &[u32], mask: Option<&[bool]>) -> Result<Var> {
    token_nll(tape, logits, response_ids, mask)
}

/// `Σᵢⱼ (Mᵢ·Nⱼ)² / max(‖Mᵢ‖²‖Nⱼ‖², ε²)`, the summed squared cosines.
///
/// Each term is `exp(log (Mᵢ·Nⱼ)² − log denominator)`, so identical rows give
/// exactly 1. Exactly orthogonal pairs give 0 with a zero gradient.
pub fn orthogonality_loss(tape: &mut Tape, m: Var, n: Var) -> Result<Var> {
    let sq_norms = |tape: &mut Tape, x: Var| -> Result<Var> {
        let sq = tape.mul(x, x)?;
        Ok(tape.sum_cols(sq))
    };
    let nm = sq_norms(tape, m)?; // [k × 1]
    let nn = sq_norms(tape, n)?; // [l × 1]
    let nt = tape.transpose(n);
    let dots = tape.matmul(m, nt)?; // [k × l]
    let num = tape.mul(dots, dots)?;
    let nnt = tape.transpose(nn);
    let denom = tape.matmul(nm, nnt)?;
    let small: Vec<bool> = tape.value(denom).iter().map(|&d| d < COSINE_EPS * COSINE_EPS).collect();
    let denom = tape.masked_fill(denom, &small, COSINE_EPS * COSINE_EPS)?;
    let zero: Vec<bool> = tape.value(num).iter().map(|&v| v == 0.0).collect();
    let safe = tape.masked_fill(num, &zero, 1.0)?;
    let ln = tape.log(safe);
    let ld = tape.log(denom);
    let diff = tape.sub(ln, ld)?;
    let cos2 = tape.exp(diff);
    let cos2 = tape.masked_fill(cos2, &zero, 0.0)?;
    Ok(tape.sum(cos2))
}

/// Bag-of-words loss: mean over response tokens of `-log softmax(f)[token]`,
/// where `f` is the position-independent vocabulary logit vector.
pub fn bow_loss(tape: &mut Tape, bow_logits: Var, response_ids: &[u32]) -> Result<Var> {
    let tokens = response_ids;
    if tokens.is_empty() {
        return Err(contract("bag-of-words loss needs a non-empty response"));
    }
    let (r, v) = tape.dims2(bow_logits);
    if r != 1 {
        return Err(contract("bag-of-words logits must be a single row"));
    }
    let lp = log_softmax(tape, bow_logits)?;
    let mut counts = vec![0.0; v];
    for &t in tokens {
        if t as usize >= v {
            return Err(contract(format!("token id {t} outside {v} classes")));
        }
        counts[t as usize] += 1.0;
    }
    let shape = tape.shape(lp).to_vec();
    let w = tape.constant(Tensor::new(shape, counts)?);
    let chosen = tape.mul(lp, w)?;
    let total = tape.sum(chosen);
    Ok(tape.scale(total, -1.0 / tokens.len() as f64))
}

/// Cross-entropy of the candidate scores against the one-hot gold.
pub fn cls_loss(tape: &mut Tape, candidate_logits: Var, gold_index: usize) -> Result<Var> {
    let n = tape.value(candidate_logits).len();
    if gold_index >= n {
        return Err(contract(format!("gold index {gold_index} out of range for {n} candidates")));
    }
    let (r, c) = tape.dims2(candidate_logits);
    let row = if r == 1 {
        candidate_logits
    } else if c == 1 {
        tape.transpose(candidate_logits)
    } else {
        return Err(contract(format!(
            "candidate logits must be a vector, got {:?}",
            tape.shape(candidate_logits)
        )));
    };
    let lp = log_softmax(tape, row)?;
    let pick = tape.slice(lp, Axis::Cols, gold_index, 1)?;
    let s = tape.sum(pick);
    Ok(tape.scale(s, -1.0))
}

/// Per-component weights of the dialogue objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ddm: f64,
    pub bow: f64,
    pub lm: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ddm: 1.0,
            bow: 1.0,
            lm: 1.0,
            cls: 1.0,
        }
    }
}

/// Scalar values of the dialogue objective for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ddm: f64,
    pub l_bow: f64,
    pub l_lm: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(l_ddm: f64, l_bow: f64, l_lm: f64, l_cls: f64, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            l_ddm,
            l_bow,
            l_lm,
            l_cls,
            total: w.ddm * l_ddm + w.bow * l_bow + w.lm * l_lm + w.cls * l_cls,
        }
    }
}

/// Tape handles of the four dialogue components.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Terms {
    pub l_ddm: Var,
    pub l_bow: Var,
    pub l_lm: Var,
    pub l_cls: Var,
}

/// Weighted sum of the four components, plus its breakdown.
pub fn stage2_total(tape: &mut Tape, terms: Stage2Terms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let parts = [
        (terms.l_ddm, w.ddm),
        (terms.l_bow, w.bow),
        (terms.l_lm, w.lm),
        (terms.l_cls, w.cls),
    ];
    let mut total: Option<Var> = None;
    for (v, weight) in parts {
        let s = if weight == 1.0 { v } else { tape.scale(v, weight) };
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.expect("four terms");
    let b = LossBreakdown::from_components(
        tape.item(terms.l_ddm)?,
        tape.item(terms.l_bow)?,
        tape.item(terms.l_lm)?,
        tape.item(terms.l_cls)?,
        w,
    );
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_EPS};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(&Tensor::from_rows(rows).unwrap())
    }

    fn orth(m: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
        let mut tape = Tape::new();
        let (a, b) = (mat(&mut tape, m), mat(&mut tape, n));
        let l = orthogonality_loss(&mut tape, a, b).unwrap();
        tape.item(l).unwrap()
    }

    #[test]
    fn lm_loss_closed_forms() {
        let mut tape = Tape::new();
        let perfect = mat(&mut tape, &[vec![0.0, 800.0], vec![800.0, 0.0]]);
        let l = erm_lm_loss(&mut tape, perfect, &[1, 0], None).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), 0.0, epsilon = 1e-12);

        let uniform = mat(&mut tape, &vec![vec![0.0; 8]; 4]);
        let l = response_lm_loss(&mut tape, uniform, &[1, 5, 7, 2], None).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), 8f64.ln(), epsilon = 1e-12);

        let two = mat(&mut tape, &[vec![3f64.ln(), 0.0], vec![3f64.ln(), 0.0]]);
        let l = erm_lm_loss(&mut tape, two, &[0, 0], None).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), -(0.75f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(tape.item(l).unwrap(), 0.2877, epsilon = 1e-4);
    }

    #[test]
    fn lm_loss_skips_padding_and_rejects_all_pad() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[vec![0.0, 1.0, 2.0], vec![5.0, -1.0, 0.0]]);
        let with_pad = erm_lm_loss(&mut tape, x, &[2, 0], Some(&[true, false])).unwrap();
        let row = tape.slice(x, Axis::Rows, 0, 1).unwrap();
        let alone = erm_lm_loss(&mut tape, row, &[2], None).unwrap();
        assert_eq!(tape.item(with_pad).unwrap(), tape.item(alone).unwrap());
        assert!(erm_lm_loss(&mut tape, x, &[0, 0], Some(&[false, false])).is_err());
    }

    #[test]
    fn orthogonality_closed_forms() {
        let e = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        assert_eq!(orth(&[e(0), e(1)], &[e(2)]), 0.0);
        assert_eq!(orth(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]]), 1.0);
        let r = vec![0.37, -2.9, 1.1e-3, 8.25];
        assert_eq!(orth(&[r.clone()], &[r]), 1.0);
        assert_abs_diff_eq!(orth(&[vec![1.0, 0.0]], &[vec![1.0, 1.0]]), 0.5, epsilon = 1e-12);
        // zero rows are guarded, not an error
        let z = orth(&[vec![0.0, 0.0]], &[vec![1.0, 1.0]]);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn bow_closed_forms() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(&Tensor::vector(vec![0.0; 4]));
        let l = bow_loss(&mut tape, uniform, &[1, 3]).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let perfect = tape.leaf(&Tensor::vector(vec![0.0, 0.0, 900.0, 0.0]));
        let l = bow_loss(&mut tape, perfect, &[2]).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), 0.0, epsilon = 1e-12);
        let f = tape.leaf(&Tensor::vector(vec![2f64.ln(), 0.0, 0.0]));
        let l = bow_loss(&mut tape, f, &[0, 1]).unwrap();
        let expected = (-(0.5f64).ln() - (0.25f64).ln()) / 2.0;
        assert_abs_diff_eq!(tape.item(l).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.item(l).unwrap(), 1.0397, epsilon = 1e-4);
        assert!(bow_loss(&mut tape, f, &[]).is_err());
    }

    #[test]
    fn cls_closed_forms() {
        let mut tape = Tape::new();
        let eq = tape.leaf(&Tensor::vector(vec![0.3, 0.3]));
        let l = cls_loss(&mut tape, eq, 1).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let sure = tape.leaf(&Tensor::vector(vec![1e3, 0.0, 0.0]));
        let l = cls_loss(&mut tape, sure, 0).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), 0.0, epsilon = 1e-12);
        let x = tape.leaf(&Tensor::vector(vec![6f64.ln(), 2f64.ln(), 2f64.ln()]));
        let l = cls_loss(&mut tape, x, 0).unwrap();
        assert_abs_diff_eq!(tape.item(l).unwrap(), -(0.6f64).ln(), epsilon = 1e-12);
        assert!(cls_loss(&mut tape, x, 3).is_err());
        let col = tape.leaf(&Tensor::new(vec![3, 1], vec![6f64.ln(), 2f64.ln(), 2f64.ln()]).unwrap());
        let l2 = cls_loss(&mut tape, col, 0).unwrap();
        assert_eq!(tape.item(l).unwrap(), tape.item(l2).unwrap());
    }

    #[test]
    fn stage2_total_adds_components() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: f64| tape.leaf(&Tensor::scalar(v));
        let terms = Stage2Terms {
            l_ddm: mk(&mut tape, 0.5),
            l_bow: mk(&mut tape, 1.0),
            l_lm: mk(&mut tape, 2.0),
            l_cls: mk(&mut tape, 0.25),
        };
        let (t, b) = stage2_total(&mut tape, terms, &LossWeights::default()).unwrap();
        assert_eq!(tape.item(t).unwrap(), 3.75);
        assert_eq!(b.total, 3.75);
        let z = LossBreakdown::from_components(0.0, 0.0, 0.0, 0.0, &LossWeights::default());
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap()
                .with_requires_grad(true)
        };
        let m = rand_t(&[2, 4]);
        let n = rand_t(&[2, 4]);
        let r = finite_diff_check(|t, v| orthogonality_loss(t, v[0], v[1]), &[m, n], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-4, "orthogonality {r:?}");
        let logits = rand_t(&[3, 6]);
        let r = finite_diff_check(|t, v| token_nll(t, v[0], &[1, 4, 0], Some(&[true, true, false])), &[logits], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-4, "nll {r:?}");
        let f = rand_t(&[6]);
        let r = finite_diff_check(|t, v| bow_loss(t, v[0], &[1, 1, 5]), &[f], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-4, "bow {r:?}");
        let c = rand_t(&[5]);
        let r = finite_diff_check(|t, v| cls_loss(t, v[0], 3), &[c], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-4, "cls {r:?}");
    }

    fn rows_strategy(max_rows: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.1f64..2.0, 3), 1..=max_rows).prop_flat_map(|rows| {
            let n = rows.len();
            (Just(rows), proptest::collection::vec(prop_oneof![Just(-1.0), Just(1.0)], n * 3))
        })
        .prop_map(|(rows, signs)| {
            rows.iter()
                .enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v * signs[i * 3 + j]).collect())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn orthogonality_symmetric_scale_invariant_bounded(
            m in rows_strategy(4),
            n in rows_strategy(4),
            scales in proptest::collection::vec(0.01f64..100.0, 4),
        ) {
            let a = orth(&m, &n);
            let b = orth(&n, &m);
            prop_assert!((a - b).abs() <= 1e-12);
            let scaled: Vec<Vec<f64>> = m.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
            prop_assert!((orth(&scaled, &n) - a).abs() <= 1e-9);
            let bound = (m.len() * n.len()) as f64;
            prop_assert!(a >= 0.0 && a <= bound + 1e-9);
            let parallel: Vec<Vec<f64>> = n.iter().map(|_| m[0].clone()).collect();
            let p = orth(&m[..1], &parallel);
            prop_assert!((p - n.len() as f64).abs() < 1e-9);
        }

        #[test]
        fn cls_is_shift_invariant(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..6),
            shift in -50.0f64..50.0,
        ) {
            let mut tape = Tape::new();
            let a = tape.leaf(&Tensor::vector(logits.clone()));
            let b = tape.leaf(&Tensor::vector(logits.iter().map(|v| v + shift).collect()));
            let la = cls_loss(&mut tape, a, 0).unwrap();
            let lb = cls_loss(&mut tape, b, 0).unwrap();
            let (la, lb) = (tape.item(la).unwrap(), tape.item(lb).unwrap());
            prop_assert!(la >= 0.0 && la.is_finite());
            prop_assert!((la - lb).abs() < 1e-9);
        }

        #[test]
        fn breakdown_total_is_sum(c in proptest::collection::vec(0.0f64..10.0, 4)) {
            let b = LossBreakdown::from_components(c[0], c[1], c[2], c[3], &LossWeights::default());
            prop_assert!((b.total - (c[0] + c[1] + c[2] + c[3])).abs() <= 1e-12);
        }
    }
}
