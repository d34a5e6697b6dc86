//! Automatic metrics and the evaluation report.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::DialogueExample;
use crate::error::{Error, Result};
use crate::generation::{generate, rank_candidates, Conditioned, GenerationConfig};
use crate::model::Model;

pub const BLEU_SMOOTHING: &str = "add-1 on n-gram counts for n >= 2, none for n = 1";

/// Fraction of `(gold, predicted)` pairs that agree.
pub fn hits_at_1(results: &[(usize, usize)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("ranked results"));
    }
    let hits = results.iter().filter(|(g, p)| g == p).count();
    Ok(hits as f64 / results.len() as f64)
}

/// `exp(total_nll / tokens)`.
pub fn perplexity_from(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Empty("perplexity tokens"));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Summed negative log-likelihood and token count of the gold responses
/// (`[EOS]` included) under teacher forcing with injected latents.
pub fn gold_nll(model: &Model, examples: &[DialogueExample]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut c = Conditioned::new(model, &ex.context, &ex.persona_premise)?;
        let (ll, n) = c.log_likelihood(ex.gold())?;
        total -= ll;
        tokens += n;
    }
    Ok((total, tokens))
}

pub fn perplexity(model: &Model, examples: &[DialogueExample]) -> Result<f64> {
    let (nll, n) = gold_nll(model, examples)?;
    perplexity_from(nll, n)
}

fn counts<T: Eq + Hash + Clone>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

/// Multiset word overlap F1; 0 when either side is empty.
pub fn word_f1<T: Eq + Hash + Clone>(prediction: &[T], gold: &[T]) -> f64 {
    if prediction.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let p = counts(prediction.iter().cloned());
    let g = counts(gold.iter().cloned());
    let overlap: usize = p.iter().map(|(w, c)| (*c).min(g.get(w).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / prediction.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Distinct n-grams over total n-grams across all responses.
pub fn dist_n<T: Eq + Hash + Clone>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("dist-n needs n >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for w in r.windows(n) {
            seen.insert(w.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Corpus BLEU-1 … BLEU-`max_n`: clipped n-gram precision, geometric mean,
/// brevity penalty. Smoothing as in [`BLEU_SMOOTHING`].
pub fn corpus_bleu<T: Eq + Hash + Clone>(predictions: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    if predictions.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if predictions.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} references",
            predictions.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Contract("BLEU needs max_n >= 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut pred_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let pc = counts(p.windows(n).map(|w| w.to_vec()));
            let rc = counts(r.windows(n).map(|w| w.to_vec()));
            matched[n - 1] += pc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += p.len().saturating_sub(n - 1);
        }
    }
    let bp = if pred_len == 0 {
        0.0
    } else if pred_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    let precision: Vec<f64> = (0..max_n)
        .map(|i| {
            if i == 0 {
                if total[0] == 0 {
                    0.0
                } else {
                    matched[0] as f64 / total[0] as f64
                }
            } else {
                (matched[i] + 1) as f64 / (total[i] + 1) as f64
            }
        })
        .collect();
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for (i, &p) in precision.iter().enumerate() {
        log_sum += p.ln();
        let gm = (log_sum / (i + 1) as f64).exp();
        out.push(bp * gm);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hits_at_1: Option<f64>,
    pub ppl: f64,
    pub f1: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub bleu: Vec<f64>,
    pub bleu_smoothing: String,
}

/// Runs ranking, teacher-forced scoring and generation over `examples`.
/// Turns with fewer than two candidates are left out of Hits@1; without any
/// such turn the field is omitted.
pub fn evaluate(model: &Model, examples: &[DialogueExample], cfg: &GenerationConfig) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut ranked = Vec::new();
    let mut preds = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.candidates.len() >= 2 {
            let words: Vec<Vec<u32>> = ex.candidates.iter().map(|c| c[2..c.len() - 1].to_vec()).collect();
            let r = rank_candidates(model, &ex.context, &ex.persona_premise, &words, cfg.rank_by)?;
            ranked.push((ex.gold_index, r.best_index));
        }
        let g = generate(model, &ex.context, &ex.persona_premise, cfg)?;
        preds.push(g.words().to_vec());
        golds.push(ex.gold_words().to_vec());
    }
    if ranked.is_empty() {
        log::warn!("no turn has candidates; Hits@1 omitted");
    }
    let f1 = preds.iter().zip(&golds).map(|(p, g)| word_f1(p, g)).sum::<f64>() / examples.len() as f64;
    Ok(EvalReport {
        n_examples: examples.len(),
        hits_at_1: if ranked.is_empty() { None } else { Some(hits_at_1(&ranked)?) },
        ppl: perplexity(model, examples)?,
        f1,
        dist1: dist_n(&preds, 1)?,
        dist2: dist_n(&preds, 2)?,
        bleu: corpus_bleu(&preds, &golds, 4)?,
        bleu_smoothing: BLEU_SMOOTHING.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn hits_counts() {
        assert_eq!(hits_at_1(&[(0, 0), (1, 1)]).unwrap(), 1.0);
        assert_eq!(hits_at_1(&[(0, 1), (1, 0)]).unwrap(), 0.0);
        assert_eq!(hits_at_1(&[(0, 0), (1, 1), (2, 2), (3, 0)]).unwrap(), 0.75);
        assert!(hits_at_1(&[]).is_err());
    }

    #[test]
    fn perplexity_closed_forms() {
        let v = 100usize;
        let n = 7;
        let uniform = perplexity_from(n as f64 * (v as f64).ln(), n).unwrap();
        assert!((uniform - 100.0).abs() < 1e-9);
        assert_eq!(perplexity_from(0.0, 3).unwrap(), 1.0);
        assert!((perplexity_from(5.0 * 2f64.ln(), 5).unwrap() - 2.0).abs() < 1e-12);
        assert!(perplexity_from(0.0, 0).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(word_f1(&w("a b c"), &w("a b c")), 1.0);
        assert_eq!(word_f1(&w("a b"), &w("b c")), 0.5);
        assert_eq!(word_f1(&w(""), &w("b c")), 0.0);
        // clipped: one "a" in gold matches only once
        assert!((word_f1(&w("a a"), &w("a b")) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dist_examples() {
        assert!((dist_n(&[w("a a a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dist_n(&[w("a b c")], 1).unwrap(), 1.0);
        assert_eq!(dist_n(&[w("a b"), w("a b")], 2).unwrap(), 0.5);
        assert_eq!(dist_n(&[w("a")], 2).unwrap(), 0.0);
    }

    #[test]
    fn bleu_examples() {
        let c = vec![w("the cat sat on the mat"), w("a dog")];
        for b in corpus_bleu(&c, &c, 4).unwrap() {
            assert!((b - 1.0).abs() < 1e-12);
        }
        let b = corpus_bleu(&[w("a b c d")], &[w("a b c d e")], 4).unwrap();
        let bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((b[3] - bp).abs() < 1e-12);
        assert!((b[3] - 0.7788).abs() < 1e-4);
        let d = corpus_bleu(&[w("x y z")], &[w("a b c")], 4).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(corpus_bleu::<String>(&[], &[], 4).is_err());
    }

    #[test]
    fn bleu_smoothing_closed_form() {
        // p1 = 2/3, p2 = (0 + 1) / (2 + 1)
        let b = corpus_bleu(&[w("a x b")], &[w("a y b")], 2).unwrap();
        assert!((b[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((b[1] - (2.0f64 / 3.0 * 1.0 / 3.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in proptest::collection::vec(0u8..5, 0..8), b in proptest::collection::vec(0u8..5, 0..8)) {
            prop_assert_eq!(word_f1(&a, &b), word_f1(&b, &a));
        }

        #[test]
        fn dist_is_order_invariant(mut rs in proptest::collection::vec(proptest::collection::vec(0u8..4, 0..6), 1..5)) {
            let before = (dist_n(&rs, 1).unwrap(), dist_n(&rs, 2).unwrap());
            rs.reverse();
            prop_assert_eq!(before, (dist_n(&rs, 1).unwrap(), dist_n(&rs, 2).unwrap()));
        }

        #[test]
        fn metrics_stay_in_range(a in proptest::collection::vec(0u8..5, 1..8), b in proptest::collection::vec(0u8..5, 1..8)) {
            let f = word_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            for x in corpus_bleu(std::slice::from_ref(&a), std::slice::from_ref(&b), 4).unwrap() {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
