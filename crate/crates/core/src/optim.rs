//! AdamW with decoupled weight decay and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_accum_steps: usize,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> OptimConfig {
        OptimConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_accum_steps: 8,
            batch_size_stage1: 64,
            batch_size_stage2: 2,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("optimizer config: {m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.grad_accum_steps == 0 {
            return bad("grad_accum_steps must be at least 1");
        }
        if self.batch_size_stage1 == 0 || self.batch_size_stage2 == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be non-negative");
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Moments {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    Skipped { reason: &'static str },
}

/// L2 norm over the accumulated gradients of the selected parameters.
pub fn global_grad_norm(params: &ParamStore, trainable: &dyn Fn(&str) -> bool) -> f64 {
    params
        .iter()
        .filter(|(n, _)| trainable(n))
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update on every trainable parameter from its accumulated
/// gradient; gradients are cleared afterwards whether or not the step ran.
pub fn adamw_step(
    params: &mut ParamStore,
    trainable: &dyn Fn(&str) -> bool,
    moments: &mut BTreeMap<String, Moments>,
    cfg: &OptimConfig,
) -> StepOutcome {
    let norm = global_grad_norm(params, trainable);
    if !norm.is_finite() {
        log::warn!("non-finite gradient norm; optimizer step skipped");
        params.zero_grads();
        return StepOutcome::Skipped {
            reason: "non-finite gradient",
        };
    }
    let clip = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
        cfg.max_grad_norm / norm
    } else {
        1.0
    };
    let names: Vec<String> = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if !trainable(name) {
            continue;
        }
        let n = t.numel();
        let mo = moments.entry(name.clone()).or_insert_with(|| Moments::zeros(n));
        mo.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mo.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mo.t as i32);
        let grad: Vec<f64> = match t.grad() {
            Some(g) => g.iter().map(|g| g * clip).collect(),
            None => vec![0.0; n],
        };
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let data = t.data_mut();
        for i in 0..n {
            let g = grad[i];
            mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
            mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = mo.m[i] / bc1;
            let vhat = mo.v[i] / bc2;
            data[i] = data[i] * decay - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    params.zero_grads();
    StepOutcome::Applied {
        grad_norm: norm,
        clipped: clip < 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::vector(vals);
        t.accumulate_grad(&grad, 1.0).unwrap();
        s.insert("w", t).unwrap();
        s
    }

    fn cfg() -> OptimConfig {
        OptimConfig {
            learning_rate: 0.1,
            max_grad_norm: 0.0,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        let g = [0.5, -2.0, 1e-3];
        let mut s = store(vec![1.0, 1.0, 1.0], g.to_vec());
        let mut m = BTreeMap::new();
        adamw_step(&mut s, &|_| true, &mut m, &cfg());
        let w = s.get("w").unwrap().data();
        for (i, gi) in g.iter().enumerate() {
            let expect = 1.0 - 0.1 * gi / (gi.abs() + 1e-8);
            assert!((w[i] - expect).abs() < 1e-12, "{} vs {expect}", w[i]);
        }
        assert_eq!(m["w"].t, 1);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store(vec![0.3, -0.7], vec![0.0, 0.0]);
        let before = s.clone();
        adamw_step(&mut s, &|_| true, &mut BTreeMap::new(), &cfg());
        assert_eq!(s.get("w").unwrap().data(), before.get("w").unwrap().data());
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut s = store(vec![3.0, -4.0], vec![0.0, 0.0]);
        let c = OptimConfig {
            weight_decay: 0.5,
            ..cfg()
        };
        adamw_step(&mut s, &|_| true, &mut BTreeMap::new(), &c);
        let w = s.get("w").unwrap().data();
        assert!(w[0].hypot(w[1]) < 5.0);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut s = store(vec![1.0], vec![f64::NAN]);
        let mut m = BTreeMap::new();
        let out = adamw_step(&mut s, &|_| true, &mut m, &cfg());
        assert!(matches!(out, StepOutcome::Skipped { .. }));
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
        assert!(m.is_empty());
    }

    #[test]
    fn clipping_rescales_global_norm() {
        let mut s = store(vec![0.0, 0.0], vec![30.0, 40.0]);
        let c = OptimConfig {
            max_grad_norm: 5.0,
            ..cfg()
        };
        let mut m = BTreeMap::new();
        let out = adamw_step(&mut s, &|_| true, &mut m, &c);
        assert_eq!(
            out,
            StepOutcome::Applied {
                grad_norm: 50.0,
                clipped: true
            }
        );
        assert!((m["w"].m[0] - 0.1 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_get_no_moments() {
        let mut s = store(vec![1.0], vec![1.0]);
        s.insert("frozen", Tensor::vector(vec![2.0])).unwrap();
        let mut m = BTreeMap::new();
        adamw_step(&mut s, &|n| n != "frozen", &mut m, &cfg());
        assert!(!m.contains_key("frozen"));
        assert_eq!(s.get("frozen").unwrap().data(), &[2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let c = OptimConfig {
            grad_accum_steps: 0,
            ..OptimConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
