//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Axis, FaultInjection, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst coordinate found by [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` against central differences over every
/// element of every input.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
/// Inputs whose `requires_grad` flag is false are held constant.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with_fault(f, inputs, eps, FaultInjection::None)
}

/// [`finite_diff_check`] with the analytic pass run on a tape carrying an
/// injected backward fault.
pub fn finite_diff_check_with_fault<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    fault: FaultInjection,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::with_fault(fault);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad && t.requires_grad());
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.item(out)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {value}")));
        }
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        for j in 0..input.numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[ti].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

/// Small graphs that together exercise every differentiable op.
fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.mul(m, m)?;
            Ok(t.sum(s))
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4], vec![3, 1]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[2])?;
            let s = t.mul(b, b)?;
            Ok(t.sum(s))
        }),
        ("mul_broadcast", vec![vec![2, 3], vec![3]], |t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.tanh(a);
            Ok(t.sum(b))
        }),
        ("scale_exp", vec![vec![5]], |t, v| {
            let a = t.scale(v[0], 0.3);
            let b = t.exp(a);
            let c = t.add_scalar(b, 1.5);
            let d = t.log(c);
            t.mean(d)
        }),
        ("gelu", vec![vec![2, 4]], |t, v| {
            let a = t.gelu(v[0]);
            let b = t.mul(a, a)?;
            Ok(t.sum(b))
        }),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let s = t.softmax(v[0])?;
            let w = t.mul(s, v[1])?;
            Ok(t.sum(w))
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5], vec![3, 5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = t.mul(y, v[3])?;
            let w = t.tanh(w);
            Ok(t.sum(w))
        }),
        ("gather_concat_slice", vec![vec![4, 3], vec![2, 3]], |t, v| {
            let g = t.gather(v[0], &[1, 3, 1])?;
            let c = t.concat(&[g, v[1]], Axis::Rows)?;
            let s = t.slice(c, Axis::Rows, 1, 3)?;
            let cc = t.concat(&[s, s], Axis::Cols)?;
            let sc = t.slice(cc, Axis::Cols, 2, 3)?;
            let e = t.mul(sc, sc)?;
            Ok(t.sum(e))
        }),
        ("transpose_sum_cols", vec![vec![3, 4]], |t, v| {
            let tr = t.transpose(v[0]);
            let s = t.sum_cols(tr);
            let e = t.exp(s);
            Ok(t.sum(e))
        }),
        ("masked_fill", vec![vec![2, 3]], |t, v| {
            let m = t.masked_fill(v[0], &[false, true, false, false, false, true], -1e9)?;
            let s = t.softmax(m)?;
            let l = t.slice(s, Axis::Cols, 0, 1)?;
            let l = t.log(l);
            Ok(t.sum(l))
        }),
    ]
}

/// Central-difference check of every primitive op on random inputs in
/// `[-2, 2]`, run on a tape with the given fault.
pub fn check_ops(seed: u64, fault: FaultInjection) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                    Tensor::new(s.clone(), data).map(|t| t.with_requires_grad(true))
                })
                .collect::<Result<_>>()?;
            Ok((name, finite_diff_check_with_fault(f, &inputs, DEFAULT_EPS, fault)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn square_is_exact() {
        let x = Tensor::scalar(2.0).with_requires_grad(true);
        let r = finite_diff_check(|t, v| t.mul(v[0], v[0]), &[x], DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(0.0).with_requires_grad(true);
        assert!(finite_diff_check(|t, v| Ok(t.log(v[0])), &[x.clone()], 1e-5).is_err());
        assert!(finite_diff_check(|t, v| Ok(t.exp(v[0])), &[x], 0.0).is_err());
    }

    #[test]
    fn every_op_matches_central_differences() {
        for (name, r) in check_ops(7, FaultInjection::None).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn op_suite_names_the_faulty_op() {
        for fault in [FaultInjection::SoftmaxBackward, FaultInjection::LayerNormBackward] {
            let failing: Vec<&str> = check_ops(7, fault)
                .unwrap()
                .into_iter()
                .filter(|(_, r)| r.max_rel_error >= 1e-4)
                .map(|(n, _)| n)
                .collect();
            assert!(failing.contains(&fault.op_name()), "{failing:?}");
        }
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 3], &mut rng);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let s = tape.softmax(v).unwrap();
            let a = tape.sum(s);
            let sq = tape.mul(v, v).unwrap();
            let b = tape.sum(sq);
            let b = tape.tanh(b);
            let loss = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap().to_vec()
        };
        let (ga, gb, gab) = (run(0), run(1), run(2));
        for i in 0..9 {
            assert!((ga[i] + gb[i] - gab[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn fault_injection_is_detected() {
        let x = Tensor::vector(vec![0.2, -0.4, 1.1]).with_requires_grad(true);
        let w = Tensor::vector(vec![1.0, 2.0, -1.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.softmax(v[0])?;
            let m = t.mul(s, v[1])?;
            Ok(t.sum(m))
        };
        let ok = finite_diff_check(f, &[x.clone(), w.clone()], DEFAULT_EPS).unwrap();
        assert!(ok.max_rel_error < 1e-6);
        // Same graph on a faulty tape.
        let mut tape = Tape::with_fault(FaultInjection::SoftmaxBackward);
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let out = f(&mut tape, &[xv, wv]).unwrap();
        tape.backward(out).unwrap();
        let bad = tape.grad(xv).unwrap()[0];
        let good = {
            let mut t = Tape::new();
            let xv = t.leaf(&x);
            let wv = t.leaf(&w);
            let o = f(&mut t, &[xv, wv]).unwrap();
            t.backward(o).unwrap();
            t.grad(xv).unwrap()[0]
        };
        assert!(relative_error(bad, good) > 0.1);
    }
}
