//! Central finite-difference verification of tape gradients.
//!
//! Runs in f64 only. The numeric derivative is an independent oracle: it
//! re-evaluates the forward function at perturbed inputs and never touches
//! the backward rules it is checking.

#[cfg(test)]
use super::scalar::Scalar;
use super::tape::{Tape, Value};
use super::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Relative-error tolerance: |a-n| / max(|a|,|n|,1e-8) must stay below.
    pub tol: f64,
    /// When set, at most this many elements per input tensor are probed,
    /// chosen deterministically from `seed`.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { h: 1e-5, tol: 1e-4, max_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare tape gradients of a scalar-valued function against central
/// finite differences at the given inputs.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &[Value]) -> Value,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vals: Vec<Value> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vals);
    assert!(tape.value(loss).is_scalar(), "grad_check: f must be scalar-valued");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vals
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut eval = |pts: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vals: Vec<Value> = pts.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vals);
        tape.value(loss).item()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, pass: true, checked: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elems: Vec<usize> = match cfg.max_per_tensor {
            Some(cap) if n > cap => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ti as u64));
                let mut picked: Vec<usize> = (0..cap).map(|_| rng.gen_range(0..n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for e in elems {
            let x0 = input.data()[e];
            work[ti].data_mut()[e] = x0 + cfg.h;
            let fp = eval(&work);
            work[ti].data_mut()[e] = x0 - cfg.h;
            let fm = eval(&work);
            work[ti].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[ti].data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, e, a, numeric));
            }
        }
    }
    report.pass = report.max_rel_err <= cfg.tol;
    report
}

/// Uniform random tensor in (lo, hi), for building check inputs.
#[cfg(test)]
pub(crate) fn rand_tensor<S: Scalar>(
    shape: &[usize],
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(lo..hi)))
}
