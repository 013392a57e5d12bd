//! Central finite-difference oracle for tape gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tensors_checked: usize,
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of the scalar `loss` against central
/// differences, coordinate by coordinate, and returns the largest relative
/// error over the sampled coordinates.
///
/// `loss` receives one [`Var`] per entry of `params`, in order.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let values: Vec<Arc<Tensor<f64>>> = params.iter().map(|(_, t)| Arc::new(t.clone())).collect();

    let tape = Tape::new();
    let vars: Vec<Var<f64>> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = loss(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |values: &[Arc<Tensor<f64>>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<f64>> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let v = loss(&tape, &vars)?.value().item()?;
        if !v.is_finite() {
            bail!(Numeric, "non-finite loss {v} during finite differencing");
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        tensors_checked: 0,
    };
    let mut work = values.clone();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for &i in &coords {
            let base = tensor.data()[i];
            let mut plus = tensor.clone();
            plus.data_mut()[i] = base + opts.step;
            work[pi] = Arc::new(plus);
            let fp = eval(&work)?;
            let mut minus = tensor.clone();
            minus.data_mut()[i] = base - opts.step;
            work[pi] = Arc::new(minus);
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(analytic[pi].data()[i], numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
            report.coords_checked += 1;
        }
        work[pi] = values[pi].clone();
        report.tensors_checked += 1;
    }
    Ok(report)
}
