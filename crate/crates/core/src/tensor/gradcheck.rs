//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{contract, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Absolute tolerance expressed relative to the target relative tolerance:
    /// the reported error is `|a - n| / (max(|a|, |n|) + floor)`, so with the
    /// defaults an element passes at 1e-6 iff `|a - n| <= 1e-6·max(|a|,|n|) + 1e-9`.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares the gradient of scalar `f` with respect to each leaf in `inputs`
/// against central differences. `f` must read the current leaf values on
/// every call; the leaves are perturbed in place and restored.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_leaf() || !t.requires_grad() {
            return Err(contract(format!("gradcheck input {i} must be a trainable leaf")));
        }
        t.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = t.data()[c];
            t.set_value_at(c, orig + cfg.eps);
            let fp = f()?.item();
            t.set_value_at(c, orig - cfg.eps);
            let fm = f()?.item();
            t.set_value_at(c, orig);
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[ti][c];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs().max(numeric.abs()) + cfg.floor);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_input = ti;
                report.worst_coord = c;
            }
        }
    }
    for t in inputs {
        t.zero_grad();
    }
    Ok(report)
}
