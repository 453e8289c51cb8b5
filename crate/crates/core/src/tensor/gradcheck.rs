//! Central finite-difference verification of analytic gradients.
//!
//! Only the forward closure is evaluated for the numeric side, so the check
//! stays independent of every backward implementation it validates. Run it in
//! `f64`: L1 kinks and `f32` rounding otherwise dominate the difference
//! quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, no_grad, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Step for the central difference.
    pub step: f64,
    /// Largest accepted `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    /// Denominator floor so that vanishing gradients compare absolutely.
    pub floor: f64,
    /// Number of elements to probe; `None` probes every element.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, tolerance: 1e-3, floor: 1e-6, samples: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Elements skipped because the loss is not smooth around them.
    pub resampled: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> usize {
        self.probes.iter().filter(|p| p.rel_error <= self.tolerance).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.probes.is_empty() {
            return 0.0;
        }
        self.passed() as f64 / self.probes.len() as f64
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares the gradient of `loss()` with respect to each tensor in `inputs`
/// against central differences.
///
/// `loss` must be deterministic: reseed any dropout RNG inside it. Elements
/// where the half-step and full-step quotients disagree sit on a kink
/// (ReLU, L1) and are replaced by a fresh random element, up to a bounded
/// number of attempts.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], loss: F, cfg: GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn() -> Result<Tensor<f64>, TensorError>,
{
    for t in inputs {
        t.zero_grad();
    }
    let l = loss()?;
    backward(&l)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = || -> Result<f64, TensorError> { no_grad(|| loss().map(|t| t.item())) };
    let quotient = |t: &Tensor<f64>, idx: usize, h: f64| -> Result<f64, TensorError> {
        let orig = t.data()[idx];
        t.data_mut()[idx] = orig + h;
        let plus = eval()?;
        t.data_mut()[idx] = orig - h;
        let minus = eval()?;
        t.data_mut()[idx] = orig;
        Ok((plus - minus) / (2.0 * h))
    };

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let locate = |flat: usize| -> (usize, usize) {
        let mut rem = flat;
        for (i, &n) in sizes.iter().enumerate() {
            if rem < n {
                return (i, rem);
            }
            rem -= n;
        }
        unreachable!("flat index within total")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wanted = cfg.samples.unwrap_or(total).min(total);
    let mut report = GradCheckReport { tolerance: cfg.tolerance, ..Default::default() };
    let mut next_sequential = 0usize;
    let max_attempts = wanted * 4 + 16;
    let mut attempts = 0;
    while report.probes.len() < wanted && attempts < max_attempts {
        attempts += 1;
        let flat = if cfg.samples.is_some() {
            rng.gen_range(0..total)
        } else {
            if next_sequential >= total {
                break;
            }
            next_sequential += 1;
            next_sequential - 1
        };
        let (input, index) = locate(flat);
        let t = &inputs[input];
        let numeric = quotient(t, index, cfg.step)?;
        let half = quotient(t, index, cfg.step / 2.0)?;
        let scale = numeric.abs().max(half.abs()).max(cfg.floor);
        if (numeric - half).abs() / scale > cfg.tolerance {
            report.resampled += 1;
            continue;
        }
        let a = analytic[input][index];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        report.probes.push(Probe { input, index, analytic: a, numeric, rel_error });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mul, sum};

    #[test]
    fn quadratic_passes_every_element() {
        let x = Tensor::<f64>::parameter(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let xc = x.clone();
        let report = check_gradients(&[x], || Ok(sum(&mul(&xc, &xc)?)), GradCheckConfig::default()).unwrap();
        assert_eq!(report.probes.len(), 4);
        assert_eq!(report.pass_fraction(), 1.0);
    }
}
