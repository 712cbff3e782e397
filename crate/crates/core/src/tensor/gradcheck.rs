//! Central finite-difference gradient checking.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;

/// Outcome of a gradient check over sampled coordinates.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

/// Compare `analytic` against central differences of `f` around `x0` at
/// `n_coords` randomly sampled coordinates.
///
/// A coordinate passes when `|a - n| <= tol * max(|a|, |n|)` or when the
/// absolute difference is below 1e-8 (both gradients effectively zero).
pub fn check_grad<F>(
    mut f: F,
    x0: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    n_coords: usize,
    step: f64,
    tol: f64,
    rng: &mut impl Rng,
) -> GradCheck
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    assert_eq!(x0.shape(), analytic.shape());
    let len = x0.len();
    let mut coords: Vec<usize> = (0..len).collect();
    coords.shuffle(rng);
    coords.truncate(n_coords.min(len));

    let mut x = x0.clone();
    let mut failures = 0;
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[i] = orig;

        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.as_slice().unwrap()[i];
        let diff = (a - numeric).abs();
        let denom = a.abs().max(numeric.abs());
        let rel = if denom > 0.0 { diff / denom } else { 0.0 };
        max_rel = max_rel.max(rel);
        if diff > 1e-8 && diff > tol * denom {
            failures += 1;
        }
    }
    GradCheck {
        checked: coords.len(),
        failures,
        max_rel_err: max_rel,
    }
}
