use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point. The
/// result is the largest per-coordinate
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_coords(f, point, step, &coords)
}

/// Same as [`finite_difference_check`] restricted to `coords`.
pub fn finite_difference_check_coords<F>(
    mut f: F,
    point: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(contract!("finite-difference step must be > 0, got {step}"));
    }
    let (value, grad) = f(point)?;
    finite(value, "base point")?;
    if grad.len() != point.len() {
        return Err(contract!(
            "gradient has {} entries for a {}-dimensional point",
            grad.len(),
            point.len()
        ));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for &c in coords {
        if c >= point.len() {
            return Err(contract!("coordinate {c} out of range"));
        }
        probe[c] = point[c] + step;
        let (plus, _) = f(&probe)?;
        probe[c] = point[c] - step;
        let (minus, _) = f(&probe)?;
        probe[c] = point[c];
        finite(plus, "perturbed point")?;
        finite(minus, "perturbed point")?;
        let central = (plus - minus) / (2.0 * step);
        let analytic = grad[c];
        let denom = analytic.abs().max(central.abs()).max(1e-8);
        worst = worst.max((analytic - central).abs() / denom);
    }
    Ok(worst)
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("function value {v} at {what}")))
    }
}
