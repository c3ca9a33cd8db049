use crate::{Error, Result};

/// Central finite-difference gradient of `loss` at `params`.
///
/// Coordinate `i` is `(L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h`. The loss must be a
/// deterministic function of the parameters (dropout masks frozen or off).
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::argument(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let up = loss(&theta);
        theta[i] = orig - h;
        let down = loss(&theta);
        theta[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest coordinate deviation between two gradients, relative to the
/// largest reference magnitude: `max|a − b| / max(max|b|, 1e-12)`.
pub fn max_relative_error(actual: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}
