use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_oracle<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Oracle(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| <= max(abs_tol, rel_tol * max(|a|, |b|))`.
pub fn close(a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> bool {
    (a - b).abs() <= abs_tol.max(rel_tol * a.abs().max(b.abs()))
}
