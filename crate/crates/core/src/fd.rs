//! Central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// Per-coordinate step `base * max(1, |v|)`.
#[inline]
pub fn scaled_step(base: f64, v: f64) -> f64 {
    base * v.abs().max(1.0)
}

/// Central-difference gradient of a scalar function of a vector.
pub fn central_gradient<F>(mut f: F, x: &DVector<f64>, base_step: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = scaled_step(base_step, x[i]);
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        g[i] = (plus - minus) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn central_gradient_matrix<F>(mut f: F, m: &DMatrix<f64>, base_step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    let mut g = DMatrix::zeros(m.nrows(), m.ncols());
    let mut probe = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            let h = scaled_step(base_step, v);
            probe[(i, j)] = v + h;
            let plus = f(&probe)?;
            probe[(i, j)] = v - h;
            let minus = f(&probe)?;
            probe[(i, j)] = v;
            g[(i, j)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(g)
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = DVector::from_vec(vec![1.5, -3.0, 0.2]);
        let g = central_gradient(|v| Ok(v.norm_squared()), &x, 1e-5).unwrap();
        assert!((g - &x * 2.0).amax() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0], 1e-12), 0.0);
        assert!((relative_error(&[1.1], &[1.0], 1e-12) - 0.1).abs() < 1e-12);
    }
}
