//! Central-difference gradients for checking the reverse-mode rules.

use crate::error::Result;
use crate::tensor::Tensor;

/// Smallest denominator used when comparing gradients component-wise.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every component `i`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    let values = finite_difference_at(f, x, h, &all)?;
    Tensor::new(x.shape().to_vec(), values)
}

/// Central differences for the listed flat indices only.
pub fn finite_difference_at<F>(mut f: F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `|analytic − numeric| / max(|analytic|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(RELATIVE_FLOOR)
}

/// Largest component-wise [`relative_error`].
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(vec![2, 2], &[0.1, -3.0, 7.5, 2.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(0.5 * t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn floor_applies_to_tiny_gradients() {
        assert_eq!(relative_error(0.0, 1e-10), 1e-2);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
