use crate::error::{BevError, Result};

use super::Tensor;

/// Central-difference gradient of a scalar function.
///
/// The divisor is the actual `f32` spacing between the two probes, not
/// `2·step`, so rounding of the perturbed input does not bias the estimate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f32) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(BevError::Oracle(format!("step {step} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let (hi, lo) = (x0 + step, x0 - step);
        probe.data_mut()[i] = hi;
        let fp = f(&probe);
        probe.data_mut()[i] = lo;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(BevError::Oracle(format!(
                "non-finite function value near element {i}"
            )));
        }
        grad.data_mut()[i] = ((fp - fm) / (hi as f64 - lo as f64)) as f32;
    }
    Ok(grad)
}

/// Largest elementwise absolute difference; infinite on shape mismatch.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    if a.shape() != b.shape() {
        return f32::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.3 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn square_sum_matches_analytic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum(), &x, 1e-3)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
        assert!((g.data()[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn max_yields_one_hot_subgradient() {
        let x = Tensor::new(vec![4], vec![0.1, 0.9, -0.3, 0.5]).unwrap();
        let g = finite_diff_grad(
            |t| t.data().iter().copied().fold(f32::MIN, f32::max) as f64,
            &x,
            1e-3,
        )
        .unwrap();
        let want = [0.0, 1.0, 0.0, 0.0];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::zeros(&[1]);
        let r = finite_diff_grad(|t| (t.data()[0] as f64).ln(), &x, 1e-3);
        assert!(matches!(r, Err(BevError::Oracle(_))));
    }
}
