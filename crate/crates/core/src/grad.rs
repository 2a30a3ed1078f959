//! Central finite-difference gradients for checking analytic backward
//! passes.

use crate::tensor::Scalar;

/// Central-difference gradient of `f` at `x`.
///
/// Each coordinate is perturbed by `eps` in the element's own precision;
/// the divided difference uses the actually realized spacing `hi - lo`,
/// which matters in `f32` where `x + eps` rounds.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&[T]) -> f64,
    x: &[T],
    eps: f64,
) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        let hi = orig + T::from_f64(eps);
        let lo = orig - T::from_f64(eps);
        work[i] = hi;
        let up = f(&work);
        work[i] = lo;
        let dn = f(&work);
        work[i] = orig;
        let spacing = (hi - lo).to_f64();
        grad.push((up - dn) / spacing);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2 + x_0 x_1, grad = 2x + [x_1, x_0, 0...]
        let x = [1.5f64, -2.0, 0.25];
        let mut f = |v: &[f64]| v.iter().map(|&a| a * a).sum::<f64>() + v[0] * v[1];
        let g = finite_diff_grad(&mut f, &x, 1e-6);
        let want = [2.0 * 1.5 - 2.0, 2.0 * -2.0 + 1.5, 0.5];
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn f32_spacing_is_realized_spacing() {
        let x = [100.0f32];
        let mut f = |v: &[f32]| (v[0] as f64) * 3.0;
        let g = finite_diff_grad(&mut f, &x, 1e-2);
        assert!((g[0] - 3.0).abs() < 1e-3, "{}", g[0]);
    }
}
