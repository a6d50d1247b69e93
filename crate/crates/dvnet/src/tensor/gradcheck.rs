//! Finite-difference gradient oracle.
//!
//! Independent of the adjoint code by construction: it only re-evaluates a
//! scalar-valued forward closure at perturbed inputs. Used by the op-level
//! gradient tests and the full-network acceptance check.

use super::elem::Element;

/// Central finite difference of `f` w.r.t. entry `idx` of `values`.
pub fn central_difference<T, F>(values: &[T], idx: usize, step: f64, mut f: F) -> f64
where
    T: Element,
    F: FnMut(&[T]) -> f64,
{
    let mut shifted = values.to_vec();
    shifted[idx] = T::from_f64(values[idx].to_f64() + step);
    let hi = f(&shifted);
    shifted[idx] = T::from_f64(values[idx].to_f64() - step);
    let lo = f(&shifted);
    (hi - lo) / (2.0 * step)
}

/// Relative error between an analytic derivative and its finite-difference
/// estimate, with an absolute floor so near-zero derivatives do not explode
/// the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Check every entry (or a sampled subset) of one input against central
/// differences. Returns the worst relative error encountered.
pub fn check_grad<T, F>(
    values: &[T],
    analytic: &[T],
    indices: &[usize],
    step: f64,
    mut f: F,
) -> f64
where
    T: Element,
    F: FnMut(&[T]) -> f64,
{
    assert_eq!(values.len(), analytic.len());
    let mut worst = 0.0f64;
    for &i in indices {
        let numeric = central_difference(values, i, step, &mut f);
        let err = relative_error(analytic[i].to_f64(), numeric);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2), df/dx = 2x
        let xs = vec![0.5f64, -1.25, 3.0];
        let grad: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        let worst = check_grad(&xs, &grad, &[0, 1, 2], 1e-5, |v| {
            v.iter().map(|x| x * x).sum()
        });
        assert!(worst < 1e-8, "worst {worst}");
    }
}
