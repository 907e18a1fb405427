//! Central-difference gradient verification.

use crate::error::{Error, Result};

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Returns the maximum over `coords` of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::contract(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= params.len() {
            return Err(Error::contract(format!("coordinate {i} out of range")));
        }
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work)?;
        work[i] = orig - h;
        let minus = f(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss while perturbing coordinate {i}"
            )));
        }
        let cd = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max((a - cd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_tight() {
        // f(x) = ½ xᵀ A x with symmetric A, ∇f = A x
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let x = [0.3, -1.2, 0.7];
        let f = |p: &[f64]| -> Result<f64> {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += 0.5 * p[i] * a[i][j] * p[j];
                }
            }
            Ok(s)
        };
        let grad: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i][j] * x[j]).sum())
            .collect();
        let err = finite_diff_check(f, &x, &grad, &[0, 1, 2], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let err = finite_diff_check(|_| Ok(0.0), &[1.0, 2.0], &[0.0, 0.0], &[0, 1], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(finite_diff_check(|_| Ok(0.0), &[1.0], &[0.0], &[0], 1e-2).is_err());
        let r = finite_diff_check(|_| Ok(f64::NAN), &[1.0], &[0.0], &[0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
