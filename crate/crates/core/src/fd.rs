//! Finite differences, the reference every analytic gradient in this crate
//! is checked against: plain central differences, and Ridders'
//! extrapolated central differences for the stacked model, whose chained
//! products defeat any single step.

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Gradient of `f` at `x` by central differences:
/// component `j` is `(f(x + h e_j) − f(x − h e_j)) / 2h`.
pub fn central_diff(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Result<Vector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(
            "h",
            format!("step must be positive, got {h}"),
        ));
    }
    let mut probe = x.clone();
    let mut grad = Vector::zeros(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let plus = f(&probe);
        probe[j] = orig - h;
        let minus = f(&probe);
        probe[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "central_diff: f not finite around component {j}"
            )));
        }
        grad[j] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Steps in the Ridders tableau and the ratio between successive steps.
const RIDDERS_STEPS: usize = 10;
const RIDDERS_SHRINK: f64 = 1.4;
/// Smallest step of the tableau as a fraction of the initial one.
pub const RIDDERS_MIN_STEP: f64 = {
    let mut r = 1.0;
    let mut i = 1;
    while i < RIDDERS_STEPS {
        r /= RIDDERS_SHRINK;
        i += 1;
    }
    r
};

/// Gradient of `f` at `x` by Ridders' polynomial extrapolation of central
/// differences over the steps `h, h/1.4, h/1.4², …`. Returns the estimate
/// and the tableau's own error estimate per component.
pub fn ridders_diff(
    f: impl Fn(&Vector) -> f64,
    x: &Vector,
    h: f64,
) -> Result<(Vector, Vector)> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(
            "h",
            format!("step must be positive, got {h}"),
        ));
    }
    let con2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut probe = x.clone();
    let mut grad = Vector::zeros(x.len());
    let mut errs = Vector::zeros(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        let mut quotient = |step: f64| -> Result<f64> {
            probe[j] = orig + step;
            let plus = f(&probe);
            probe[j] = orig - step;
            let minus = f(&probe);
            probe[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "ridders_diff: f not finite around component {j}"
                )));
            }
            Ok((plus - minus) / (2.0 * step))
        };
        // table[i][k]: k-th extrapolation from step h / 1.4^i.
        let mut table = vec![vec![0.0; RIDDERS_STEPS]; RIDDERS_STEPS];
        let mut step = h;
        table[0][0] = quotient(step)?;
        let (mut best, mut err) = (table[0][0], f64::INFINITY);
        for i in 1..RIDDERS_STEPS {
            step /= RIDDERS_SHRINK;
            table[i][0] = quotient(step)?;
            let mut fac = con2;
            for k in 1..=i {
                table[i][k] = (table[i][k - 1] * fac - table[i - 1][k - 1]) / (fac - 1.0);
                fac *= con2;
                let e = (table[i][k] - table[i][k - 1])
                    .abs()
                    .max((table[i][k] - table[i - 1][k - 1]).abs());
                if e <= err {
                    err = e;
                    best = table[i][k];
                }
            }
            // Higher orders got worse by a safe margin: roundoff has taken
            // over.
            if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
                break;
            }
        }
        grad[j] = best;
        errs[j] = err;
    }
    Ok((grad, errs))
}

/// Largest entrywise discrepancy between `analytic` and `numeric`, relative
/// to the largest magnitude in either block. Zero when both are all-zero.
///
/// Normalizing by the block scale rather than per entry keeps structurally
/// zero entries (where the numeric side is pure roundoff) from dominating.
pub fn block_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Vector::from_fn(4, |i| i as f64);
        let g = central_diff(|_| 3.5, &x, 1e-5).unwrap();
        assert_eq!(g, Vector::zeros(4));
    }

    #[test]
    fn squared_norm() {
        let x = Vector::from_vec(vec![1.0, 2.0]).unwrap();
        let g = central_diff(|v| v.dot(v), &x, 1e-5).unwrap();
        assert!(
            (g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8,
            "{g:?}"
        );
    }

    #[test]
    fn quadratics_are_exact_up_to_roundoff() {
        let mut rng = RngStream::seeded(11);
        let n = 5;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gaussian()).collect())
            .collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let f = |v: &Vector| {
            let mut s = 0.0;
            for i in 0..n {
                s += b[i] * v[i];
                for j in 0..n {
                    s += 0.5 * a[i][j] * v[i] * v[j];
                }
            }
            s + 1.25
        };
        let x = Vector::from_fn(n, |_| rng.gaussian());
        let exact = Vector::from_fn(n, |i| {
            b[i] + (0..n)
                .map(|j| 0.5 * (a[i][j] + a[j][i]) * x[j])
                .sum::<f64>()
        });
        for h in [1e-6, 1e-5, 1e-4] {
            let g = central_diff(f, &x, h).unwrap();
            assert!(g.sub(&exact).max_abs() < 1e-9, "h={h}: {:?}", g.sub(&exact));
        }
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Vector::from_vec(vec![0.0]).unwrap();
        let r = central_diff(|v| if v[0] > 0.0 { f64::INFINITY } else { 0.0 }, &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn sign_flip_relative_error_is_two() {
        let a = [0.5, -0.25, 0.0];
        let n = [-0.5, 0.25, 0.0];
        assert_eq!(block_relative_error(&a, &n), 2.0);
        assert_eq!(block_relative_error(&[0.0; 3], &[0.0; 3]), 0.0);
    }
}
