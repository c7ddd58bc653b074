//! Central finite-difference gradient checker.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than relatively.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.passed)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// `f` receives a fresh graph and the variable holding the (possibly
/// perturbed) point, and returns the scalar output node.
pub fn check_gradients<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_gradients_with_step(f, point, tolerance, DEFAULT_STEP)
}

pub fn check_gradients_with_step<F>(
    f: F,
    point: &Tensor,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param("x", x)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let v = g.param("x", point.clone())?;
    let out = f(&mut g, v)?;
    let analytic = g.backward(out)?.wrt(&g, v);

    let mut coordinates = Vec::with_capacity(point.numel());
    let mut max_relative_error: f64 = 0.0;
    for index in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[index] += step;
        let mut minus = point.clone();
        minus.data_mut()[index] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[index];
        let relative_error = relative_error(a, numeric);
        max_relative_error = max_relative_error.max(relative_error);
        coordinates.push(CoordinateCheck {
            index,
            analytic: a,
            numeric,
            relative_error,
            passed: relative_error < tolerance,
        });
    }
    Ok(GradCheckReport {
        coordinates,
        max_relative_error,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let report = check_gradients(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::vector(vec![1.0, 2.0]),
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!((report.coordinates[0].analytic - 2.0).abs() < 1e-12);
        assert!((report.coordinates[1].analytic - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dead_branch_is_zero_on_both_sides() {
        let report = check_gradients(
            |g, x| {
                let first = g.slice_cols(x, 0, 1)?;
                let sq = g.mul(first, first)?;
                g.sum(sq)
            },
            &Tensor::from_rows(&[vec![3.0, -7.0]]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.coordinates[1].analytic, 0.0);
        assert_eq!(report.coordinates[1].numeric, 0.0);
    }

    #[test]
    fn wrong_gradient_fails() {
        // Clamp at the kink reports zero slope while the numeric slope is 1/2.
        let report = check_gradients(
            |g, x| {
                let c = g.clamp(x, 0.0, 10.0)?;
                g.sum(c)
            },
            &Tensor::vector(vec![0.0]),
            1e-3,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
