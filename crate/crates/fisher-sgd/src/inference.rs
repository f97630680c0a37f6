//! Asymptotic confidence statements built from the estimated Fisher
//! information: an ellipsoidal region in the unconstrained chart and
//! delta-method intervals for the original (constrained) parameters.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{chisq_quantile, normal_quantile, spd_solve, SymMatrix};
use crate::reparam::Bijection;

/// A two-sided interval for one original-space parameter.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceInterval {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub lower: f64,
    pub upper: f64,
    /// True when the chart gradient of this parameter vanished at the
    /// estimate, making the interval degenerate.
    pub degenerate: bool,
}

/// Marginal intervals plus the ellipsoid threshold at a common level.
#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceReport {
    pub level: f64,
    pub intervals: Vec<ConfidenceInterval>,
    /// Quantile bounding the ellipsoid statistic at `level`.
    pub ellipsoid_threshold: f64,
}

/// Quadratic form (theta - theta_hat)ᵀ F (theta - theta_hat); the
/// confidence ellipsoid is the sublevel set at the chi-square quantile.
pub fn ellipsoid_statistic(theta: &[f64], theta_hat: &[f64], fim: &SymMatrix) -> Result<f64> {
    if theta.len() != theta_hat.len() || theta.len() != fim.dim() {
        return Err(Error::DimensionMismatch { expected: fim.dim(), got: theta.len() });
    }
    let diff: Vec<f64> = theta.iter().zip(theta_hat).map(|(a, b)| a - b).collect();
    Ok(fim.quad_form(&diff))
}

/// True when `theta` lies in the `level` confidence ellipsoid centred at
/// `theta_hat`.
pub fn ellipsoid_contains(
    theta: &[f64],
    theta_hat: &[f64],
    fim: &SymMatrix,
    level: f64,
) -> Result<bool> {
    let stat = ellipsoid_statistic(theta, theta_hat, fim)?;
    Ok(stat <= chisq_quantile(level, fim.dim())?)
}

/// Delta-method interval for the single original parameter with flat
/// index `index`: eta_hat ± u_{1-a/2} sqrt(gᵀ F⁻¹ g) where g is the
/// corresponding row of the chart Jacobian at theta_hat.
pub fn delta_ci(
    reparam: &Bijection,
    theta_hat: &[f64],
    fim: &SymMatrix,
    index: usize,
    level: f64,
) -> Result<ConfidenceInterval> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must be in (0,1), got {level}")));
    }
    let eta = reparam.forward(theta_hat);
    if index >= eta.len() {
        return Err(Error::DimensionMismatch { expected: eta.len(), got: index });
    }
    let jac = reparam.jacobian(theta_hat);
    let g = &jac[index];
    let degenerate = g.iter().all(|&x| x == 0.0);
    let variance = if degenerate {
        0.0
    } else {
        let solved = spd_solve(fim, g)?;
        g.iter().zip(&solved).map(|(a, b)| a * b).sum::<f64>()
    };
    if variance < 0.0 {
        return Err(Error::Domain(format!(
            "negative delta-method variance {variance} for parameter {index}"
        )));
    }
    let u = normal_quantile(0.5 + level / 2.0)?;
    let se = variance.sqrt();
    Ok(ConfidenceInterval {
        name: format!("eta_{index}"),
        estimate: eta[index],
        std_err: se,
        lower: eta[index] - u * se,
        upper: eta[index] + u * se,
        degenerate,
    })
}

/// Delta-method intervals for every original parameter.
pub fn confidence_report(
    reparam: &Bijection,
    theta_hat: &[f64],
    fim: &SymMatrix,
    level: f64,
    names: &[String],
) -> Result<ConfidenceReport> {
    let mut intervals = Vec::with_capacity(reparam.original_dim());
    for index in 0..reparam.original_dim() {
        let mut ci = delta_ci(reparam, theta_hat, fim, index, level)?;
        if let Some(name) = names.get(index) {
            ci.name = name.clone();
        }
        intervals.push(ci);
    }
    Ok(ConfidenceReport {
        level,
        intervals,
        ellipsoid_threshold: chisq_quantile(level, fim.dim())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::compose;

    #[test]
    fn ellipsoid_statistic_hand_checked() {
        let fim = SymMatrix::diag(&[4.0, 1.0]);
        let stat = ellipsoid_statistic(&[1.0, 2.0], &[0.0, 0.0], &fim).unwrap();
        assert!((stat - 8.0).abs() < 1e-14);
        assert!(ellipsoid_contains(&[0.0, 0.0], &[0.0, 0.0], &fim, 0.95).unwrap());
        assert!(!ellipsoid_contains(&[10.0, 0.0], &[0.0, 0.0], &fim, 0.95).unwrap());
    }

    #[test]
    fn identity_chart_interval_is_classical() {
        // F = diag(n/s): CI for the mean is mean ± 1.96 sqrt(s/n).
        let reparam = compose(vec![Bijection::Real, Bijection::Positive]);
        let n = 100.0;
        let s = 5.0;
        let omega2: f64 = 4.0;
        let fim = SymMatrix::diag(&[n / s, n * omega2 * omega2 / (2.0 * s * s)]);
        let theta_hat = [1.5, omega2.ln()];
        let ci = delta_ci(&reparam, &theta_hat, &fim, 0, 0.95).unwrap();
        let se = (s / n).sqrt();
        assert!((ci.std_err - se).abs() < 1e-12);
        assert!((ci.lower - (1.5 - 1.959963984540054 * se)).abs() < 1e-9);
        assert!((ci.upper - (1.5 + 1.959963984540054 * se)).abs() < 1e-9);
        assert!(!ci.degenerate);
    }

    #[test]
    fn exp_chart_interval_maps_through_jacobian() {
        // eta = exp(theta_2): g = [0, omega2], se = s sqrt(2/n).
        let reparam = compose(vec![Bijection::Real, Bijection::Positive]);
        let n = 400.0;
        let s = 5.0;
        let omega2: f64 = 4.0;
        let fim = SymMatrix::diag(&[n / s, n * omega2 * omega2 / (2.0 * s * s)]);
        let ci = delta_ci(&reparam, &[0.0, omega2.ln()], &fim, 1, 0.95).unwrap();
        assert!((ci.estimate - omega2).abs() < 1e-12);
        assert!((ci.std_err - s * (2.0 / n).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn interval_width_scales_inverse_sqrt_n() {
        let reparam = compose(vec![Bijection::Real]);
        let widths: Vec<f64> = [100.0, 400.0]
            .iter()
            .map(|&n| {
                let fim = SymMatrix::diag(&[n / 3.0]);
                let ci = delta_ci(&reparam, &[0.0], &fim, 0, 0.95).unwrap();
                ci.upper - ci.lower
            })
            .collect();
        assert!((widths[0] / widths[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn report_names_and_threshold() {
        let reparam = compose(vec![Bijection::Real, Bijection::Positive]);
        let fim = SymMatrix::diag(&[10.0, 10.0]);
        let names = vec!["mu".to_string(), "omega2".to_string()];
        let report = confidence_report(&reparam, &[0.0, 0.0], &fim, 0.95, &names).unwrap();
        assert_eq!(report.intervals.len(), 2);
        assert_eq!(report.intervals[0].name, "mu");
        assert!((report.ellipsoid_threshold - 5.991464547107979).abs() < 1e-6);
    }
}
