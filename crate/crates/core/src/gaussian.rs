//! Gaussian landmark densities and the extended-Kalman measurement update
//! shared by the map filters.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix3, Matrix5, Matrix5x3, Vector3, Vector5, U5};

use crate::model::{
    innovation, predict_raw, predict_with_jacobian, Geometry, LandmarkKind, MeasNoise, UeState,
};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian over a landmark position, tagged with the landmark kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub kind: LandmarkKind,
}

/// Linearized measurement model of one landmark density at one UE state.
/// Independent of the measurement, so it is built once per component and
/// reused for every measurement.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub zhat: Vector5<f64>,
    pub h: Matrix5x3<f64>,
    chol: Cholesky<f64, U5>,
    log_norm: f64,
    /// Kalman gain `P H^T S^-1`.
    gain: nalgebra::Matrix3x5<f64>,
}

impl Linearization {
    /// Linearizes at the mean. `None` when the geometry is degenerate or the
    /// innovation covariance is not positive definite.
    pub fn new(
        mean: &Vector3<f64>,
        cov: &Matrix3<f64>,
        kind: LandmarkKind,
        s: &UeState,
        geom: &Geometry,
        noise: &MeasNoise,
    ) -> Option<Self> {
        let (zhat, jac) = predict_with_jacobian(mean, kind, s, geom).ok()?;
        let h = jac.landmark;
        let ph = cov * h.transpose();
        let mut sm: Matrix5<f64> = h * ph + noise.covariance();
        sm = 0.5 * (sm + sm.transpose());
        let chol = sm.cholesky()?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        let gain = chol.solve(&ph.transpose()).transpose();
        Some(Self {
            zhat,
            h,
            log_norm: -0.5 * (5.0 * LOG_2PI + log_det),
            chol,
            gain,
        })
    }

    pub fn innovation(&self, z: &Vector5<f64>) -> Vector5<f64> {
        innovation(z, &self.zhat)
    }

    /// Squared Mahalanobis distance of the innovation.
    pub fn mahalanobis2(&self, z: &Vector5<f64>) -> f64 {
        let r = self.innovation(z);
        self.chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .map_or(f64::INFINITY, |y| y.norm_squared())
    }

    /// `log N(z; zhat, S)`.
    pub fn log_likelihood(&self, z: &Vector5<f64>) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis2(z)
    }

    /// Posterior mean and covariance after conditioning on `z`.
    pub fn posterior(
        &self,
        mean: &Vector3<f64>,
        cov: &Matrix3<f64>,
        z: &Vector5<f64>,
    ) -> (Vector3<f64>, Matrix3<f64>) {
        let r = self.innovation(z);
        let m = mean + self.gain * r;
        // Joseph-free form; symmetrized to keep round-off from accumulating
        let p = cov - self.gain * self.h * cov;
        (m, 0.5 * (p + p.transpose()))
    }
}

/// `log N(z; h(x, s), R)` for a point landmark, without linearization.
pub fn point_log_likelihood(
    position: &Vector3<f64>,
    kind: LandmarkKind,
    s: &UeState,
    geom: &Geometry,
    noise: &MeasNoise,
    z: &Vector5<f64>,
) -> Option<f64> {
    let zhat = predict_raw(position, kind, s, geom).ok()?;
    gaussian_log_pdf(&innovation(z, &zhat), noise.covariance())
}

/// Log-density of a zero-mean 5D Gaussian evaluated at `r`.
pub fn gaussian_log_pdf(r: &Vector5<f64>, cov: &Matrix5<f64>) -> Option<f64> {
    let chol = cov.cholesky()?;
    let l = chol.l();
    let y = l.solve_lower_triangular(r)?;
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some(-0.5 * (5.0 * (2.0 * PI).ln() + log_det + y.norm_squared()))
}

/// Moment-matched single Gaussian of a weighted mixture. Returns the total
/// weight alongside. `None` for zero total weight.
pub fn moment_match<'a>(
    items: impl IntoIterator<Item = (f64, &'a Vector3<f64>, &'a Matrix3<f64>)> + Clone,
) -> Option<(f64, Vector3<f64>, Matrix3<f64>)> {
    let total: f64 = items.clone().into_iter().map(|(w, _, _)| w).sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mean: Vector3<f64> = items
        .clone()
        .into_iter()
        .map(|(w, m, _)| w * m)
        .sum::<Vector3<f64>>()
        / total;
    let cov: Matrix3<f64> = items
        .into_iter()
        .map(|(w, m, p)| {
            let d = m - mean;
            w * (p + d * d.transpose())
        })
        .sum::<Matrix3<f64>>()
        / total;
    Some((total, mean, 0.5 * (cov + cov.transpose())))
}

/// Log of a sum of exponentials, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
