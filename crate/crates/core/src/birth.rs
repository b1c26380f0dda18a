//! Measurement-driven landmark births.
//!
//! A measurement that no existing landmark density explains is inverted
//! into one candidate landmark per kind. The inversion is refined by a few
//! Gauss-Newton steps on the full measurement, and the candidate is kept
//! only when the fit is consistent. Virtual anchors get an extra prior that
//! places them at base-station height (vertical reflectors), which is what
//! separates a first sighting of a scatter point from a wall reflection:
//! a single snapshot of either is otherwise indistinguishable.

use nalgebra::{Matrix3, Matrix5, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::gaussian::GaussianComponent;
use crate::model::{
    detection_probability_at, direction_vector, innovation, predict_with_jacobian, LandmarkKind,
    MeasVector, Scenario, UeState, SPEED_OF_LIGHT,
};

const GN_ITERATIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BirthParams {
    /// Mass of each birth component.
    pub weight: f64,
    /// Covariance inflation over the single-measurement information.
    pub spread: f64,
    /// Squared Mahalanobis distance under which a measurement counts as
    /// explained by an existing density.
    pub gate: f64,
    /// Largest acceptable whitened squared residual of the inversion fit.
    pub fit_gate: f64,
    /// Standard deviation of the virtual-anchor height prior, meters.
    pub va_height_std: f64,
}

impl Default for BirthParams {
    fn default() -> Self {
        Self {
            weight: 1.5e-5,
            spread: 100.0,
            gate: 25.0,
            fit_gate: 16.0,
            va_height_std: 1.0,
        }
    }
}

/// Closed-form guess of the landmark producing `z` from delay and arrival angle.
pub fn invert(z: &MeasVector, kind: LandmarkKind, s: &UeState, sc: &Scenario) -> Option<Vector3<f64>> {
    let ue = s.position(sc.ue_height);
    let len = (z.toa - s.clock_bias) * SPEED_OF_LIGHT;
    let d = direction_vector(z.aoa_az + s.heading, z.aoa_el);
    match kind {
        LandmarkKind::Va => (len > 0.0).then(|| ue + len * d),
        LandmarkKind::Sp => {
            let w = ue - sc.bs.position;
            let den = 2.0 * (w.dot(&d) + len);
            if len <= w.norm() || den <= 0.0 {
                return None;
            }
            let t = (len * len - w.norm_squared()) / den;
            (t > 0.0 && t < len).then(|| ue + t * d)
        }
        LandmarkKind::Bs => None,
    }
}

/// Birth component of the given kind for one measurement, or `None` when the
/// measurement is not consistent with a landmark of that kind.
pub fn birth_component(
    z: &MeasVector,
    kind: LandmarkKind,
    s: &UeState,
    sc: &Scenario,
    p: &BirthParams,
) -> Option<GaussianComponent> {
    let geom = sc.geometry();
    let zv = z.to_vector();
    let w: Matrix5<f64> = sc.meas_noise.covariance().try_inverse()?;
    let height_info = match kind {
        LandmarkKind::Va => 1.0 / (p.va_height_std * p.va_height_std),
        _ => 0.0,
    };
    let mut x = invert(z, kind, s, sc)?;
    if kind == LandmarkKind::Va {
        x.z = sc.bs.position.z;
    }
    let mut info = Matrix3::zeros();
    let mut chi2 = f64::INFINITY;
    for it in 0..=GN_ITERATIONS {
        let (zhat, jac) = predict_with_jacobian(&x, kind, s, &geom).ok()?;
        let r: Vector5<f64> = innovation(&zv, &zhat);
        let h = jac.landmark;
        let dz = sc.bs.position.z - x.z;
        chi2 = (r.transpose() * w * r)[0] + height_info * dz * dz;
        info = h.transpose() * w * h;
        info[(2, 2)] += height_info;
        if it == GN_ITERATIONS {
            break;
        }
        let mut grad = h.transpose() * w * r;
        grad.z += height_info * dz;
        let step = info.cholesky()?.solve(&grad);
        x += step;
        if step.norm() < 1e-9 {
            let (zhat, _) = predict_with_jacobian(&x, kind, s, &geom).ok()?;
            let r = innovation(&zv, &zhat);
            let dz = sc.bs.position.z - x.z;
            chi2 = (r.transpose() * w * r)[0] + height_info * dz * dz;
            break;
        }
    }
    if !(chi2 <= p.fit_gate) || detection_probability_at(&x, kind, s, sc) <= 0.0 {
        return None;
    }
    let cov = info.cholesky()?.inverse() * p.spread;
    Some(GaussianComponent {
        weight: p.weight,
        mean: x,
        cov: 0.5 * (cov + cov.transpose()),
        kind,
    })
}

/// Birth components for every measurement in `z` for which `explained`
/// returns false, one per consistent landmark kind.
pub fn births(
    z: &[MeasVector],
    explained: impl Fn(usize) -> bool,
    s: &UeState,
    sc: &Scenario,
    p: &BirthParams,
) -> Vec<(usize, GaussianComponent)> {
    let mut out = Vec::new();
    for (j, m) in z.iter().enumerate() {
        if explained(j) {
            continue;
        }
        for kind in [LandmarkKind::Va, LandmarkKind::Sp] {
            if let Some(c) = birth_component(m, kind, s, sc, p) {
                out.push((j, c));
            }
        }
    }
    out
}
