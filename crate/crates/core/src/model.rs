//! Domain types and the geometric measurement model.
//!
//! A landmark is either the known base station (line-of-sight path), a
//! virtual anchor (mirror image of the base station across a planar
//! reflector) or a scatter point. Each one maps, together with the UE state,
//! to a noiseless channel-parameter vector `[toa, aoa_az, aoa_el, aod_az, aod_el]`.
//!
//! Conventions:
//! * the AOD is the departure direction at the base station, in the global frame;
//! * the AOA is the direction from the UE towards the last interaction point
//!   (BS, reflection point or scatterer), expressed in the UE frame, which is
//!   the global frame rotated by the heading about the vertical axis.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix5, Matrix5x3, Matrix5x4, RowVector3, Vector3, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Dimension of a channel-parameter measurement.
pub const MEAS_DIM: usize = 5;

const MIN_RANGE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("virtual anchor coincides with the base station")]
    DegenerateVirtualAnchor,
    #[error("UE is behind the reflector of the virtual anchor")]
    BehindReflector,
    #[error("zero-length propagation segment")]
    ZeroRange,
    #[error("direction is vertical, azimuth undefined")]
    VerticalDirection,
    #[error("invalid measurement noise: {0}")]
    InvalidNoise(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// UE state: planar position, heading and clock bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, kept in `(-pi, pi]`.
    pub heading: f64,
    /// Clock bias in seconds.
    pub clock_bias: f64,
}

impl UeState {
    pub fn new(x: f64, y: f64, heading: f64, clock_bias: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            clock_bias,
        }
    }

    pub fn position(&self, height: f64) -> Vector3<f64> {
        Vector3::new(self.x, self.y, height)
    }

    pub fn to_vector(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.x, self.y, self.heading, self.clock_bias)
    }

    pub fn from_vector(v: &nalgebra::Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.heading.is_finite()
            && self.clock_bias.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LandmarkKind {
    Bs,
    Va,
    Sp,
}

impl LandmarkKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LandmarkKind::Bs => "BS",
            LandmarkKind::Va => "VA",
            LandmarkKind::Sp => "SP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub kind: LandmarkKind,
}

impl Landmark {
    pub fn new(position: Vector3<f64>, kind: LandmarkKind) -> Self {
        Self { position, kind }
    }
}

/// Noiseless or measured channel parameters of one propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasVector {
    pub toa: f64,
    pub aoa_az: f64,
    pub aoa_el: f64,
    pub aod_az: f64,
    pub aod_el: f64,
}

impl MeasVector {
    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(self.toa, self.aoa_az, self.aoa_el, self.aod_az, self.aod_el)
    }

    /// Builds a measurement from a raw vector, wrapping azimuths and clamping
    /// elevations into their domains.
    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self {
            toa: v[0],
            aoa_az: wrap_angle(v[1]),
            aoa_el: v[2].clamp(-PI / 2.0, PI / 2.0),
            aod_az: wrap_angle(v[3]),
            aod_el: v[4].clamp(-PI / 2.0, PI / 2.0),
        }
    }
}

/// Unordered batch of measurements received at one time step.
pub type MeasurementSet = Vec<MeasVector>;

/// Innovation `z - zhat` with azimuth entries wrapped into `(-pi, pi]`.
pub fn innovation(z: &Vector5<f64>, zhat: &Vector5<f64>) -> Vector5<f64> {
    let mut r = z - zhat;
    r[1] = wrap_angle(r[1]);
    r[3] = wrap_angle(r[3]);
    r
}

/// Measurement noise covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasNoise {
    covariance: Matrix5<f64>,
}

impl MeasNoise {
    pub fn new(covariance: Matrix5<f64>) -> Result<Self, ModelError> {
        let asym = (covariance - covariance.transpose()).abs().max();
        if asym > 1e-12 * covariance.abs().max() {
            return Err(ModelError::InvalidNoise("covariance is not symmetric".into()));
        }
        if covariance.cholesky().is_none() {
            return Err(ModelError::InvalidNoise(
                "covariance is not positive definite".into(),
            ));
        }
        Ok(Self { covariance })
    }

    /// Diagonal noise from per-component standard deviations.
    pub fn from_std(toa_std: f64, angle_std: f64) -> Result<Self, ModelError> {
        let a = angle_std * angle_std;
        Self::new(Matrix5::from_diagonal(&Vector5::new(
            toa_std * toa_std,
            a,
            a,
            a,
            a,
        )))
    }

    pub fn covariance(&self) -> &Matrix5<f64> {
        &self.covariance
    }
}

/// Fixed geometry shared by every measurement prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub bs_position: Vector3<f64>,
    pub ue_height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub bs: Landmark,
    pub landmarks: Vec<Landmark>,
    pub ue_height: f64,
    pub fov_radius_sp: f64,
    pub p_detect: f64,
    pub clutter_mean: f64,
    /// Maximum sensing range in meters; sets the delay extent of the clutter support.
    pub max_range: f64,
    /// Lower edge of the clutter delay support, in seconds.
    pub clutter_toa_offset: f64,
    pub meas_noise: MeasNoise,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.bs.kind != LandmarkKind::Bs {
            return Err(ModelError::InvalidScenario("bs must have kind BS".into()));
        }
        if self.landmarks.iter().any(|l| l.kind == LandmarkKind::Bs) {
            return Err(ModelError::InvalidScenario(
                "exactly one BS is allowed; landmarks must be VA or SP".into(),
            ));
        }
        if !(self.fov_radius_sp > 0.0) {
            return Err(ModelError::InvalidScenario("fov_radius_sp must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.p_detect) {
            return Err(ModelError::InvalidScenario("p_detect must lie in [0, 1]".into()));
        }
        if !(self.clutter_mean >= 0.0) || !self.clutter_mean.is_finite() {
            return Err(ModelError::InvalidScenario("clutter_mean must be >= 0".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(ModelError::InvalidScenario("max_range must be > 0".into()));
        }
        for lm in &self.landmarks {
            if !lm.position.iter().all(|v| v.is_finite()) {
                return Err(ModelError::InvalidScenario("non-finite landmark position".into()));
            }
            if lm.kind == LandmarkKind::Va
                && (lm.position - self.bs.position).norm() < MIN_RANGE
            {
                return Err(ModelError::DegenerateVirtualAnchor);
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            bs_position: self.bs.position,
            ue_height: self.ue_height,
        }
    }

    /// Volume of the measurement space: delay extent of the sensing range
    /// times two azimuth (2 pi) and two elevation (pi) extents.
    pub fn meas_volume(&self) -> f64 {
        (self.max_range / SPEED_OF_LIGHT) * 4.0 * PI.powi(4)
    }

    /// Constant clutter intensity `c(z)`.
    pub fn clutter_intensity(&self) -> f64 {
        self.clutter_mean / self.meas_volume()
    }
}

/// Partial derivatives of the measurement function.
#[derive(Debug, Clone, Copy)]
pub struct MeasJacobian {
    /// With respect to the landmark position.
    pub landmark: Matrix5x3<f64>,
    /// With respect to the UE state `[x, y, heading, clock_bias]`.
    pub state: Matrix5x4<f64>,
}

/// Path length and arrival/departure direction vectors, with derivatives.
struct PathGeometry {
    length: f64,
    dlen_dlm: RowVector3<f64>,
    dlen_due: RowVector3<f64>,
    aoa: Vector3<f64>,
    daoa_dlm: Matrix3<f64>,
    daoa_due: Matrix3<f64>,
    aod: Vector3<f64>,
    daod_dlm: Matrix3<f64>,
    daod_due: Matrix3<f64>,
}

fn nonzero_norm(v: &Vector3<f64>) -> Result<f64, ModelError> {
    let n = v.norm();
    if n < MIN_RANGE || !n.is_finite() {
        Err(ModelError::ZeroRange)
    } else {
        Ok(n)
    }
}

fn path_geometry(
    lm: &Vector3<f64>,
    kind: LandmarkKind,
    ue: &Vector3<f64>,
    bs: &Vector3<f64>,
) -> Result<PathGeometry, ModelError> {
    let eye = Matrix3::identity();
    match kind {
        LandmarkKind::Bs => {
            let d = ue - lm;
            let len = nonzero_norm(&d)?;
            let u = d.transpose() / len;
            Ok(PathGeometry {
                length: len,
                dlen_dlm: -u,
                dlen_due: u,
                aoa: -d,
                daoa_dlm: eye,
                daoa_due: -eye,
                aod: d,
                daod_dlm: -eye,
                daod_due: eye,
            })
        }
        LandmarkKind::Va => {
            let a = lm - bs;
            let a2 = a.norm_squared();
            if a2.sqrt() < MIN_RANGE {
                return Err(ModelError::DegenerateVirtualAnchor);
            }
            // reflector plane: points equidistant from BS and VA
            let mid = 0.5 * (lm + bs);
            if (ue - mid).dot(&a) >= 0.0 {
                return Err(ModelError::BehindReflector);
            }
            let v = ue - lm;
            let len = nonzero_norm(&v)?;
            let u = v.transpose() / len;
            let av = a.dot(&v);
            // departure direction is the VA->UE direction mirrored across the reflector
            let aod = v - 2.0 * av / a2 * a;
            let daod_dlm = -eye
                - 2.0
                    * ((a * (v - a).transpose()) / a2
                        + av * (eye / a2 - 2.0 * (a * a.transpose()) / (a2 * a2)));
            let daod_due = eye - 2.0 * (a * a.transpose()) / a2;
            Ok(PathGeometry {
                length: len,
                dlen_dlm: -u,
                dlen_due: u,
                aoa: -v,
                daoa_dlm: eye,
                daoa_due: -eye,
                aod,
                daod_dlm,
                daod_due,
            })
        }
        LandmarkKind::Sp => {
            let d1 = lm - bs;
            let d2 = ue - lm;
            let n1 = nonzero_norm(&d1)?;
            let n2 = nonzero_norm(&d2)?;
            Ok(PathGeometry {
                length: n1 + n2,
                dlen_dlm: d1.transpose() / n1 - d2.transpose() / n2,
                dlen_due: d2.transpose() / n2,
                aoa: -d2,
                daoa_dlm: eye,
                daoa_due: -eye,
                aod: d1,
                daod_dlm: eye,
                daod_due: Matrix3::zeros(),
            })
        }
    }
}

/// Azimuth and elevation of a direction vector.
pub fn direction_angles(v: &Vector3<f64>) -> (f64, f64) {
    let rho = v.x.hypot(v.y);
    (v.y.atan2(v.x), v.z.atan2(rho))
}

/// Unit vector with the given azimuth and elevation.
pub fn direction_vector(az: f64, el: f64) -> Vector3<f64> {
    Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Jacobian of (azimuth, elevation) with respect to the direction vector.
fn angle_jacobian(v: &Vector3<f64>) -> Result<nalgebra::Matrix2x3<f64>, ModelError> {
    let rho2 = v.x * v.x + v.y * v.y;
    let rho = rho2.sqrt();
    let n2 = rho2 + v.z * v.z;
    if rho < MIN_RANGE * 1e-3 || n2 == 0.0 {
        return Err(ModelError::VerticalDirection);
    }
    Ok(nalgebra::Matrix2x3::new(
        -v.y / rho2,
        v.x / rho2,
        0.0,
        -v.x * v.z / (rho * n2),
        -v.y * v.z / (rho * n2),
        rho / n2,
    ))
}

/// Noiseless channel parameters `h(x, s)` of the path through `lm`.
pub fn predict_measurement(
    lm: &Landmark,
    s: &UeState,
    geom: &Geometry,
) -> Result<MeasVector, ModelError> {
    predict_raw(&lm.position, lm.kind, s, geom).map(|v| MeasVector::from_vector(&v))
}

/// Same as [`predict_measurement`] but returns the raw vector.
pub fn predict_raw(
    lm: &Vector3<f64>,
    kind: LandmarkKind,
    s: &UeState,
    geom: &Geometry,
) -> Result<Vector5<f64>, ModelError> {
    let ue = s.position(geom.ue_height);
    let p = path_geometry(lm, kind, &ue, &geom.bs_position)?;
    nonzero_norm(&p.aoa)?;
    nonzero_norm(&p.aod)?;
    let (aoa_az, aoa_el) = direction_angles(&p.aoa);
    let (aod_az, aod_el) = direction_angles(&p.aod);
    Ok(Vector5::new(
        p.length / SPEED_OF_LIGHT + s.clock_bias,
        wrap_angle(aoa_az - s.heading),
        aoa_el,
        aod_az,
        aod_el,
    ))
}

/// Predicted measurement together with its Jacobians, sharing one geometry pass.
pub fn predict_with_jacobian(
    lm: &Vector3<f64>,
    kind: LandmarkKind,
    s: &UeState,
    geom: &Geometry,
) -> Result<(Vector5<f64>, MeasJacobian), ModelError> {
    let ue = s.position(geom.ue_height);
    let p = path_geometry(lm, kind, &ue, &geom.bs_position)?;
    let ja = angle_jacobian(&p.aoa)?;
    let jd = angle_jacobian(&p.aod)?;
    let (aoa_az, aoa_el) = direction_angles(&p.aoa);
    let (aod_az, aod_el) = direction_angles(&p.aod);
    let z = Vector5::new(
        p.length / SPEED_OF_LIGHT + s.clock_bias,
        wrap_angle(aoa_az - s.heading),
        aoa_el,
        aod_az,
        aod_el,
    );

    let mut hl = Matrix5x3::zeros();
    hl.row_mut(0).copy_from(&(p.dlen_dlm / SPEED_OF_LIGHT));
    hl.fixed_view_mut::<2, 3>(1, 0).copy_from(&(ja * p.daoa_dlm));
    hl.fixed_view_mut::<2, 3>(3, 0).copy_from(&(jd * p.daod_dlm));

    let mut ue_full = Matrix5x3::zeros();
    ue_full.row_mut(0).copy_from(&(p.dlen_due / SPEED_OF_LIGHT));
    ue_full.fixed_view_mut::<2, 3>(1, 0).copy_from(&(ja * p.daoa_due));
    ue_full.fixed_view_mut::<2, 3>(3, 0).copy_from(&(jd * p.daod_due));
    let mut hs = Matrix5x4::zeros();
    // UE height is fixed; only the planar columns enter the state Jacobian
    hs.fixed_view_mut::<5, 2>(0, 0)
        .copy_from(&ue_full.fixed_view::<5, 2>(0, 0));
    hs[(1, 2)] = -1.0;
    hs[(0, 3)] = 1.0;

    Ok((
        z,
        MeasJacobian {
            landmark: hl,
            state: hs,
        },
    ))
}

/// Jacobians of `h` with respect to the landmark position and UE state.
pub fn measurement_jacobian(
    lm: &Landmark,
    s: &UeState,
    geom: &Geometry,
) -> Result<MeasJacobian, ModelError> {
    predict_with_jacobian(&lm.position, lm.kind, s, geom).map(|(_, j)| j)
}

/// Detection probability of a landmark at `position` seen from `s`.
pub fn detection_probability_at(
    position: &Vector3<f64>,
    kind: LandmarkKind,
    s: &UeState,
    sc: &Scenario,
) -> f64 {
    match kind {
        LandmarkKind::Bs | LandmarkKind::Va => sc.p_detect,
        LandmarkKind::Sp => {
            let d = (position.x - s.x).hypot(position.y - s.y);
            if d <= sc.fov_radius_sp {
                sc.p_detect
            } else {
                0.0
            }
        }
    }
}

pub fn detection_probability(lm: &Landmark, s: &UeState, sc: &Scenario) -> f64 {
    detection_probability_at(&lm.position, lm.kind, s, sc)
}

/// Reflection point of the VA path: intersection of the VA-UE segment with
/// the reflector plane.
pub fn reflection_point(
    va: &Vector3<f64>,
    ue: &Vector3<f64>,
    bs: &Vector3<f64>,
) -> Result<Vector3<f64>, ModelError> {
    let a = va - bs;
    if a.norm() < MIN_RANGE {
        return Err(ModelError::DegenerateVirtualAnchor);
    }
    let mid = 0.5 * (va + bs);
    let s_va = (va - mid).dot(&a);
    let s_ue = (ue - mid).dot(&a);
    if s_ue >= 0.0 {
        return Err(ModelError::BehindReflector);
    }
    let t = s_va / (s_va - s_ue);
    Ok(va + t * (ue - va))
}
