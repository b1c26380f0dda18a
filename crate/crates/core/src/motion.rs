//! Coordinated-turn motion with a random-walk clock bias.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{wrap_angle, UeState};

/// Below this turn rate the straight-line limit of the turn model is used.
pub const STRAIGHT_LINE_TURN_RATE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("sampling interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("process noise covariance is not symmetric positive semidefinite")]
    NotPsd,
    #[error("process noise covariance is singular")]
    Singular,
    #[error("invalid control input: {0}")]
    InvalidControl(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    /// Speed in m/s.
    pub speed: f64,
    /// Turn rate in rad/s.
    pub turn_rate: f64,
}

impl ControlInput {
    pub fn new(speed: f64, turn_rate: f64) -> Result<Self, MotionError> {
        if !(speed >= 0.0) || !speed.is_finite() || !turn_rate.is_finite() {
            return Err(MotionError::InvalidControl(format!(
                "speed {speed}, turn rate {turn_rate}"
            )));
        }
        Ok(Self { speed, turn_rate })
    }
}

/// Process noise `Q` over `[x, y, heading, clock_bias]` and the sampling interval.
#[derive(Debug, Clone)]
pub struct MotionNoise {
    covariance: Matrix4<f64>,
    interval: f64,
    /// Lower-triangular square root used for sampling; PSD matrices get an
    /// eigen-decomposition based root.
    sqrt: Matrix4<f64>,
    /// `None` when `Q` is singular.
    chol: Option<Cholesky<f64, nalgebra::U4>>,
}

impl MotionNoise {
    pub fn new(covariance: Matrix4<f64>, interval: f64) -> Result<Self, MotionError> {
        if !(interval > 0.0) || !interval.is_finite() {
            return Err(MotionError::NonPositiveInterval(interval));
        }
        let scale = covariance.abs().max();
        if (covariance - covariance.transpose()).abs().max() > 1e-12 * scale.max(f64::MIN_POSITIVE)
        {
            return Err(MotionError::NotPsd);
        }
        let chol = covariance.cholesky();
        let sqrt = match &chol {
            Some(c) => c.l(),
            None => {
                let eig = covariance.symmetric_eigen();
                if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
                    return Err(MotionError::NotPsd);
                }
                let d = Matrix4::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
                eig.eigenvectors * d
            }
        };
        Ok(Self {
            covariance,
            interval,
            sqrt,
            chol,
        })
    }

    pub fn from_std(std: [f64; 4], interval: f64) -> Result<Self, MotionError> {
        Self::new(
            Matrix4::from_diagonal(&Vector4::from(std).map(|s| s * s)),
            interval,
        )
    }

    pub fn covariance(&self) -> &Matrix4<f64> {
        &self.covariance
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }
}

/// Deterministic part of the transition.
pub fn propagate_mean(s: &UeState, u: &ControlInput, interval: f64) -> UeState {
    let w = u.turn_rate;
    let half = 0.5 * w * interval;
    // chord length 2 v sin(w T / 2) / w, with its analytic limit v T at w = 0
    let chord = if w.abs() < STRAIGHT_LINE_TURN_RATE {
        u.speed * interval
    } else {
        2.0 * u.speed / w * half.sin()
    };
    let dir = s.heading + half;
    UeState::new(
        s.x + chord * dir.cos(),
        s.y + chord * dir.sin(),
        s.heading + w * interval,
        s.clock_bias,
    )
}

/// Draws the next state from the Gaussian transition density.
pub fn sample_transition<R: Rng + ?Sized>(
    s: &UeState,
    u: &ControlInput,
    noise: &MotionNoise,
    rng: &mut R,
) -> UeState {
    perturb(&propagate_mean(s, u, noise.interval), noise, rng)
}

/// Adds one zero-mean Gaussian draw with covariance `noise` to `mean`.
pub fn perturb<R: Rng + ?Sized>(mean: &UeState, noise: &MotionNoise, rng: &mut R) -> UeState {
    let e = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let d = noise.sqrt * e;
    UeState::new(
        mean.x + d[0],
        mean.y + d[1],
        mean.heading + d[2],
        mean.clock_bias + d[3],
    )
}

/// Residual `next - mean` with the heading wrapped.
pub fn state_residual(next: &UeState, mean: &UeState) -> Vector4<f64> {
    Vector4::new(
        next.x - mean.x,
        next.y - mean.y,
        wrap_angle(next.heading - mean.heading),
        next.clock_bias - mean.clock_bias,
    )
}

/// Log-density of `next` under the transition from `prev`.
pub fn transition_logpdf(
    next: &UeState,
    prev: &UeState,
    u: &ControlInput,
    noise: &MotionNoise,
) -> Result<f64, MotionError> {
    let chol = noise.chol.as_ref().ok_or(MotionError::Singular)?;
    let r = state_residual(next, &propagate_mean(prev, u, noise.interval));
    let l = chol.l();
    let y = l.solve_lower_triangular(&r).ok_or(MotionError::Singular)?;
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (4.0 * (2.0 * PI).ln() + log_det + y.norm_squared()))
}
