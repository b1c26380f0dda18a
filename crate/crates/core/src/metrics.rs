//! GOSPA map error with its decomposition, and UE state RMSE.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve_min_cost, CostMatrix};
use crate::model::{wrap_angle, Landmark, UeState, SPEED_OF_LIGHT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid GOSPA parameters: {0}")]
    InvalidParams(String),
    #[error("estimate has {est} states but the truth has {truth}")]
    LengthMismatch { est: usize, truth: usize },
    #[error("no states to compare")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GospaParams {
    /// Cutoff distance, meters.
    pub c: f64,
    pub p: f64,
    pub alpha: f64,
}

impl Default for GospaParams {
    fn default() -> Self {
        Self {
            c: 20.0,
            p: 2.0,
            alpha: 2.0,
        }
    }
}

impl GospaParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(MetricsError::InvalidParams("c must be > 0".into()));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(MetricsError::InvalidParams("p must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(MetricsError::InvalidParams("alpha must lie in (0, 2]".into()));
        }
        Ok(())
    }

    /// Penalty of one missed or false point, before the p-th root.
    pub fn unmatched_penalty(&self) -> f64 {
        self.c.powf(self.p) / self.alpha
    }
}

/// GOSPA value and its parts. `total^p = localization^p + missed^p + false_^p`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GospaResult {
    pub total: f64,
    pub localization: f64,
    pub missed: f64,
    pub false_: f64,
    pub n_missed: usize,
    pub n_false: usize,
}

/// GOSPA between point sets with a caller-supplied distance; `+inf` forbids
/// a pairing.
pub fn gospa_with(
    n_est: usize,
    n_truth: usize,
    dist: impl Fn(usize, usize) -> f64,
    params: &GospaParams,
) -> GospaResult {
    let cp = params.c.powf(params.p);
    let unmatched = params.unmatched_penalty();
    // rows are estimates; the extra columns leave an estimate unassigned
    let cols = n_truth + n_est;
    let mut data = vec![f64::INFINITY; n_est * cols];
    let mut dp = vec![f64::INFINITY; n_est * n_truth];
    for i in 0..n_est {
        for j in 0..n_truth {
            let d = dist(i, j);
            let capped = d.min(params.c).powf(params.p);
            // a pair at the cutoff costs exactly as much as leaving both
            // unassigned when alpha = 2; prefer the latter for a stable split
            if d < params.c || (d.is_finite() && cp < 2.0 * unmatched) {
                data[i * cols + j] = capped - 2.0 * unmatched;
                dp[i * n_truth + j] = capped;
            }
        }
        data[i * cols + n_truth + i] = 0.0;
    }
    let assignment = CostMatrix::new(n_est, cols, data)
        .and_then(|c| solve_min_cost(&c))
        .expect("the dummy columns keep every row feasible");
    let mut loc = 0.0;
    let mut matched = 0;
    for (i, &j) in assignment.row_to_col.iter().enumerate() {
        if j < n_truth {
            loc += dp[i * n_truth + j];
            matched += 1;
        }
    }
    let n_missed = n_truth - matched;
    let n_false = n_est - matched;
    let miss = unmatched * n_missed as f64;
    let fals = unmatched * n_false as f64;
    let inv = 1.0 / params.p;
    GospaResult {
        total: (loc + miss + fals).powf(inv),
        localization: loc.powf(inv),
        missed: miss.powf(inv),
        false_: fals.powf(inv),
        n_missed,
        n_false,
    }
}

/// GOSPA between two point sets under the Euclidean distance.
pub fn gospa(est: &[Vector3<f64>], truth: &[Vector3<f64>], params: &GospaParams) -> GospaResult {
    gospa_with(est.len(), truth.len(), |i, j| (est[i] - truth[j]).norm(), params)
}

/// GOSPA between landmark sets; landmarks of different kinds never match.
pub fn gospa_landmarks(est: &[Landmark], truth: &[Landmark], params: &GospaParams) -> GospaResult {
    gospa_with(
        est.len(),
        truth.len(),
        |i, j| {
            if est[i].kind == truth[j].kind {
                (est[i].position - truth[j].position).norm()
            } else {
                f64::INFINITY
            }
        },
        params,
    )
}

/// State components an RMSE can be taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateField {
    /// Planar position, meters.
    Position,
    /// Heading, radians, wrapped before squaring.
    Heading,
    /// Clock bias expressed as a distance, meters.
    ClockBias,
}

/// Per-state error of the selected field.
pub fn state_error(est: &UeState, truth: &UeState, field: StateField) -> f64 {
    match field {
        StateField::Position => (est.x - truth.x).hypot(est.y - truth.y),
        StateField::Heading => wrap_angle(est.heading - truth.heading).abs(),
        StateField::ClockBias => ((est.clock_bias - truth.clock_bias) * SPEED_OF_LIGHT).abs(),
    }
}

pub fn rmse(est: &[UeState], truth: &[UeState], field: StateField) -> Result<f64, MetricsError> {
    if est.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            truth: truth.len(),
        });
    }
    if est.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ss: f64 = est
        .iter()
        .zip(truth)
        .map(|(e, t)| state_error(e, t, field).powi(2))
        .sum();
    Ok((ss / est.len() as f64).sqrt())
}
