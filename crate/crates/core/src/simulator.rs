//! Seeded ground-truth generation: trajectory, detections and clutter.

use std::f64::consts::PI;

use nalgebra::{Matrix5, Vector5};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::model::{
    detection_probability, predict_raw, Landmark, MeasVector, MeasurementSet, Scenario, UeState,
    SPEED_OF_LIGHT,
};
use crate::motion::{propagate_mean, sample_transition, ControlInput, MotionNoise};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub control: ControlInput,
    pub motion_noise: MotionNoise,
    pub n_steps: usize,
    pub seed: u64,
    pub initial_state: UeState,
    pub noisy_trajectory: bool,
}

/// Where a simulated measurement came from. Diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Index into `[bs, landmarks...]`, so 0 is the line-of-sight path.
    Landmark(usize),
    Clutter,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Landmark(i) => write!(f, "{i}"),
            Origin::Clutter => write!(f, "CLUTTER"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub states: Vec<UeState>,
    pub measurement_sets: Vec<MeasurementSet>,
    pub origin_labels: Vec<Vec<Origin>>,
}

/// States `s_0 .. s_{n-1}`, starting at the initial state.
pub fn generate_trajectory(cfg: &SimConfig) -> Vec<UeState> {
    let mut rng = stream_rng(cfg.seed, Stream::Trajectory, 0);
    let mut states = Vec::with_capacity(cfg.n_steps);
    let mut s = cfg.initial_state;
    for k in 0..cfg.n_steps {
        if k > 0 {
            s = if cfg.noisy_trajectory {
                sample_transition(&s, &cfg.control, &cfg.motion_noise, &mut rng)
            } else {
                propagate_mean(&s, &cfg.control, cfg.motion_noise.interval())
            };
        }
        states.push(s);
    }
    states
}

/// Square root of the measurement covariance used to draw noise.
fn noise_root(sc: &Scenario) -> Matrix5<f64> {
    sc.meas_noise
        .covariance()
        .cholesky()
        .expect("measurement noise validated as positive definite")
        .l()
}

/// One landmark-major pass over all landmarks plus clutter, returned shuffled.
pub fn generate_measurements<R: Rng + ?Sized>(
    s: &UeState,
    sc: &Scenario,
    rng: &mut R,
) -> (MeasurementSet, Vec<Origin>) {
    let geom = sc.geometry();
    let root = noise_root(sc);
    let mut out: Vec<(MeasVector, Origin)> = Vec::new();
    let all: Vec<&Landmark> = std::iter::once(&sc.bs).chain(sc.landmarks.iter()).collect();
    for (i, lm) in all.into_iter().enumerate() {
        let pd = detection_probability(lm, s, sc);
        // the uniform draw is taken for every landmark so streams stay aligned
        let u: f64 = rng.gen();
        let e = Vector5::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if u >= pd {
            continue;
        }
        let Ok(h) = predict_raw(&lm.position, lm.kind, s, &geom) else {
            continue;
        };
        out.push((MeasVector::from_vector(&(h + root * e)), Origin::Landmark(i)));
    }
    if sc.clutter_mean > 0.0 {
        let n = Poisson::new(sc.clutter_mean)
            .map(|p| p.sample(rng) as usize)
            .unwrap_or(0);
        let toa_extent = sc.max_range / SPEED_OF_LIGHT;
        for _ in 0..n {
            let z = MeasVector {
                toa: sc.clutter_toa_offset + rng.gen::<f64>() * toa_extent,
                aoa_az: PI - rng.gen::<f64>() * 2.0 * PI,
                aoa_el: (rng.gen::<f64>() - 0.5) * PI,
                aod_az: PI - rng.gen::<f64>() * 2.0 * PI,
                aod_el: (rng.gen::<f64>() - 0.5) * PI,
            };
            out.push((z, Origin::Clutter));
        }
    }
    out.shuffle(rng);
    out.into_iter().unzip()
}

pub fn simulate(cfg: &SimConfig) -> GroundTruth {
    let states = generate_trajectory(cfg);
    let mut measurement_sets = Vec::with_capacity(states.len());
    let mut origin_labels = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let mut rng: ChaCha8Rng = stream_rng(cfg.seed, Stream::Measurements, k as u64);
        let (z, o) = generate_measurements(s, &cfg.scenario, &mut rng);
        measurement_sets.push(z);
        origin_labels.push(o);
    }
    GroundTruth {
        states,
        measurement_sets,
        origin_labels,
    }
}
