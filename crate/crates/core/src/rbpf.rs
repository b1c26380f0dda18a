//! Rao-Blackwellized particle filter: sampled UE states, each carrying its
//! own map density.

use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::log_sum_exp;
use crate::gm_phd::{self, PhdMap, PhdParams};
use crate::model::{Landmark, MeasVector, Scenario, UeState};
use crate::motion::{perturb, sample_transition, ControlInput, MotionNoise};
use crate::pmbm::{self, PmbmMap, PmbmParams};
use crate::rng::{item_rng, stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RbpfError {
    #[error("particle count must be at least 1")]
    NoParticles,
}

/// A map density that can be filtered along one trajectory.
pub trait MapFilter: Clone + Send + Sync {
    type Params: Sync;
    fn initial(sc: &Scenario) -> Self;
    /// One full update at UE state `s`; returns the posterior and the
    /// measurement log-likelihood used as the particle weight factor.
    fn step(&self, z: &[MeasVector], s: &UeState, sc: &Scenario, p: &Self::Params) -> (Self, f64);
    fn landmarks(&self, p: &Self::Params) -> Vec<(Landmark, f64)>;
}

impl MapFilter for PhdMap {
    type Params = PhdParams;

    fn initial(_: &Scenario) -> Self {
        PhdMap::default()
    }

    fn step(&self, z: &[MeasVector], s: &UeState, sc: &Scenario, p: &PhdParams) -> (Self, f64) {
        PhdMap::step(self, z, s, sc, p)
    }

    fn landmarks(&self, p: &PhdParams) -> Vec<(Landmark, f64)> {
        gm_phd::extract_map(self, p.extract_threshold)
    }
}

impl MapFilter for PmbmMap {
    type Params = PmbmParams;

    fn initial(sc: &Scenario) -> Self {
        PmbmMap::with_known(&[sc.bs])
    }

    fn step(&self, z: &[MeasVector], s: &UeState, sc: &Scenario, p: &PmbmParams) -> (Self, f64) {
        PmbmMap::step(self, z, s, sc, p)
    }

    fn landmarks(&self, p: &PmbmParams) -> Vec<(Landmark, f64)> {
        pmbm::extract_map(self, p.extract_threshold)
    }
}

#[derive(Debug, Clone)]
pub struct Particle<M> {
    pub state: UeState,
    /// Shared after resampling; every update produces a fresh map.
    pub map: Arc<M>,
    pub log_weight: f64,
}

#[derive(Debug, Clone)]
pub struct ParticleSet<M> {
    pub particles: Vec<Particle<M>>,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbpfParams {
    pub particles: usize,
    /// Resample only when the ESS falls below this fraction of N. The
    /// default of 1 resamples at every step.
    pub resample_ess_fraction: f64,
}

impl Default for RbpfParams {
    fn default() -> Self {
        Self {
            particles: 2000,
            resample_ess_fraction: 1.0,
        }
    }
}

/// Diagnostics of one filter step, taken before resampling.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub ess: f64,
    pub state: UeState,
    pub state_cov: Matrix4<f64>,
    /// Map of the highest-weight particle.
    pub map: Vec<(Landmark, f64)>,
    pub diverged: bool,
}

/// N draws from `N(prior_mean, prior_cov)` with uniform weights and the
/// initial map.
pub fn init<M: MapFilter>(
    prior_mean: &UeState,
    prior_cov: &MotionNoise,
    n: usize,
    map: M,
    seed: u64,
) -> Result<ParticleSet<M>, RbpfError> {
    if n == 0 {
        return Err(RbpfError::NoParticles);
    }
    let map = Arc::new(map);
    let lw = -(n as f64).ln();
    let particles = (0..n)
        .map(|i| Particle {
            state: perturb(prior_mean, prior_cov, &mut item_rng(seed, Stream::ParticleInit, 0, i as u64)),
            map: Arc::clone(&map),
            log_weight: lw,
        })
        .collect();
    Ok(ParticleSet {
        particles,
        normalized: true,
    })
}

/// Normalized weights; a set whose weights are all zero is reset to uniform
/// and reported as diverged.
pub fn normalize<M>(ps: &mut ParticleSet<M>) -> bool {
    let total = log_sum_exp(ps.particles.iter().map(|p| p.log_weight));
    let diverged = !total.is_finite();
    if diverged {
        log::warn!("all particle weights vanished; resetting to uniform");
        let lw = -(ps.particles.len() as f64).ln();
        for p in ps.particles.iter_mut() {
            p.log_weight = lw;
        }
    } else {
        for p in ps.particles.iter_mut() {
            p.log_weight -= total;
        }
    }
    ps.normalized = true;
    diverged
}

/// Effective sample size `1 / sum w^2` of a normalized set.
pub fn ess<M>(ps: &ParticleSet<M>) -> f64 {
    1.0 / ps
        .particles
        .iter()
        .map(|p| (2.0 * p.log_weight).exp())
        .sum::<f64>()
}

/// Weighted mean and covariance; the heading uses the circular mean.
pub fn estimate_state<M>(ps: &ParticleSet<M>) -> (UeState, Matrix4<f64>) {
    let w: Vec<f64> = ps.particles.iter().map(|p| p.log_weight.exp()).collect();
    let total: f64 = w.iter().sum();
    let (mut x, mut y, mut sn, mut cs, mut b) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, wi) in ps.particles.iter().zip(&w) {
        x += wi * p.state.x;
        y += wi * p.state.y;
        sn += wi * p.state.heading.sin();
        cs += wi * p.state.heading.cos();
        b += wi * p.state.clock_bias;
    }
    let mean = UeState::new(x / total, y / total, sn.atan2(cs), b / total);
    let mut cov = Matrix4::zeros();
    for (p, wi) in ps.particles.iter().zip(&w) {
        let d: Vector4<f64> = crate::motion::state_residual(&p.state, &mean);
        cov += *wi * d * d.transpose();
    }
    (mean, cov / total)
}

/// Systematic resampling with one uniform offset.
pub fn systematic_resample<M, R: Rng + ?Sized>(ps: &ParticleSet<M>, rng: &mut R) -> ParticleSet<M> {
    let n = ps.particles.len();
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut i = 0;
    let lw = -(n as f64).ln();
    for k in 0..n {
        let target = u0 + k as f64 / n as f64;
        while i + 1 < n && cum + ps.particles[i].log_weight.exp() < target {
            cum += ps.particles[i].log_weight.exp();
            i += 1;
        }
        let src = &ps.particles[i];
        out.push(Particle {
            state: src.state,
            map: Arc::clone(&src.map),
            log_weight: lw,
        });
    }
    ParticleSet {
        particles: out,
        normalized: true,
    }
}

/// Propagation input of one step.
#[derive(Debug, Clone, Copy)]
pub enum Propagation<'a> {
    /// First step: particles stay at their initial draws.
    None,
    /// Sample the transition density.
    Motion(&'a ControlInput, &'a MotionNoise),
    /// Mapping mode: every particle is placed at the given state.
    Known(&'a UeState),
}

/// Sample, update maps, weight, normalize and resample. The report is taken
/// after weighting and before resampling.
pub fn step<M: MapFilter>(
    ps: &ParticleSet<M>,
    z: &[MeasVector],
    prop: Propagation<'_>,
    sc: &Scenario,
    params: &M::Params,
    rbpf: &RbpfParams,
    seed: u64,
    k: usize,
) -> (ParticleSet<M>, StepReport) {
    let particles: Vec<Particle<M>> = ps
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let state = match prop {
                Propagation::None => p.state,
                Propagation::Known(s) => *s,
                Propagation::Motion(u, q) => {
                    sample_transition(&p.state, u, q, &mut item_rng(seed, Stream::ParticleMotion, k as u64, i as u64))
                }
            };
            let (map, ll) = p.map.step(z, &state, sc, params);
            Particle {
                state,
                map: Arc::new(map),
                log_weight: p.log_weight + ll,
            }
        })
        .collect();
    let mut next = ParticleSet {
        particles,
        normalized: false,
    };
    let diverged = normalize(&mut next);
    let ess_now = ess(&next);
    let (state, state_cov) = estimate_state(&next);
    let best = next
        .particles
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.log_weight.total_cmp(&b.1.log_weight).then(b.0.cmp(&a.0)))
        .map(|(_, p)| p.map.landmarks(params))
        .unwrap_or_default();
    let report = StepReport {
        ess: ess_now,
        state,
        state_cov,
        map: best,
        diverged,
    };
    let n = next.particles.len() as f64;
    if ess_now < rbpf.resample_ess_fraction * n || rbpf.resample_ess_fraction >= 1.0 {
        next = systematic_resample(&next, &mut stream_rng(seed, Stream::Resampling, k as u64));
    }
    (next, report)
}
