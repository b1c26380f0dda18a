//! Belief-propagation SLAM.
//!
//! The UE belief is a particle cloud; each landmark carries an existence
//! probability and a Gaussian per kind reading. Association beliefs come
//! from the usual normalized message exchange between landmark-oriented and
//! measurement-oriented association variables. Everything is computed in
//! the log domain, since detection likelihoods under tight delay noise span
//! hundreds of orders of magnitude.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Matrix5, Vector3, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::birth::{births, BirthParams};
use crate::gaussian::{log_sum_exp, GaussianComponent, Linearization};
use crate::model::{
    detection_probability_at, innovation, predict_with_jacobian, Landmark, LandmarkKind, MeasVector,
    Scenario, UeState,
};
use crate::motion::{perturb, sample_transition, MotionNoise};
use crate::pmbm::KindDensity;
use crate::rbpf::{ess, estimate_state, normalize, systematic_resample, Particle, ParticleSet, Propagation, StepReport};
use crate::rng::{item_rng, stream_rng, Stream};

/// Smallest measurement-side message denominator; keeps messages finite when
/// neither clutter nor a new landmark can explain a measurement.
const LOG_XI_FLOOR: f64 = -690.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BpError {
    #[error("the sensor belief has no particles")]
    EmptySupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpParams {
    pub sensor_particles: usize,
    pub da_iterations: usize,
    pub da_tolerance: f64,
    /// Squared Mahalanobis gate of a landmark-measurement pair, with the
    /// sensor uncertainty included.
    pub gate: f64,
    pub r_prune: f64,
    pub max_landmarks: usize,
    pub extract_threshold: f64,
    pub birth: BirthParams,
}

impl Default for BpParams {
    fn default() -> Self {
        Self {
            sensor_particles: 2000,
            da_iterations: 20,
            da_tolerance: 1e-6,
            gate: 100.0,
            r_prune: 1e-3,
            max_landmarks: 50,
            extract_threshold: 0.5,
            birth: BirthParams::default(),
        }
    }
}

/// A potentially existing landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLandmark {
    /// `P(exists)`.
    pub r: f64,
    pub densities: Vec<KindDensity>,
    /// Known landmarks (the base station) are never updated.
    pub known: bool,
}

impl AugmentedLandmark {
    pub fn known(lm: &Landmark) -> Self {
        Self {
            r: 1.0,
            densities: vec![KindDensity {
                kind: lm.kind,
                prob: 1.0,
                mean: lm.position,
                cov: Matrix3::zeros(),
            }],
            known: true,
        }
    }

    pub fn dominant(&self) -> Option<&KindDensity> {
        self.densities.iter().max_by(|a, b| a.prob.total_cmp(&b.prob))
    }
}

/// Sensor particles (uniformly weighted) and the landmark beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct BpState {
    pub sensor: Vec<UeState>,
    pub landmarks: Vec<AugmentedLandmark>,
}

impl BpState {
    /// `n` draws from the prior; the base station is the only landmark.
    pub fn init(prior_mean: &UeState, prior: &MotionNoise, n: usize, sc: &Scenario, seed: u64) -> Result<Self, BpError> {
        if n == 0 {
            return Err(BpError::EmptySupport);
        }
        Ok(Self {
            sensor: (0..n)
                .map(|i| perturb(prior_mean, prior, &mut item_rng(seed, Stream::ParticleInit, 0, i as u64)))
                .collect(),
            landmarks: vec![AugmentedLandmark::known(&sc.bs)],
        })
    }
}

/// Messages after prediction: the sensor cloud, the (static) landmark
/// beliefs and the new-landmark intensity, keyed by measurement index.
#[derive(Debug, Clone)]
pub struct PredictedMessages {
    pub sensor: Vec<UeState>,
    pub landmarks: Vec<AugmentedLandmark>,
    pub births: Vec<(usize, GaussianComponent)>,
}

/// Weight and moments of a Gaussian mixture summarized in the log domain.
#[derive(Debug, Clone, Copy)]
struct Moments {
    log_w: f64,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
}

/// Accumulates `(log w, mean, cov)` items into one moment-matched Gaussian.
fn summarize(items: &[(f64, Vector3<f64>, Matrix3<f64>)], log_scale: f64) -> Option<Moments> {
    let lt = log_sum_exp(items.iter().map(|i| i.0));
    if lt == f64::NEG_INFINITY || lt.is_nan() {
        return None;
    }
    let mut mean = Vector3::zeros();
    for (lw, m, _) in items {
        mean += (lw - lt).exp() * m;
    }
    let mut cov = Matrix3::zeros();
    for (lw, m, p) in items {
        let d = m - mean;
        cov += (lw - lt).exp() * (p + d * d.transpose());
    }
    Some(Moments {
        log_w: lt + log_scale,
        mean,
        cov: 0.5 * (cov + cov.transpose()),
    })
}

/// Output of [`da_messages`]: particle averages of the association factors
/// plus what the measurement update needs per particle.
#[derive(Debug, Clone)]
pub struct DaMessages {
    /// `log_beta[i][0]` is the missed-detection term of landmark `i`,
    /// `log_beta[i][j + 1]` the detection term of measurement `j`.
    pub log_beta: Vec<Vec<f64>>,
    /// `ln(c + new-landmark mass)` per measurement.
    pub log_xi: Vec<f64>,
    /// Per-particle versions of the above, `[particle][i][0..=J]`.
    particle_beta: Vec<Vec<Vec<f64>>>,
    /// `[particle][j]`.
    particle_xi: Vec<Vec<f64>>,
    /// Misdetection moments per landmark and kind reading.
    miss: Vec<Vec<Option<Moments>>>,
    /// Detection moments `[i][j][kind reading]`.
    detect: Vec<Vec<Vec<Option<Moments>>>>,
    /// New-landmark moments `[j]` grouped by kind, with `ln` of the mass.
    fresh: Vec<Vec<(LandmarkKind, Moments)>>,
    log_new_mass: Vec<f64>,
}

/// Sensor message: the prior cloud pushed through the motion model.
/// Landmarks are static, and the birth intensity is seeded from the
/// measurements no landmark explains at the mean predicted pose.
pub fn predict_messages(
    state: &BpState,
    z: &[MeasVector],
    prop: Propagation<'_>,
    sc: &Scenario,
    p: &BpParams,
    seed: u64,
    k: usize,
) -> PredictedMessages {
    let sensor: Vec<UeState> = state
        .sensor
        .par_iter()
        .enumerate()
        .map(|(i, s)| match prop {
            Propagation::None => *s,
            Propagation::Known(t) => *t,
            Propagation::Motion(u, q) => {
                sample_transition(s, u, q, &mut item_rng(seed, Stream::ParticleMotion, k as u64, i as u64))
            }
        })
        .collect();
    let (mean, cov) = cloud_moments(&sensor);
    let explained: Vec<bool> = z
        .iter()
        .map(|m| {
            state
                .landmarks
                .iter()
                .flat_map(|l| &l.densities)
                .any(|d| gate_distance(d, m, &mean, &cov, sc) <= p.birth.gate)
        })
        .collect();
    let births = births(z, |j| explained[j], &mean, sc, &p.birth);
    PredictedMessages {
        sensor,
        landmarks: state.landmarks.clone(),
        births,
    }
}

fn cloud_moments(sensor: &[UeState]) -> (UeState, Matrix4<f64>) {
    let lw = -(sensor.len() as f64).ln();
    let ps = ParticleSet {
        particles: sensor
            .iter()
            .map(|s| Particle {
                state: *s,
                map: Arc::new(()),
                log_weight: lw,
            })
            .collect(),
        normalized: true,
    };
    estimate_state(&ps)
}

/// Squared Mahalanobis distance of `z` from a kind reading, with landmark
/// and sensor uncertainty projected into measurement space.
fn gate_distance(d: &KindDensity, z: &MeasVector, s: &UeState, s_cov: &Matrix4<f64>, sc: &Scenario) -> f64 {
    let Ok((zhat, jac)) = predict_with_jacobian(&d.mean, d.kind, s, &sc.geometry()) else {
        return f64::INFINITY;
    };
    let cov: Matrix5<f64> = jac.landmark * d.cov * jac.landmark.transpose()
        + jac.state * s_cov * jac.state.transpose()
        + sc.meas_noise.covariance();
    let r: Vector5<f64> = innovation(&z.to_vector(), &zhat);
    cov.cholesky()
        .map_or(f64::INFINITY, |c| (r.transpose() * c.solve(&r))[0])
}

/// One particle's association factors.
struct ParticleTerms {
    beta: Vec<Vec<f64>>,
    xi: Vec<f64>,
    /// `ln(r prob (1 - p_D))` per landmark and kind reading.
    miss: Vec<Vec<f64>>,
    /// `(ln weight, posterior mean, posterior cov)` per `[i][j][kind]`.
    detect: Vec<Vec<Vec<Option<(f64, Vector3<f64>, Matrix3<f64>)>>>>,
    /// Per measurement: per birth component.
    fresh: Vec<Vec<(f64, LandmarkKind, Vector3<f64>, Matrix3<f64>)>>,
}

fn particle_terms(
    s: &UeState,
    pm: &PredictedMessages,
    gated: &[Vec<bool>],
    z: &[Vector5<f64>],
    sc: &Scenario,
) -> ParticleTerms {
    let geom = sc.geometry();
    let log_c = sc.clutter_intensity().ln();
    let nj = z.len();
    let mut beta = Vec::with_capacity(pm.landmarks.len());
    let mut miss = Vec::with_capacity(pm.landmarks.len());
    let mut detect = Vec::with_capacity(pm.landmarks.len());
    for (i, l) in pm.landmarks.iter().enumerate() {
        let mut row = vec![f64::NEG_INFINITY; nj + 1];
        let mut lmiss = Vec::with_capacity(l.densities.len());
        let mut q = 0.0;
        let lins: Vec<Option<(f64, Linearization)>> = l
            .densities
            .iter()
            .map(|d| {
                let pd = detection_probability_at(&d.mean, d.kind, s, sc);
                q += d.prob * (1.0 - pd);
                lmiss.push((l.r * d.prob * (1.0 - pd)).ln());
                if pd <= 0.0 || d.prob <= 0.0 || l.r <= 0.0 || !gated[i].iter().any(|&g| g) {
                    return None;
                }
                Linearization::new(&d.mean, &d.cov, d.kind, s, &geom, &sc.meas_noise)
                    .map(|lin| ((l.r * d.prob * pd).ln(), lin))
            })
            .collect();
        row[0] = (1.0 - l.r + l.r * q).ln();
        let mut per_j = Vec::with_capacity(nj);
        for (j, zv) in z.iter().enumerate() {
            let mut per_kind = Vec::with_capacity(l.densities.len());
            let mut logs = Vec::new();
            for (d, lin) in l.densities.iter().zip(&lins) {
                match (gated[i][j], lin) {
                    (true, Some((lw, lin))) => {
                        let v = lw + lin.log_likelihood(zv);
                        let (m, p) = lin.posterior(&d.mean, &d.cov, zv);
                        logs.push(v);
                        per_kind.push(Some((v, m, p)));
                    }
                    _ => per_kind.push(None),
                }
            }
            row[j + 1] = log_sum_exp(logs);
            per_j.push(per_kind);
        }
        beta.push(row);
        miss.push(lmiss);
        detect.push(per_j);
    }
    let mut fresh: Vec<Vec<(f64, LandmarkKind, Vector3<f64>, Matrix3<f64>)>> = vec![Vec::new(); nj];
    for (j, c) in &pm.births {
        let pd = detection_probability_at(&c.mean, c.kind, s, sc);
        if pd <= 0.0 || c.weight <= 0.0 {
            continue;
        }
        let Some(lin) = Linearization::new(&c.mean, &c.cov, c.kind, s, &geom, &sc.meas_noise) else {
            continue;
        };
        let v = (c.weight * pd).ln() + lin.log_likelihood(&z[*j]);
        let (m, p) = lin.posterior(&c.mean, &c.cov, &z[*j]);
        fresh[*j].push((v, c.kind, m, p));
    }
    let xi = fresh
        .iter()
        .map(|f| log_sum_exp(std::iter::once(log_c).chain(f.iter().map(|t| t.0))).max(LOG_XI_FLOOR))
        .collect();
    ParticleTerms {
        beta,
        xi,
        miss,
        detect,
        fresh,
    }
}

/// Monte-Carlo evaluation of the association factors over the sensor cloud.
pub fn da_messages(pm: &PredictedMessages, z: &[MeasVector], sc: &Scenario, p: &BpParams) -> Result<DaMessages, BpError> {
    if pm.sensor.is_empty() {
        return Err(BpError::EmptySupport);
    }
    let n = pm.sensor.len();
    let log_n = (n as f64).ln();
    let zv: Vec<Vector5<f64>> = z.iter().map(|m| m.to_vector()).collect();
    let (mean, cov) = cloud_moments(&pm.sensor);
    let gated: Vec<Vec<bool>> = pm
        .landmarks
        .iter()
        .map(|l| {
            z.iter()
                .map(|m| l.densities.iter().any(|d| gate_distance(d, m, &mean, &cov, sc) <= p.gate))
                .collect()
        })
        .collect();
    let terms: Vec<ParticleTerms> = pm
        .sensor
        .par_iter()
        .map(|s| particle_terms(s, pm, &gated, &zv, sc))
        .collect();
    let nl = pm.landmarks.len();
    let nj = z.len();
    let avg = |f: &dyn Fn(&ParticleTerms) -> f64| log_sum_exp(terms.iter().map(f)) - log_n;
    let log_beta = (0..nl)
        .map(|i| (0..=nj).map(|j| avg(&|t| t.beta[i][j])).collect())
        .collect();
    let log_c = sc.clutter_intensity().ln();
    let mut fresh = Vec::with_capacity(nj);
    let mut log_new_mass = Vec::with_capacity(nj);
    for j in 0..nj {
        let mut groups = Vec::new();
        for kind in [LandmarkKind::Va, LandmarkKind::Sp] {
            let items: Vec<(f64, Vector3<f64>, Matrix3<f64>)> = terms
                .iter()
                .flat_map(|t| t.fresh[j].iter().filter(|f| f.1 == kind).map(|f| (f.0, f.2, f.3)))
                .collect();
            if let Some(m) = summarize(&items, -log_n) {
                groups.push((kind, m));
            }
        }
        log_new_mass.push(log_sum_exp(groups.iter().map(|g| g.1.log_w)));
        fresh.push(groups);
    }
    let log_xi = log_new_mass
        .iter()
        .map(|m| log_sum_exp([log_c, *m]).max(LOG_XI_FLOOR))
        .collect();
    let miss = pm
        .landmarks
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (0..l.densities.len())
                .map(|m| {
                    let d = &l.densities[m];
                    let lw = avg(&|t| t.miss[i][m]);
                    (lw > f64::NEG_INFINITY).then_some(Moments {
                        log_w: lw,
                        mean: d.mean,
                        cov: d.cov,
                    })
                })
                .collect()
        })
        .collect();
    let detect = (0..nl)
        .map(|i| {
            (0..nj)
                .map(|j| {
                    (0..pm.landmarks[i].densities.len())
                        .map(|m| {
                            let items: Vec<_> = terms.iter().filter_map(|t| t.detect[i][j][m]).collect();
                            summarize(&items, -log_n)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(DaMessages {
        log_beta,
        log_xi,
        particle_beta: terms.iter().map(|t| t.beta.clone()).collect(),
        particle_xi: terms.iter().map(|t| t.xi.clone()).collect(),
        miss,
        detect,
        fresh,
        log_new_mass,
    })
}

/// Association beliefs and the converged messages.
#[derive(Debug, Clone)]
pub struct AssociationBeliefs {
    /// `p_c[i][0]` missed, `p_c[i][j + 1]` landmark `i` generated measurement `j`.
    pub p_c: Vec<Vec<f64>>,
    /// `p_d[j][0]` new landmark or clutter, `p_d[j][i + 1]` landmark `i`.
    pub p_d: Vec<Vec<f64>>,
    /// Log messages measurement `j` -> landmark `i`, `[i][j]`.
    pub log_mu: Vec<Vec<f64>>,
    /// Log messages landmark `i` -> measurement `j`, `[i][j]`.
    pub log_nu: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn normalized(logs: &[f64]) -> Vec<f64> {
    let t = log_sum_exp(logs.iter().copied());
    if t == f64::NEG_INFINITY {
        let mut v = vec![0.0; logs.len()];
        v[0] = 1.0;
        return v;
    }
    logs.iter().map(|l| (l - t).exp()).collect()
}

/// Iterative c/d message exchange, stopped after `iters` rounds or when no
/// association probability moves by more than `tol`.
pub fn loopy_da(log_beta: &[Vec<f64>], log_xi: &[f64], iters: usize, tol: f64) -> AssociationBeliefs {
    let ni = log_beta.len();
    let nj = log_xi.len();
    let mut log_mu = vec![vec![0.0; nj]; ni];
    let mut log_nu = vec![vec![f64::NEG_INFINITY; nj]; ni];
    let marginals = |log_mu: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..ni)
            .map(|i| {
                let logs: Vec<f64> = std::iter::once(log_beta[i][0])
                    .chain((0..nj).map(|j| log_beta[i][j + 1] + log_mu[i][j]))
                    .collect();
                normalized(&logs)
            })
            .collect()
    };
    let mut p_c = marginals(&log_mu);
    let mut iterations = 0;
    for _ in 0..iters.max(1) {
        iterations += 1;
        for i in 0..ni {
            for j in 0..nj {
                let others = std::iter::once(log_beta[i][0]).chain(
                    (0..nj)
                        .filter(|&jj| jj != j)
                        .map(|jj| log_beta[i][jj + 1] + log_mu[i][jj]),
                );
                let den = log_sum_exp(others.collect::<Vec<_>>());
                log_nu[i][j] = log_beta[i][j + 1] - den;
            }
        }
        for j in 0..nj {
            for i in 0..ni {
                let others = std::iter::once(log_xi[j]).chain((0..ni).filter(|&ii| ii != i).map(|ii| log_nu[ii][j]));
                log_mu[i][j] = -log_sum_exp(others.collect::<Vec<_>>());
            }
        }
        let next = marginals(&log_mu);
        let delta = next
            .iter()
            .flatten()
            .zip(p_c.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        p_c = next;
        if delta < tol {
            break;
        }
    }
    let p_d = (0..nj)
        .map(|j| {
            let logs: Vec<f64> = std::iter::once(log_xi[j])
                .chain((0..ni).map(|i| log_nu[i][j]))
                .collect();
            normalized(&logs)
        })
        .collect();
    AssociationBeliefs {
        p_c,
        p_d,
        log_mu,
        log_nu,
        iterations,
    }
}

/// Result of the measurement update before resampling.
#[derive(Debug, Clone)]
pub struct UpdatedBeliefs {
    /// Unnormalized log weights of the predicted sensor particles.
    pub sensor_log_weights: Vec<f64>,
    pub landmarks: Vec<AugmentedLandmark>,
}

fn densities_from(groups: Vec<(LandmarkKind, Moments)>) -> (f64, Vec<KindDensity>) {
    let total = log_sum_exp(groups.iter().map(|g| g.1.log_w));
    let densities = groups
        .into_iter()
        .map(|(kind, m)| KindDensity {
            kind,
            prob: (m.log_w - total).exp(),
            mean: m.mean,
            cov: m.cov,
        })
        .filter(|d| d.prob > 0.0)
        .collect();
    (total, densities)
}

/// Sensor reweighting, landmark and existence updates, and new landmarks.
pub fn measurement_update(
    pm: &PredictedMessages,
    da: &DaMessages,
    ab: &AssociationBeliefs,
    p: &BpParams,
) -> UpdatedBeliefs {
    let ni = pm.landmarks.len();
    let nj = da.log_xi.len();
    let sensor_log_weights = da
        .particle_beta
        .iter()
        .zip(&da.particle_xi)
        .map(|(beta, xi)| {
            let mut lw = 0.0;
            for i in 0..ni {
                let terms: Vec<f64> = std::iter::once(beta[i][0])
                    .chain((0..nj).map(|j| beta[i][j + 1] + ab.log_mu[i][j]))
                    .collect();
                lw += log_sum_exp(terms);
            }
            for j in 0..nj {
                let terms: Vec<f64> = std::iter::once(xi[j]).chain((0..ni).map(|i| ab.log_nu[i][j])).collect();
                lw += log_sum_exp(terms);
            }
            lw
        })
        .collect();
    let mut landmarks = Vec::with_capacity(ni + nj);
    for (i, l) in pm.landmarks.iter().enumerate() {
        if l.known {
            landmarks.push(l.clone());
            continue;
        }
        let mut groups: Vec<(LandmarkKind, Moments)> = Vec::new();
        for (m, d) in l.densities.iter().enumerate() {
            let mut items = Vec::new();
            if let Some(mm) = da.miss[i][m] {
                items.push((mm.log_w, mm.mean, mm.cov));
            }
            for j in 0..nj {
                if let Some(dm) = da.detect[i][j][m] {
                    items.push((dm.log_w + ab.log_mu[i][j], dm.mean, dm.cov));
                }
            }
            if let Some(s) = summarize(&items, 0.0) {
                groups.push((d.kind, s));
            }
        }
        let (log_exist, densities) = densities_from(groups);
        let log_total = log_sum_exp([(1.0 - l.r).ln(), log_exist]);
        let r = if log_exist == f64::NEG_INFINITY {
            0.0
        } else {
            (log_exist - log_total).exp()
        };
        landmarks.push(AugmentedLandmark {
            r,
            densities: if densities.is_empty() { l.densities.clone() } else { densities },
            known: false,
        });
    }
    for j in 0..nj {
        if da.fresh[j].is_empty() {
            continue;
        }
        let den = log_sum_exp(std::iter::once(da.log_xi[j]).chain((0..ni).map(|i| ab.log_nu[i][j])).collect::<Vec<_>>());
        let r = (da.log_new_mass[j] - den).exp();
        let (_, densities) = densities_from(da.fresh[j].clone());
        if r >= p.r_prune && !densities.is_empty() {
            landmarks.push(AugmentedLandmark {
                r: r.min(1.0),
                densities,
                known: false,
            });
        }
    }
    UpdatedBeliefs {
        sensor_log_weights,
        landmarks,
    }
}

/// Drops weak landmarks and keeps at most `max_landmarks` unknown ones.
fn prune(mut landmarks: Vec<AugmentedLandmark>, p: &BpParams) -> Vec<AugmentedLandmark> {
    landmarks.retain(|l| l.known || l.r >= p.r_prune);
    let (known, mut rest): (Vec<_>, Vec<_>) = landmarks.into_iter().partition(|l| l.known);
    // stable sort keeps the order deterministic among equal existences
    rest.sort_by(|a, b| b.r.total_cmp(&a.r));
    rest.truncate(p.max_landmarks);
    known.into_iter().chain(rest).collect()
}

/// Landmarks with existence at least `threshold`, at their dominant kind.
pub fn extract_map(state: &BpState, threshold: f64) -> Vec<(Landmark, f64)> {
    state
        .landmarks
        .iter()
        .filter(|l| !l.known && l.r >= threshold)
        .filter_map(|l| l.dominant().map(|d| (Landmark::new(d.mean, d.kind), l.r)))
        .collect()
}

/// One full BP-SLAM step: predict, associate, update, resample.
pub fn step(
    state: &BpState,
    z: &[MeasVector],
    prop: Propagation<'_>,
    sc: &Scenario,
    p: &BpParams,
    seed: u64,
    k: usize,
) -> Result<(BpState, StepReport), BpError> {
    let pm = predict_messages(state, z, prop, sc, p, seed, k);
    let da = da_messages(&pm, z, sc, p)?;
    let ab = loopy_da(&da.log_beta, &da.log_xi, p.da_iterations, p.da_tolerance);
    let up = measurement_update(&pm, &da, &ab, p);
    let mut ps = ParticleSet {
        particles: pm
            .sensor
            .iter()
            .zip(&up.sensor_log_weights)
            .map(|(s, lw)| Particle {
                state: *s,
                map: Arc::new(()),
                log_weight: *lw,
            })
            .collect(),
        normalized: false,
    };
    let diverged = normalize(&mut ps);
    let ess_now = ess(&ps);
    let (est, est_cov) = estimate_state(&ps);
    let resampled = systematic_resample(&ps, &mut stream_rng(seed, Stream::Resampling, k as u64));
    let next = BpState {
        sensor: resampled.particles.iter().map(|q| q.state).collect(),
        landmarks: prune(up.landmarks, p),
    };
    let map = extract_map(&next, p.extract_threshold);
    Ok((
        next,
        StepReport {
            ess: ess_now,
            state: est,
            state_cov: est_cov,
            map,
            diverged,
        },
    ))
}
