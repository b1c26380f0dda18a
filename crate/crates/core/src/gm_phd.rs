//! Gaussian-mixture PHD map filter conditioned on one UE trajectory.

use nalgebra::Vector5;
use serde::{Deserialize, Serialize};

use crate::birth::{births, BirthParams};
use crate::gaussian::{moment_match, point_log_likelihood, Linearization};
use crate::model::{detection_probability_at, Landmark, MeasVector, Scenario, UeState};

pub use crate::gaussian::GaussianComponent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhdParams {
    pub prune_threshold: f64,
    pub merge_threshold: f64,
    pub max_components: usize,
    pub extract_threshold: f64,
    pub birth: BirthParams,
}

impl Default for PhdParams {
    fn default() -> Self {
        Self {
            prune_threshold: 1e-4,
            merge_threshold: 50.0,
            max_components: 100,
            extract_threshold: 0.5,
            birth: BirthParams::default(),
        }
    }
}

/// Intensity of the landmark set as a weighted sum of Gaussians.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhdMap {
    pub components: Vec<GaussianComponent>,
}

impl PhdMap {
    pub fn new(components: Vec<GaussianComponent>) -> Self {
        Self { components }
    }

    /// Expected number of landmarks.
    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Birth, prediction, update and reduction for one time step.
    pub fn step(&self, z: &[MeasVector], s: &UeState, sc: &Scenario, p: &PhdParams) -> (PhdMap, f64) {
        let born = phd_births(self, z, s, sc, &p.birth);
        let predicted = predict(self, &born);
        let (updated, ll) = update(&predicted, z, s, sc);
        (
            reduce(&updated, p.prune_threshold, p.merge_threshold, p.max_components),
            ll,
        )
    }
}

/// Landmarks are static, so prediction only appends the birth components.
pub fn predict(map: &PhdMap, birth: &[GaussianComponent]) -> PhdMap {
    let mut components = Vec::with_capacity(map.components.len() + birth.len());
    components.extend_from_slice(&map.components);
    components.extend_from_slice(birth);
    PhdMap { components }
}

/// Births for the measurements that neither the base station nor any map
/// component gates.
pub fn phd_births(
    map: &PhdMap,
    z: &[MeasVector],
    s: &UeState,
    sc: &Scenario,
    p: &BirthParams,
) -> Vec<GaussianComponent> {
    let geom = sc.geometry();
    let lins: Vec<Linearization> = map
        .components
        .iter()
        .filter_map(|c| Linearization::new(&c.mean, &c.cov, c.kind, s, &geom, &sc.meas_noise))
        .collect();
    let bs = Linearization::new(
        &sc.bs.position,
        &nalgebra::Matrix3::zeros(),
        sc.bs.kind,
        s,
        &geom,
        &sc.meas_noise,
    );
    let explained = |j: usize| {
        let zv = z[j].to_vector();
        bs.iter().chain(lins.iter()).any(|l| l.mahalanobis2(&zv) <= p.gate)
    };
    births(z, explained, s, sc, p).into_iter().map(|(_, c)| c).collect()
}

/// PHD corrector. Returns the posterior intensity, with exactly
/// `M (|Z| + 1)` components, and `sum_z ln(c(z) + sum Lambda(z))`.
///
/// The base station is a known landmark: its detection term enters every
/// normalizer but it never appears as a map component.
pub fn update(map: &PhdMap, z: &[MeasVector], s: &UeState, sc: &Scenario) -> (PhdMap, f64) {
    let geom = sc.geometry();
    let clutter = sc.clutter_intensity();
    let m = map.components.len();
    let pds: Vec<f64> = map
        .components
        .iter()
        .map(|c| detection_probability_at(&c.mean, c.kind, s, sc))
        .collect();
    let lins: Vec<Option<Linearization>> = map
        .components
        .iter()
        .zip(&pds)
        .map(|(c, &pd)| {
            (pd > 0.0)
                .then(|| Linearization::new(&c.mean, &c.cov, c.kind, s, &geom, &sc.meas_noise))
                .flatten()
        })
        .collect();
    let pd_bs = detection_probability_at(&sc.bs.position, sc.bs.kind, s, sc);

    let mut out = Vec::with_capacity(m * (z.len() + 1));
    for (c, pd) in map.components.iter().zip(&pds) {
        out.push(GaussianComponent {
            weight: c.weight * (1.0 - pd),
            ..*c
        });
    }
    let mut log_likelihood = 0.0;
    let mut lambda = vec![0.0; m];
    for zj in z {
        let zv: Vector5<f64> = zj.to_vector();
        for i in 0..m {
            lambda[i] = match &lins[i] {
                Some(l) => map.components[i].weight * pds[i] * l.log_likelihood(&zv).exp(),
                None => 0.0,
            };
        }
        let bs_term = if pd_bs > 0.0 {
            point_log_likelihood(&sc.bs.position, sc.bs.kind, s, &geom, &sc.meas_noise, &zv)
                .map_or(0.0, |ll| pd_bs * ll.exp())
        } else {
            0.0
        };
        let denom = clutter + bs_term + lambda.iter().sum::<f64>();
        log_likelihood += denom.ln();
        for (i, c) in map.components.iter().enumerate() {
            let weight = if denom > 0.0 { lambda[i] / denom } else { 0.0 };
            let (mean, cov) = match &lins[i] {
                Some(l) if weight > 0.0 => l.posterior(&c.mean, &c.cov, &zv),
                _ => (c.mean, c.cov),
            };
            out.push(GaussianComponent {
                weight,
                mean,
                cov,
                kind: c.kind,
            });
        }
    }
    (PhdMap { components: out }, log_likelihood)
}

/// Prunes light components, merges same-kind components around the heaviest
/// remaining one, and keeps at most `cap` components.
pub fn reduce(map: &PhdMap, prune_threshold: f64, merge_threshold: f64, cap: usize) -> PhdMap {
    let mut pending: Vec<&GaussianComponent> = map
        .components
        .iter()
        .filter(|c| c.weight >= prune_threshold && c.weight > 0.0)
        .collect();
    // heaviest first; stable so equal weights keep their original order
    pending.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    let mut out: Vec<GaussianComponent> = Vec::new();
    while let Some(lead) = pending.first().copied() {
        let (group, rest): (Vec<&GaussianComponent>, Vec<&GaussianComponent>) =
            pending.into_iter().partition(|c| {
                if c.kind != lead.kind {
                    return false;
                }
                let d = c.mean - lead.mean;
                c.cov
                    .cholesky()
                    .map(|ch| d.dot(&ch.solve(&d)))
                    .unwrap_or(if d.norm_squared() == 0.0 { 0.0 } else { f64::INFINITY })
                    <= merge_threshold
            });
        pending = rest;
        let merged = if group.len() == 1 {
            *group[0]
        } else {
            let (w, mean, cov) = moment_match(group.iter().map(|c| (c.weight, &c.mean, &c.cov)))
                .expect("group weights are positive");
            GaussianComponent {
                weight: w,
                mean,
                cov,
                kind: lead.kind,
            }
        };
        out.push(merged);
    }
    out.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    out.truncate(cap);
    PhdMap { components: out }
}

/// Components with weight at least `weight_threshold`, as point landmarks.
pub fn extract_map(map: &PhdMap, weight_threshold: f64) -> Vec<(Landmark, f64)> {
    map.components
        .iter()
        .filter(|c| c.weight >= weight_threshold)
        .map(|c| (Landmark::new(c.mean, c.kind), c.weight))
        .collect()
}
