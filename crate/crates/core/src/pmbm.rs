//! Poisson multi-Bernoulli mixture map filter conditioned on one UE
//! trajectory.
//!
//! Bernoullis live in a shared pool; a global hypothesis is a weighted list
//! of pool indices. A Bernoulli's density is a mixture with at most one
//! Gaussian per landmark kind, so a measurement that fits both a virtual
//! anchor and a scatter point can open a single Bernoulli holding both
//! readings. Known landmarks (the base station) are Bernoullis with
//! existence 1 and zero covariance present in every hypothesis.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::assignment::{murty_kbest_bounded, AssignmentError, CostMatrix};
use crate::birth::{births, BirthParams};
use crate::gaussian::{log_sum_exp, moment_match, GaussianComponent, Linearization};
use crate::model::{detection_probability_at, Landmark, LandmarkKind, MeasVector, Scenario, UeState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmbmParams {
    /// Ranked assignments kept per prior global hypothesis.
    pub gamma: usize,
    pub hyp_threshold: f64,
    pub max_hyps: usize,
    pub r_prune: f64,
    pub recycle: bool,
    /// Poisson components lighter than this are dropped.
    pub ppp_prune: f64,
    pub max_ppp: usize,
    pub extract_threshold: f64,
    /// Squared Mahalanobis distance beyond which a redetection is not
    /// considered.
    pub gate: f64,
    pub birth: BirthParams,
}

impl Default for PmbmParams {
    fn default() -> Self {
        Self {
            gamma: 10,
            hyp_threshold: 1e-4,
            max_hyps: 10,
            r_prune: 1e-3,
            recycle: true,
            ppp_prune: 1e-4,
            max_ppp: 100,
            extract_threshold: 0.5,
            gate: 100.0,
            birth: BirthParams::default(),
        }
    }
}

/// One kind reading of a Bernoulli density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindDensity {
    pub kind: LandmarkKind,
    /// Probability of this kind given existence.
    pub prob: f64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bernoulli {
    pub r: f64,
    pub densities: Vec<KindDensity>,
    /// Log association weight of the local hypothesis that produced it.
    pub log_weight: f64,
}

impl Bernoulli {
    pub fn known(lm: &Landmark) -> Self {
        Self {
            r: 1.0,
            densities: vec![KindDensity {
                kind: lm.kind,
                prob: 1.0,
                mean: lm.position,
                cov: Matrix3::zeros(),
            }],
            log_weight: 0.0,
        }
    }

    /// Most probable kind reading.
    pub fn dominant(&self) -> Option<&KindDensity> {
        self.densities.iter().max_by(|a, b| a.prob.total_cmp(&b.prob))
    }

    fn is_known(&self) -> bool {
        self.densities.iter().any(|d| d.kind == LandmarkKind::Bs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHypothesis {
    /// Normalized log weight.
    pub log_weight: f64,
    /// Indices into the Bernoulli pool, ascending.
    pub bernoullis: Vec<usize>,
}

impl GlobalHypothesis {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmbmMap {
    pub poisson: Vec<GaussianComponent>,
    pub pool: Vec<Bernoulli>,
    pub hypotheses: Vec<GlobalHypothesis>,
}

impl Default for PmbmMap {
    fn default() -> Self {
        Self {
            poisson: Vec::new(),
            pool: Vec::new(),
            hypotheses: vec![GlobalHypothesis {
                log_weight: 0.0,
                bernoullis: Vec::new(),
            }],
        }
    }
}

impl PmbmMap {
    /// Map whose only content is the given known landmarks.
    pub fn with_known(known: &[Landmark]) -> Self {
        Self {
            poisson: Vec::new(),
            pool: known.iter().map(Bernoulli::known).collect(),
            hypotheses: vec![GlobalHypothesis {
                log_weight: 0.0,
                bernoullis: (0..known.len()).collect(),
            }],
        }
    }

    pub fn best_hypothesis(&self) -> Option<&GlobalHypothesis> {
        self.hypotheses
            .iter()
            .max_by(|a, b| a.log_weight.total_cmp(&b.log_weight))
    }

    /// Births, update and reduction for one time step.
    pub fn step(&self, z: &[MeasVector], s: &UeState, sc: &Scenario, p: &PmbmParams) -> (PmbmMap, f64) {
        let (m, ll) = update(self, z, s, sc, p);
        (reduce(&m, p), ll)
    }
}

fn pd_of(d: &KindDensity, s: &UeState, sc: &Scenario) -> f64 {
    detection_probability_at(&d.mean, d.kind, s, sc)
}

/// Case a: undetected landmarks stay undetected.
pub fn thin_undetected(ppp: &[GaussianComponent], s: &UeState, sc: &Scenario) -> Vec<GaussianComponent> {
    ppp.iter()
        .map(|c| GaussianComponent {
            weight: c.weight * (1.0 - detection_probability_at(&c.mean, c.kind, s, sc)),
            ..*c
        })
        .collect()
}

/// Case b: a Bernoulli opened by `z` from the undetected intensity.
pub fn new_bernoulli(z: &MeasVector, ppp: &[GaussianComponent], s: &UeState, sc: &Scenario) -> Bernoulli {
    let geom = sc.geometry();
    let zv = z.to_vector();
    let mut updated: Vec<(f64, Vector3<f64>, Matrix3<f64>, LandmarkKind)> = Vec::new();
    for c in ppp {
        let pd = detection_probability_at(&c.mean, c.kind, s, sc);
        if pd <= 0.0 || c.weight <= 0.0 {
            continue;
        }
        let Some(lin) = Linearization::new(&c.mean, &c.cov, c.kind, s, &geom, &sc.meas_noise) else {
            continue;
        };
        let log_mass = c.weight.ln() + pd.ln() + lin.log_likelihood(&zv);
        if log_mass == f64::NEG_INFINITY {
            continue;
        }
        let (m, p) = lin.posterior(&c.mean, &c.cov, &zv);
        updated.push((log_mass, m, p, c.kind));
    }
    let log_total = log_sum_exp(updated.iter().map(|u| u.0));
    let log_clutter = sc.clutter_intensity().ln();
    let log_weight = log_sum_exp([log_clutter, log_total]);
    if log_total == f64::NEG_INFINITY {
        return Bernoulli {
            r: 0.0,
            densities: Vec::new(),
            log_weight: log_clutter,
        };
    }
    let mut densities = Vec::new();
    for kind in [LandmarkKind::Va, LandmarkKind::Sp, LandmarkKind::Bs] {
        let group: Vec<(f64, &Vector3<f64>, &Matrix3<f64>)> = updated
            .iter()
            .filter(|u| u.3 == kind)
            .map(|u| ((u.0 - log_total).exp(), &u.1, &u.2))
            .collect();
        if let Some((prob, mean, cov)) = moment_match(group.iter().copied()) {
            densities.push(KindDensity { kind, prob, mean, cov });
        }
    }
    normalize_probs(&mut densities);
    Bernoulli {
        r: (log_total - log_weight).exp(),
        densities,
        log_weight,
    }
}

fn normalize_probs(d: &mut Vec<KindDensity>) {
    d.retain(|k| k.prob > 0.0);
    let total: f64 = d.iter().map(|k| k.prob).sum();
    if total > 0.0 {
        for k in d.iter_mut() {
            k.prob /= total;
        }
    }
}

/// Case c: a detected landmark that receives no measurement.
pub fn misdetect_bernoulli(b: &Bernoulli, s: &UeState, sc: &Scenario) -> Bernoulli {
    let q: f64 = b.densities.iter().map(|d| d.prob * (1.0 - pd_of(d, s, sc))).sum();
    let norm = 1.0 - b.r + b.r * q;
    let mut densities = b.densities.clone();
    if q > 0.0 {
        for d in densities.iter_mut() {
            d.prob *= 1.0 - pd_of(d, s, sc);
        }
        normalize_probs(&mut densities);
    }
    Bernoulli {
        r: if norm > 0.0 { b.r * q / norm } else { b.r },
        densities,
        log_weight: norm.ln(),
    }
}

/// Per-kind linearizations of a Bernoulli at one UE state.
struct BernoulliLin {
    /// `(ln(prob * p_D), linearization)` for each detectable kind reading.
    parts: Vec<Option<(f64, Linearization)>>,
}

impl BernoulliLin {
    fn new(b: &Bernoulli, s: &UeState, sc: &Scenario) -> Self {
        let geom = sc.geometry();
        let parts = b
            .densities
            .iter()
            .map(|d| {
                let pd = pd_of(d, s, sc);
                if pd <= 0.0 || d.prob <= 0.0 {
                    return None;
                }
                Linearization::new(&d.mean, &d.cov, d.kind, s, &geom, &sc.meas_noise)
                    .map(|l| ((d.prob * pd).ln(), l))
            })
            .collect();
        Self { parts }
    }

    /// `ln(r * sum_m prob_m p_D N(z; zhat_m, S_m))`, `-inf` beyond the gate.
    fn log_redetect(&self, r: f64, zv: &Vector5<f64>, gate: f64) -> f64 {
        let terms: Vec<f64> = self
            .parts
            .iter()
            .flatten()
            .filter_map(|(lw, l)| {
                let d2 = l.mahalanobis2(zv);
                (d2 <= gate).then(|| lw + l.log_likelihood(zv))
            })
            .collect();
        r.ln() + log_sum_exp(terms)
    }

    fn posterior(&self, b: &Bernoulli, zv: &Vector5<f64>) -> Bernoulli {
        let mut logs = Vec::new();
        let mut densities = Vec::new();
        for (d, part) in b.densities.iter().zip(&self.parts) {
            if let Some((lw, l)) = part {
                let (mean, cov) = l.posterior(&d.mean, &d.cov, zv);
                logs.push(lw + l.log_likelihood(zv));
                densities.push(KindDensity { mean, cov, ..*d });
            }
        }
        let total = log_sum_exp(logs.iter().copied());
        for (d, lw) in densities.iter_mut().zip(&logs) {
            d.prob = (lw - total).exp();
        }
        normalize_probs(&mut densities);
        Bernoulli {
            r: 1.0,
            densities,
            log_weight: b.r.ln() + total,
        }
    }
}

/// Case d: a detected landmark detected again by `z`.
pub fn redetect_bernoulli(b: &Bernoulli, z: &MeasVector, s: &UeState, sc: &Scenario) -> Bernoulli {
    let lin = BernoulliLin::new(b, s, sc);
    let zv = z.to_vector();
    if lin.parts.iter().all(|p| p.is_none()) || b.r <= 0.0 {
        return Bernoulli {
            r: 1.0,
            densities: b.densities.clone(),
            log_weight: f64::NEG_INFINITY,
        };
    }
    lin.posterior(b, &zv)
}

/// Assignment cost matrix of one global hypothesis: measurements are rows,
/// the hypothesis' Bernoullis then one new-landmark column per measurement.
///
/// `log_redetect[i][j]` and `log_misdetect[i]` are indexed by pool index,
/// `log_new[j]` by measurement.
pub fn build_cost_matrix(
    hyp: &GlobalHypothesis,
    log_redetect: &[Vec<f64>],
    log_misdetect: &[f64],
    log_new: &[f64],
) -> Result<CostMatrix, AssignmentError> {
    let m = log_new.len();
    let n = hyp.bernoullis.len();
    let cols = n + m;
    let mut data = vec![f64::INFINITY; m * cols];
    for j in 0..m {
        for (col, &i) in hyp.bernoullis.iter().enumerate() {
            let c = -(log_redetect[i][j] - log_misdetect[i]);
            data[j * cols + col] = if c.is_nan() { f64::INFINITY } else { c };
        }
        data[j * cols + n + j] = -log_new[j];
    }
    for v in data.iter_mut() {
        // a certain misdetection turns every redetection ratio into +inf
        if *v == f64::NEG_INFINITY {
            *v = -1e300;
        }
    }
    CostMatrix::new(m, cols, data)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Source {
    Miss(usize),
    Hit(usize, usize),
    New(usize),
}

/// Births for measurements not gated by any pool Bernoulli.
pub fn pmbm_births(
    map: &PmbmMap,
    z: &[MeasVector],
    s: &UeState,
    sc: &Scenario,
    p: &BirthParams,
) -> Vec<GaussianComponent> {
    let lins: Vec<BernoulliLin> = map.pool.iter().map(|b| BernoulliLin::new(b, s, sc)).collect();
    let explained = |j: usize| {
        let zv = z[j].to_vector();
        lins.iter()
            .flat_map(|l| l.parts.iter().flatten())
            .any(|(_, l)| l.mahalanobis2(&zv) <= p.gate)
    };
    births(z, explained, s, sc, p).into_iter().map(|(_, c)| c).collect()
}

/// PMBM update with at most `gamma` children per prior hypothesis, before
/// reduction. Returns the posterior and the particle log-likelihood.
pub fn update(map: &PmbmMap, z: &[MeasVector], s: &UeState, sc: &Scenario, p: &PmbmParams) -> (PmbmMap, f64) {
    let mut ppp = map.poisson.clone();
    ppp.extend(pmbm_births(map, z, s, sc, &p.birth));
    let ppp_mass: f64 = ppp.iter().map(|c| c.weight).sum();
    let zv: Vec<Vector5<f64>> = z.iter().map(|m| m.to_vector()).collect();

    // local hypotheses, only for pool entries some hypothesis still uses
    let n_pool = map.pool.len();
    let mut used = vec![false; n_pool];
    for h in &map.hypotheses {
        for &i in &h.bernoullis {
            used[i] = true;
        }
    }
    let lins: Vec<Option<BernoulliLin>> = map
        .pool
        .iter()
        .zip(&used)
        .map(|(b, &u)| u.then(|| BernoulliLin::new(b, s, sc)))
        .collect();
    let missed: Vec<Option<Bernoulli>> = map
        .pool
        .iter()
        .zip(&used)
        .map(|(b, &u)| u.then(|| misdetect_bernoulli(b, s, sc)))
        .collect();
    let log_misdetect: Vec<f64> = missed
        .iter()
        .map(|b| b.as_ref().map_or(0.0, |b| b.log_weight))
        .collect();
    let log_redetect: Vec<Vec<f64>> = map
        .pool
        .iter()
        .zip(&lins)
        .map(|(b, l)| match l {
            Some(l) => zv.iter().map(|z| l.log_redetect(b.r, z, p.gate)).collect(),
            None => vec![f64::NEG_INFINITY; z.len()],
        })
        .collect();
    let fresh: Vec<Bernoulli> = z.iter().map(|m| new_bernoulli(m, &ppp, s, sc)).collect();
    let log_new: Vec<f64> = fresh.iter().map(|b| b.log_weight).collect();

    let max_gap = if p.hyp_threshold > 0.0 {
        -p.hyp_threshold.ln()
    } else {
        f64::INFINITY
    };
    let mut children: Vec<(f64, Vec<Source>)> = Vec::new();
    for h in &map.hypotheses {
        let base = h.log_weight + h.bernoullis.iter().map(|&i| log_misdetect[i]).sum::<f64>();
        if z.is_empty() {
            children.push((base, h.bernoullis.iter().map(|&i| Source::Miss(i)).collect()));
            continue;
        }
        // a measurement nothing can explain makes this hypothesis impossible
        let Ok(ranked) = build_cost_matrix(h, &log_redetect, &log_misdetect, &log_new)
            .and_then(|cost| murty_kbest_bounded(&cost, p.gamma, max_gap))
        else {
            continue;
        };
        let n = h.bernoullis.len();
        for a in ranked {
            let mut hit = vec![None; n];
            let mut sources = Vec::with_capacity(n + z.len());
            for (j, &col) in a.row_to_col.iter().enumerate() {
                if col < n {
                    hit[col] = Some(j);
                } else {
                    sources.push(Source::New(j));
                }
            }
            for (col, &i) in h.bernoullis.iter().enumerate() {
                sources.push(match hit[col] {
                    Some(j) => Source::Hit(i, j),
                    None => Source::Miss(i),
                });
            }
            children.push((base - a.total_cost, sources));
        }
    }

    let log_total = log_sum_exp(children.iter().map(|c| c.0));
    let log_likelihood = -ppp_mass - sc.clutter_mean + log_total;
    if children.is_empty() || !log_total.is_finite() {
        let mut out = map.clone();
        out.poisson = thin_undetected(&ppp, s, sc);
        return (out, log_likelihood);
    }

    let mut pool: Vec<Bernoulli> = Vec::new();
    let mut index: HashMap<Source, usize> = HashMap::new();
    let mut hypotheses = Vec::with_capacity(children.len());
    for (lw, sources) in children {
        let mut idx: Vec<usize> = sources
            .into_iter()
            .map(|src| {
                *index.entry(src).or_insert_with(|| {
                    pool.push(match src {
                        Source::Miss(i) => missed[i].clone().expect("used pool entry"),
                        Source::Hit(i, j) => lins[i]
                            .as_ref()
                            .expect("used pool entry")
                            .posterior(&map.pool[i], &zv[j]),
                        Source::New(j) => fresh[j].clone(),
                    });
                    pool.len() - 1
                })
            })
            .collect();
        idx.sort_unstable();
        hypotheses.push(GlobalHypothesis {
            log_weight: lw - log_total,
            bernoullis: idx,
        });
    }
    (
        PmbmMap {
            poisson: thin_undetected(&ppp, s, sc),
            pool,
            hypotheses,
        },
        log_likelihood,
    )
}

/// Hypothesis pruning and capping, Bernoulli pruning (optionally recycled
/// into the Poisson part), duplicate merging and pool garbage collection.
pub fn reduce(map: &PmbmMap, p: &PmbmParams) -> PmbmMap {
    let mut hyps: Vec<GlobalHypothesis> = map.hypotheses.clone();
    hyps.sort_by(|a, b| b.log_weight.total_cmp(&a.log_weight));
    let threshold_log = p.hyp_threshold.ln();
    let keep = hyps
        .iter()
        .take(p.max_hyps.max(1))
        .take_while(|h| h.log_weight >= threshold_log)
        .count()
        .max(1);
    hyps.truncate(keep);
    renormalize(&mut hyps);

    let mut poisson: Vec<GaussianComponent> = map.poisson.clone();
    let weak: Vec<bool> = map
        .pool
        .iter()
        .map(|b| b.r < p.r_prune && !b.is_known())
        .collect();
    if p.recycle {
        let mut mass = vec![0.0; map.pool.len()];
        for h in &hyps {
            for &i in &h.bernoullis {
                if weak[i] {
                    mass[i] += h.weight();
                }
            }
        }
        for (i, b) in map.pool.iter().enumerate() {
            if mass[i] > 0.0 {
                for d in &b.densities {
                    poisson.push(GaussianComponent {
                        weight: mass[i] * b.r * d.prob,
                        mean: d.mean,
                        cov: d.cov,
                        kind: d.kind,
                    });
                }
            }
        }
    }
    poisson.retain(|c| c.weight >= p.ppp_prune && c.weight > 0.0);
    poisson.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    poisson.truncate(p.max_ppp);

    // drop weak Bernoullis, then merge hypotheses that became identical
    let mut merged: Vec<GlobalHypothesis> = Vec::new();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    for h in hyps {
        let b: Vec<usize> = h.bernoullis.iter().copied().filter(|&i| !weak[i]).collect();
        match seen.get(&b) {
            Some(&k) => {
                merged[k].log_weight = log_sum_exp([merged[k].log_weight, h.log_weight]);
            }
            None => {
                seen.insert(b.clone(), merged.len());
                merged.push(GlobalHypothesis {
                    log_weight: h.log_weight,
                    bernoullis: b,
                });
            }
        }
    }
    merged.sort_by(|a, b| b.log_weight.total_cmp(&a.log_weight));

    let mut remap = vec![usize::MAX; map.pool.len()];
    let mut pool = Vec::new();
    for h in merged.iter_mut() {
        for i in h.bernoullis.iter_mut() {
            if remap[*i] == usize::MAX {
                remap[*i] = pool.len();
                pool.push(map.pool[*i].clone());
            }
            *i = remap[*i];
        }
        h.bernoullis.sort_unstable();
    }
    PmbmMap {
        poisson,
        pool,
        hypotheses: merged,
    }
}

fn renormalize(h: &mut [GlobalHypothesis]) {
    let total = log_sum_exp(h.iter().map(|h| h.log_weight));
    if total.is_finite() {
        for x in h.iter_mut() {
            x.log_weight -= total;
        }
    } else {
        let uniform = -(h.len() as f64).ln();
        for x in h.iter_mut() {
            x.log_weight = uniform;
        }
    }
}

/// Bernoullis of the most likely hypothesis with existence at least
/// `threshold`, reported at their most probable kind.
pub fn extract_map(map: &PmbmMap, threshold: f64) -> Vec<(Landmark, f64)> {
    let Some(best) = map.best_hypothesis() else {
        return Vec::new();
    };
    best.bernoullis
        .iter()
        .map(|&i| &map.pool[i])
        .filter(|b| b.r >= threshold && !b.is_known())
        .filter_map(|b| b.dominant().map(|d| (Landmark::new(d.mean, d.kind), b.r)))
        .collect()
}
