//! Simulate, filter and score: single runs, Monte-Carlo batches and the CSV
//! files they produce.
//!
//! Every CSV starts with a block of `# key: value` metadata lines followed
//! by a header row. Wall-clock timings are kept out of these files (they go
//! to `timing.csv`) so that reruns are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp_slam::{self, BpError, BpState};
use crate::config::{ConfigError, ExperimentConfig, FilterKind};
use crate::gm_phd::PhdMap;
use crate::metrics::{gospa_landmarks, rmse, state_error, GospaResult, StateField};
use crate::model::{Landmark, LandmarkKind, UeState};
use crate::pmbm::PmbmMap;
use crate::rbpf::{self, MapFilter, Propagation, RbpfError, StepReport};
use crate::simulator::{simulate, GroundTruth};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rbpf(#[from] RbpfError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error("output directory {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// How the per-step ESS is averaged into the run summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EssAveraging {
    /// Mean of the pre-resampling ESS over all steps.
    #[default]
    AllSteps,
    /// Same, skipping the first step (which only reweights the prior draws).
    SkipFirst,
}

/// Scores of one filter step.
#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    pub step: usize,
    pub gospa_va: GospaResult,
    pub gospa_sp: GospaResult,
    pub pos_err: f64,
    pub heading_err: f64,
    /// Meters.
    pub bias_err: f64,
    /// Percent of the particle count.
    pub ess_pct: f64,
    pub n_va: usize,
    pub n_sp: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub rmse_pos: f64,
    pub rmse_heading: f64,
    pub rmse_bias: f64,
    pub mean_ess_pct: f64,
    pub final_gospa_va: f64,
    pub final_gospa_sp: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<StepRow>,
    pub summary: RunSummary,
    pub truth: GroundTruth,
    pub estimates: Vec<UeState>,
    pub final_map: Vec<(Landmark, f64)>,
    pub wall_time_s: f64,
}

/// Particle count actually used: one particle in mapping mode.
pub fn effective_particles(cfg: &ExperimentConfig) -> usize {
    if cfg.known_pose {
        1
    } else if cfg.filter == FilterKind::Bp {
        cfg.bp.sensor_particles
    } else {
        cfg.rbpf.particles
    }
}

fn run_rbpf<M: MapFilter>(
    cfg: &ExperimentConfig,
    truth: &GroundTruth,
    params: &M::Params,
    seed: u64,
) -> Result<Vec<StepReport>, ExperimentError> {
    let sc = cfg.scenario_model()?;
    let u = cfg.control()?;
    let q = cfg.motion_noise()?;
    let n = effective_particles(cfg);
    let mut ps = rbpf::init(&cfg.motion.initial(), &cfg.prior()?, n, M::initial(&sc), seed)?;
    let mut reports = Vec::with_capacity(truth.states.len());
    for (k, z) in truth.measurement_sets.iter().enumerate() {
        let prop = if cfg.known_pose {
            Propagation::Known(&truth.states[k])
        } else if k == 0 {
            Propagation::None
        } else {
            Propagation::Motion(&u, &q)
        };
        let (next, report) = rbpf::step(&ps, z, prop, &sc, params, &cfg.rbpf, seed, k);
        ps = next;
        reports.push(report);
    }
    Ok(reports)
}

fn run_bp(cfg: &ExperimentConfig, truth: &GroundTruth, seed: u64) -> Result<Vec<StepReport>, ExperimentError> {
    let sc = cfg.scenario_model()?;
    let u = cfg.control()?;
    let q = cfg.motion_noise()?;
    let mut state = BpState::init(&cfg.motion.initial(), &cfg.prior()?, effective_particles(cfg), &sc, seed)?;
    let mut reports = Vec::with_capacity(truth.states.len());
    for (k, z) in truth.measurement_sets.iter().enumerate() {
        let prop = if cfg.known_pose {
            Propagation::Known(&truth.states[k])
        } else if k == 0 {
            Propagation::None
        } else {
            Propagation::Motion(&u, &q)
        };
        let (next, report) = bp_slam::step(&state, z, prop, &sc, &cfg.bp, seed, k)?;
        state = next;
        reports.push(report);
    }
    Ok(reports)
}

fn of_kind(lms: &[Landmark], kind: LandmarkKind) -> Vec<Landmark> {
    lms.iter().filter(|l| l.kind == kind).copied().collect()
}

/// Simulates and filters one Monte-Carlo run with the given seed.
pub fn run_single(cfg: &ExperimentConfig, run: usize, seed: u64) -> Result<RunResult, ExperimentError> {
    let start = Instant::now();
    let sim = cfg.sim_config(seed)?;
    let truth = simulate(&sim);
    let reports = match cfg.filter {
        FilterKind::Phd => run_rbpf::<PhdMap>(cfg, &truth, &cfg.phd, seed)?,
        FilterKind::Pmbm => run_rbpf::<PmbmMap>(cfg, &truth, &cfg.pmbm, seed)?,
        FilterKind::Bp => run_bp(cfg, &truth, seed)?,
    };
    let true_va = of_kind(&sim.scenario.landmarks, LandmarkKind::Va);
    let true_sp = of_kind(&sim.scenario.landmarks, LandmarkKind::Sp);
    let n = effective_particles(cfg) as f64;
    let rows: Vec<StepRow> = reports
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let est: Vec<Landmark> = r.map.iter().map(|(l, _)| *l).collect();
            let va = of_kind(&est, LandmarkKind::Va);
            let sp = of_kind(&est, LandmarkKind::Sp);
            let t = &truth.states[k];
            StepRow {
                step: k,
                gospa_va: gospa_landmarks(&va, &true_va, &cfg.gospa),
                gospa_sp: gospa_landmarks(&sp, &true_sp, &cfg.gospa),
                pos_err: state_error(&r.state, t, StateField::Position),
                heading_err: state_error(&r.state, t, StateField::Heading),
                bias_err: state_error(&r.state, t, StateField::ClockBias),
                ess_pct: 100.0 * r.ess / n,
                n_va: va.len(),
                n_sp: sp.len(),
            }
        })
        .collect();
    let estimates: Vec<UeState> = reports.iter().map(|r| r.state).collect();
    let skip = match cfg.ess_averaging {
        EssAveraging::AllSteps => 0,
        EssAveraging::SkipFirst => 1.min(rows.len() - 1),
    };
    let ess_rows = &rows[skip..];
    let last = rows.last().expect("at least one step");
    let summary = RunSummary {
        run,
        seed,
        rmse_pos: rmse(&estimates, &truth.states, StateField::Position).unwrap_or(f64::NAN),
        rmse_heading: rmse(&estimates, &truth.states, StateField::Heading).unwrap_or(f64::NAN),
        rmse_bias: rmse(&estimates, &truth.states, StateField::ClockBias).unwrap_or(f64::NAN),
        mean_ess_pct: ess_rows.iter().map(|r| r.ess_pct).sum::<f64>() / ess_rows.len() as f64,
        final_gospa_va: last.gospa_va.total,
        final_gospa_sp: last.gospa_sp.total,
    };
    Ok(RunResult {
        rows,
        summary,
        final_map: reports.last().map(|r| r.map.clone()).unwrap_or_default(),
        truth,
        estimates,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs `runs` Monte-Carlo runs in parallel; run `r` uses seed `base_seed + r`.
pub fn run_batch(cfg: &ExperimentConfig, runs: usize) -> Result<Vec<RunResult>, ExperimentError> {
    (0..runs)
        .into_par_iter()
        .map(|r| run_single(cfg, r, cfg.base_seed.wrapping_add(r as u64)))
        .collect()
}

/// Directory label of a filter and mode, e.g. `pmbm` or `phd_known`.
pub fn label(cfg: &ExperimentConfig) -> String {
    if cfg.known_pose {
        format!("{}_known", cfg.filter.as_str())
    } else {
        cfg.filter.as_str().to_string()
    }
}

/// Metadata lines shared by every output file.
pub fn metadata(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<(String, String)> {
    let mut m = vec![
        ("software".to_string(), format!("radio-slam {VERSION}")),
        ("config_sha256".into(), cfg.hash()),
        ("filter".into(), cfg.filter.as_str().into()),
        ("known_pose".into(), cfg.known_pose.to_string()),
        ("particles".into(), effective_particles(cfg).to_string()),
        (
            "gospa".into(),
            format!("c={} p={} alpha={} kind_mismatch=unmatched", cfg.gospa.c, cfg.gospa.p, cfg.gospa.alpha),
        ),
        (
            "pmbm".into(),
            format!(
                "gamma={} hyp_threshold={} max_hyps={} r_prune={} recycle={}",
                cfg.pmbm.gamma, cfg.pmbm.hyp_threshold, cfg.pmbm.max_hyps, cfg.pmbm.r_prune, cfg.pmbm.recycle
            ),
        ),
        (
            "phd".into(),
            format!(
                "prune={} merge={} max_components={}",
                cfg.phd.prune_threshold, cfg.phd.merge_threshold, cfg.phd.max_components
            ),
        ),
        (
            "bp".into(),
            format!("da_iterations={} da_tolerance={}", cfg.bp.da_iterations, cfg.bp.da_tolerance),
        ),
        (
            "ess".into(),
            format!(
                "pre-resampling, percent of particles, averaging={}",
                serde_json::to_value(cfg.ess_averaging)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            ),
        ),
    ];
    match seed {
        Some(s) => m.push(("seed".into(), s.to_string())),
        None => m.push(("base_seed".into(), cfg.base_seed.to_string())),
    }
    m
}

fn create(path: &Path, meta: &[(String, String)]) -> Result<csv::Writer<fs::File>, ExperimentError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for (k, v) in meta {
        writeln!(f, "# {k}: {v}").map_err(io_err(path))?;
    }
    Ok(csv::Writer::from_writer(f))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub const STEP_COLUMNS: [&str; 17] = [
    "step",
    "gospa_va_total",
    "gospa_va_loc",
    "gospa_va_miss",
    "gospa_va_false",
    "gospa_sp_total",
    "gospa_sp_loc",
    "gospa_sp_miss",
    "gospa_sp_false",
    "pos_err",
    "heading_err",
    "bias_err",
    "ess",
    "n_va",
    "n_sp",
    "n_va_missed",
    "n_sp_missed",
];

pub fn write_steps(path: &Path, meta: &[(String, String)], rows: &[StepRow]) -> Result<(), ExperimentError> {
    let mut w = create(path, meta)?;
    w.write_record(STEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            num(r.gospa_va.total),
            num(r.gospa_va.localization),
            num(r.gospa_va.missed),
            num(r.gospa_va.false_),
            num(r.gospa_sp.total),
            num(r.gospa_sp.localization),
            num(r.gospa_sp.missed),
            num(r.gospa_sp.false_),
            num(r.pos_err),
            num(r.heading_err),
            num(r.bias_err),
            num(r.ess_pct),
            r.n_va.to_string(),
            r.n_sp.to_string(),
            r.gospa_va.n_missed.to_string(),
            r.gospa_sp.n_missed.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_trajectory(path: &Path, meta: &[(String, String)], res: &RunResult) -> Result<(), ExperimentError> {
    let mut w = create(path, meta)?;
    w.write_record(["step", "x", "y", "heading", "clock_bias", "est_x", "est_y", "est_heading", "est_clock_bias"])?;
    for (k, (t, e)) in res.truth.states.iter().zip(&res.estimates).enumerate() {
        w.write_record([
            k.to_string(),
            num(t.x),
            num(t.y),
            num(t.heading),
            num(t.clock_bias),
            num(e.x),
            num(e.y),
            num(e.heading),
            num(e.clock_bias),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_map(path: &Path, meta: &[(String, String)], map: &[(Landmark, f64)]) -> Result<(), ExperimentError> {
    let mut w = create(path, meta)?;
    w.write_record(["kind", "x", "y", "z", "score"])?;
    for (l, s) in map {
        w.write_record([
            l.kind.as_str().to_string(),
            num(l.position.x),
            num(l.position.y),
            num(l.position.z),
            num(*s),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Checks that `dir` can be created and written to.
pub fn prepare_output(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(io_err(dir))?;
    fs::remove_file(&probe).map_err(io_err(dir))?;
    Ok(())
}

/// Writes all files of a finished batch below `out/<label>/`.
pub fn write_batch(cfg: &ExperimentConfig, out: &Path, results: &[RunResult]) -> Result<PathBuf, ExperimentError> {
    let dir = out.join(label(cfg));
    prepare_output(&dir)?;
    for r in results {
        let meta = metadata(cfg, Some(r.summary.seed));
        write_steps(&dir.join(format!("steps_run{:03}.csv", r.summary.run)), &meta, &r.rows)?;
        write_trajectory(&dir.join(format!("trajectory_run{:03}.csv", r.summary.run)), &meta, r)?;
        write_map(&dir.join(format!("map_run{:03}.csv", r.summary.run)), &meta, &r.final_map)?;
    }
    let meta = metadata(cfg, None);
    let path = dir.join("summary.csv");
    let mut w = create(&path, &meta)?;
    w.write_record([
        "run",
        "seed",
        "rmse_pos",
        "rmse_heading",
        "rmse_bias",
        "mean_ess",
        "final_gospa_va",
        "final_gospa_sp",
    ])?;
    for r in results {
        let s = &r.summary;
        w.write_record([
            s.run.to_string(),
            s.seed.to_string(),
            num(s.rmse_pos),
            num(s.rmse_heading),
            num(s.rmse_bias),
            num(s.mean_ess_pct),
            num(s.final_gospa_va),
            num(s.final_gospa_sp),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    let path = dir.join("timing.csv");
    let mut w = create(&path, &meta)?;
    w.write_record(["run", "wall_time_s"])?;
    for r in results {
        w.write_record([r.summary.run.to_string(), num(r.wall_time_s)])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(dir)
}

/// Validates the output location, runs the batch and writes the results.
pub fn run_experiment(cfg: &ExperimentConfig, runs: usize) -> Result<(PathBuf, Vec<RunResult>), ExperimentError> {
    cfg.validate()?;
    prepare_output(&cfg.output_dir.join(label(cfg)))?;
    let results = run_batch(cfg, runs)?;
    let dir = write_batch(cfg, &cfg.output_dir, &results)?;
    Ok((dir, results))
}

/// Writes the simulated trajectory and measurements of one seed.
pub fn write_simulation(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(), ExperimentError> {
    cfg.validate()?;
    prepare_output(out)?;
    let sim = cfg.sim_config(seed)?;
    let truth = simulate(&sim);
    let meta = metadata(cfg, Some(seed));
    let path = out.join("truth_trajectory.csv");
    let mut w = create(&path, &meta)?;
    w.write_record(["step", "x", "y", "heading", "clock_bias"])?;
    for (k, s) in truth.states.iter().enumerate() {
        w.write_record([k.to_string(), num(s.x), num(s.y), num(s.heading), num(s.clock_bias)])?;
    }
    w.flush().map_err(io_err(&path))?;
    let path = out.join("measurements.csv");
    let mut w = create(&path, &meta)?;
    w.write_record(["step", "toa", "aoa_az", "aoa_el", "aod_az", "aod_el", "origin"])?;
    for (k, (zs, os)) in truth.measurement_sets.iter().zip(&truth.origin_labels).enumerate() {
        for (z, o) in zs.iter().zip(os) {
            w.write_record([
                k.to_string(),
                num(z.toa),
                num(z.aoa_az),
                num(z.aoa_el),
                num(z.aod_az),
                num(z.aod_el),
                o.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    let all: Vec<(Landmark, f64)> = std::iter::once(sim.scenario.bs)
        .chain(sim.scenario.landmarks.iter().copied())
        .map(|l| (l, 1.0))
        .collect();
    write_map(&out.join("truth_map.csv"), &meta, &all)?;
    Ok(())
}

/// Reads the data rows of a steps file, skipping metadata lines.
pub fn read_steps(path: &Path) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect());
    }
    Ok(rows)
}

/// Per-figure data files: run-averaged VA and SP GOSPA and UE errors per
/// step, one column per `out/<label>` directory found.
pub fn plot_data(out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut labels: Vec<(String, Vec<Vec<Vec<f64>>>)> = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(io_err(out))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(io_err(&d))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("steps_run") && n.ends_with(".csv"))
            })
            .collect();
        if files.is_empty() {
            continue;
        }
        files.sort();
        let runs = files.iter().map(|f| read_steps(f)).collect::<Result<Vec<_>, _>>()?;
        let name = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        labels.push((name, runs));
    }
    let plots = out.join("plots");
    prepare_output(&plots)?;
    let col = |name: &str| STEP_COLUMNS.iter().position(|c| *c == name).expect("known column");
    let figures = [
        ("va_gospa.csv", col("gospa_va_total")),
        ("sp_gospa.csv", col("gospa_sp_total")),
        ("position_error.csv", col("pos_err")),
        ("ess.csv", col("ess")),
    ];
    let mut written = Vec::new();
    for (file, c) in figures {
        let path = plots.join(file);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["step".to_string()];
        header.extend(labels.iter().map(|l| l.0.clone()));
        w.write_record(&header)?;
        let steps = labels.iter().map(|l| l.1.iter().map(|r| r.len()).min().unwrap_or(0)).max().unwrap_or(0);
        for k in 0..steps {
            let mut rec = vec![k.to_string()];
            for (_, runs) in &labels {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(k).map(|row| row[c])).collect();
                rec.push(if vals.is_empty() {
                    String::new()
                } else {
                    num(vals.iter().sum::<f64>() / vals.len() as f64)
                });
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
