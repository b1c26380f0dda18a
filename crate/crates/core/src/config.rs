//! Experiment configuration: a single JSON document whose every field has
//! a default, so an empty document yields the reference setup.

use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bp_slam::BpParams;
use crate::experiment::EssAveraging;
use crate::gm_phd::PhdParams;
use crate::metrics::GospaParams;
use crate::model::{Landmark, LandmarkKind, MeasNoise, Scenario, UeState, SPEED_OF_LIGHT};
use crate::motion::{ControlInput, MotionNoise};
use crate::pmbm::PmbmParams;
use crate::rbpf::RbpfParams;
use crate::simulator::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config field `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Phd,
    Pmbm,
    Bp,
}

impl FilterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterKind::Phd => "phd",
            FilterKind::Pmbm => "pmbm",
            FilterKind::Bp => "bp",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phd" => Ok(FilterKind::Phd),
            "pmbm" => Ok(FilterKind::Pmbm),
            "bp" => Ok(FilterKind::Bp),
            _ => Err(format!("unknown filter `{s}` (expected phd, pmbm or bp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub bs_position: [f64; 3],
    pub virtual_anchors: Vec<[f64; 3]>,
    pub scatter_points: Vec<[f64; 3]>,
    pub ue_height: f64,
    pub fov_radius_sp: f64,
    pub p_detect: f64,
    pub clutter_mean: f64,
    /// Maximum sensing range, meters.
    pub max_range: f64,
    /// Delay noise standard deviation expressed as a distance, meters.
    pub toa_std_m: f64,
    pub angle_std_rad: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            bs_position: [0.0, 0.0, 40.0],
            virtual_anchors: vec![
                [200.0, 0.0, 40.0],
                [-200.0, 0.0, 40.0],
                [0.0, 200.0, 40.0],
                [0.0, -200.0, 40.0],
            ],
            scatter_points: vec![
                [65.0, 65.0, 5.0],
                [-65.0, 65.0, 5.0],
                [-65.0, -65.0, 5.0],
                [65.0, -65.0, 5.0],
            ],
            ue_height: 0.0,
            fov_radius_sp: 50.0,
            p_detect: 0.9,
            clutter_mean: 1.0,
            max_range: 200.0,
            toa_std_m: 0.1,
            angle_std_rad: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// m/s.
    pub speed: f64,
    /// rad/s.
    pub turn_rate: f64,
    /// Sampling interval, seconds.
    pub interval: f64,
    /// Process noise std of x, y (m), heading (rad), clock bias (m).
    pub noise_std: [f64; 4],
    /// Initial x, y (m), heading (rad), clock bias (m). Defaults to a
    /// position on the circle traced by the constant turn.
    pub initial_state: Option<[f64; 4]>,
    /// Prior std of the initial state, same units as `noise_std`.
    pub prior_std: [f64; 4],
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            speed: 22.22,
            turn_rate: std::f64::consts::PI / 10.0,
            interval: 0.5,
            noise_std: [0.2, 0.2, 0.0035, 0.2],
            initial_state: None,
            prior_std: [0.3, 0.3, 0.0052, 0.3],
        }
    }
}

impl MotionConfig {
    pub fn initial(&self) -> UeState {
        let [x, y, h, b] = self.initial_state.unwrap_or([
            self.speed / self.turn_rate,
            0.0,
            std::f64::consts::FRAC_PI_2,
            300.0,
        ]);
        UeState::new(x, y, h, b / SPEED_OF_LIGHT)
    }
}

fn meters_to_state_std(std: [f64; 4]) -> [f64; 4] {
    [std[0], std[1], std[2], std[3] / SPEED_OF_LIGHT]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub motion: MotionConfig,
    pub n_steps: usize,
    /// Draw the true trajectory from the noisy transition model.
    pub noisy_trajectory: bool,
    pub filter: FilterKind,
    /// Mapping mode: the filter is given the true UE states.
    pub known_pose: bool,
    pub rbpf: RbpfParams,
    pub phd: PhdParams,
    pub pmbm: PmbmParams,
    pub bp: BpParams,
    pub gospa: GospaParams,
    pub ess_averaging: EssAveraging,
    pub n_mc_runs: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            motion: MotionConfig::default(),
            n_steps: 40,
            noisy_trajectory: true,
            filter: FilterKind::Pmbm,
            known_pose: false,
            rbpf: RbpfParams::default(),
            phd: PhdParams::default(),
            pmbm: PmbmParams::default(),
            bp: BpParams::default(),
            gospa: GospaParams::default(),
            ess_averaging: EssAveraging::AllSteps,
            n_mc_runs: 10,
            base_seed: 1,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Parses and validates a JSON document. Errors name the offending field.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw = if raw.trim().is_empty() { "{}" } else { raw };
    let de = &mut serde_json::Deserializer::from_str(raw);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        ConfigError::Parse {
            path: e.path().to_string(),
            message: format!("{inner} (line {}, column {})", inner.line(), inner.column()),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    validate_config(&raw)
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be > 0, got {v}")))
    }
}

fn probability(path: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(path, format!("must lie in [0, 1], got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        positive("scenario.fov_radius_sp", s.fov_radius_sp)?;
        probability("scenario.p_detect", s.p_detect)?;
        if !(s.clutter_mean >= 0.0 && s.clutter_mean.is_finite()) {
            return Err(invalid("scenario.clutter_mean", "must be >= 0"));
        }
        positive("scenario.max_range", s.max_range)?;
        positive("scenario.toa_std_m", s.toa_std_m)?;
        positive("scenario.angle_std_rad", s.angle_std_rad)?;
        let m = &self.motion;
        positive("motion.interval", m.interval)?;
        if !(m.speed >= 0.0) {
            return Err(invalid("motion.speed", "must be >= 0"));
        }
        for (i, v) in m.noise_std.iter().enumerate() {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(invalid(&format!("motion.noise_std[{i}]"), "must be >= 0"));
            }
        }
        for (i, v) in m.prior_std.iter().enumerate() {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(invalid(&format!("motion.prior_std[{i}]"), "must be >= 0"));
            }
        }
        if m.initial_state.is_none() && m.turn_rate.abs() < 1e-9 {
            return Err(invalid("motion.initial_state", "required when turn_rate is 0"));
        }
        if self.n_steps == 0 {
            return Err(invalid("n_steps", "must be >= 1"));
        }
        if self.rbpf.particles == 0 {
            return Err(invalid("rbpf.particles", "must be >= 1"));
        }
        probability("rbpf.resample_ess_fraction", self.rbpf.resample_ess_fraction)?;
        if self.n_mc_runs == 0 {
            return Err(invalid("n_mc_runs", "must be >= 1"));
        }
        probability("phd.prune_threshold", self.phd.prune_threshold)?;
        positive("phd.merge_threshold", self.phd.merge_threshold)?;
        if self.phd.max_components == 0 {
            return Err(invalid("phd.max_components", "must be >= 1"));
        }
        if self.pmbm.gamma == 0 {
            return Err(invalid("pmbm.gamma", "must be >= 1"));
        }
        if self.pmbm.max_hyps == 0 {
            return Err(invalid("pmbm.max_hyps", "must be >= 1"));
        }
        probability("pmbm.hyp_threshold", self.pmbm.hyp_threshold)?;
        probability("pmbm.r_prune", self.pmbm.r_prune)?;
        if self.bp.sensor_particles == 0 {
            return Err(invalid("bp.sensor_particles", "must be >= 1"));
        }
        if self.bp.da_iterations == 0 {
            return Err(invalid("bp.da_iterations", "must be >= 1"));
        }
        for (name, b) in [("phd", &self.phd.birth), ("pmbm", &self.pmbm.birth), ("bp", &self.bp.birth)] {
            positive(&format!("{name}.birth.weight"), b.weight)?;
            positive(&format!("{name}.birth.spread"), b.spread)?;
            positive(&format!("{name}.birth.va_height_std"), b.va_height_std)?;
        }
        self.gospa
            .validate()
            .map_err(|e| invalid("gospa", e.to_string()))?;
        self.scenario_model()?;
        self.motion_noise()?;
        Ok(())
    }

    pub fn scenario_model(&self) -> Result<Scenario, ConfigError> {
        let s = &self.scenario;
        let v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
        let landmarks = s
            .virtual_anchors
            .iter()
            .map(|p| Landmark::new(v(p), LandmarkKind::Va))
            .chain(s.scatter_points.iter().map(|p| Landmark::new(v(p), LandmarkKind::Sp)))
            .collect();
        let meas_noise = MeasNoise::from_std(s.toa_std_m / SPEED_OF_LIGHT, s.angle_std_rad)
            .map_err(|e| invalid("scenario", e.to_string()))?;
        let sc = Scenario {
            bs: Landmark::new(v(&s.bs_position), LandmarkKind::Bs),
            landmarks,
            ue_height: s.ue_height,
            fov_radius_sp: s.fov_radius_sp,
            p_detect: s.p_detect,
            clutter_mean: s.clutter_mean,
            max_range: s.max_range,
            clutter_toa_offset: self.motion.initial().clock_bias,
            meas_noise,
        };
        sc.validate().map_err(|e| invalid("scenario", e.to_string()))?;
        Ok(sc)
    }

    pub fn control(&self) -> Result<ControlInput, ConfigError> {
        ControlInput::new(self.motion.speed, self.motion.turn_rate)
            .map_err(|e| invalid("motion", e.to_string()))
    }

    pub fn motion_noise(&self) -> Result<MotionNoise, ConfigError> {
        MotionNoise::from_std(meters_to_state_std(self.motion.noise_std), self.motion.interval)
            .map_err(|e| invalid("motion.noise_std", e.to_string()))
    }

    /// Initial prior covariance, carried as a `MotionNoise` for sampling.
    pub fn prior(&self) -> Result<MotionNoise, ConfigError> {
        MotionNoise::from_std(meters_to_state_std(self.motion.prior_std), self.motion.interval)
            .map_err(|e| invalid("motion.prior_std", e.to_string()))
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig, ConfigError> {
        Ok(SimConfig {
            scenario: self.scenario_model()?,
            control: self.control()?,
            motion_noise: self.motion_noise()?,
            n_steps: self.n_steps,
            seed,
            initial_state: self.motion.initial(),
            noisy_trajectory: self.noisy_trajectory,
        })
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
