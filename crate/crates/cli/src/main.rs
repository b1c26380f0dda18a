use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use radio_slam::config::{load_config, ExperimentConfig, FilterKind};
use radio_slam::experiment::{plot_data, run_experiment, write_simulation};

#[derive(Parser)]
#[command(name = "radio-slam", version, about = "Bistatic mmWave radio SLAM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 lets the runtime decide. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long, value_parser = parse_filter)]
    filter: Option<FilterKind>,
    /// Mapping mode: give the filter the true UE states.
    #[arg(long)]
    known_pose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write one simulated trajectory and its measurements.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// One filter run with the given seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Monte-Carlo batch; run r uses seed base_seed + r.
    Mc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run-averaged per-figure data from the result directories under --out.
    PlotData {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_filter(s: &str) -> Result<FilterKind, String> {
    s.parse()
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn apply(cfg: &mut ExperimentConfig, f: &FilterArgs) {
    if let Some(k) = f.filter {
        cfg.filter = k;
    }
    if f.known_pose {
        cfg.known_pose = true;
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the worker pool")?;
    pool.install(f)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load(&common)?;
            let out = cfg.output_dir.join("simulation");
            with_threads(common.threads, || Ok(write_simulation(&cfg, cfg.base_seed, &out)?))?;
            println!("wrote {}", out.display());
        }
        Command::Run { common, filter } => {
            let mut cfg = load(&common)?;
            apply(&mut cfg, &filter);
            let (dir, res) = with_threads(common.threads, || Ok(run_experiment(&cfg, 1)?))?;
            let s = &res[0].summary;
            println!(
                "{}: rmse_pos {:.4} m, mean ESS {:.2} %, final GOSPA VA {:.3} SP {:.3}",
                dir.display(),
                s.rmse_pos,
                s.mean_ess_pct,
                s.final_gospa_va,
                s.final_gospa_sp
            );
        }
        Command::Mc { common, filter, runs } => {
            let mut cfg = load(&common)?;
            apply(&mut cfg, &filter);
            if let Some(r) = runs {
                cfg.n_mc_runs = r;
            }
            let n = cfg.n_mc_runs;
            let (dir, res) = with_threads(common.threads, || Ok(run_experiment(&cfg, n)?))?;
            let mean = |f: &dyn Fn(&radio_slam::experiment::RunSummary) -> f64| {
                res.iter().map(|r| f(&r.summary)).sum::<f64>() / res.len() as f64
            };
            println!(
                "{}: {} runs, mean rmse_pos {:.4} m, mean ESS {:.2} %",
                dir.display(),
                res.len(),
                mean(&|s| s.rmse_pos),
                mean(&|s| s.mean_ess_pct)
            );
        }
        Command::PlotData { out } => {
            for p in plot_data(&out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
