//! Experiment commands. Each writes its payload, a resolved-config
//! snapshot and a timing metadata file into the run directory.

mod align;
mod eval_rewards;
mod guide;
mod metrics;
mod perturb;
mod pretrain;
mod stitch;

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use geoalign_core::formats::{Checkpoint, SceneTrajectory};
use geoalign_core::toy_world::{pretrain_flow, LatentPrior, PolicyNetwork, COND_DIM, LATENT_DIM};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{RunDir, CONFIG_SNAPSHOT_FILE};

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: the configured `out`, else runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Flow-matching pretraining of the toy policy.
    Pretrain(RunArgs),
    /// Group-relative policy optimization with geometry rewards.
    Align(RunArgs),
    /// Motion and geometry rewards of scene files.
    EvalRewards(RunArgs),
    /// Stitch-layer search and multi-task fine-tuning.
    Stitch(RunArgs),
    /// Paired guided and unguided sampling.
    Guide(RunArgs),
    /// Latent-perturbation robustness of stitched and reference pipelines.
    Perturb(RunArgs),
    /// Pose accuracy and epipolar metrics of predicted scenes.
    Metrics(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Align(_) => "align",
            Command::EvalRewards(_) => "eval-rewards",
            Command::Stitch(_) => "stitch",
            Command::Guide(_) => "guide",
            Command::Perturb(_) => "perturb",
            Command::Metrics(_) => "metrics",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Pretrain(a)
            | Command::Align(a)
            | Command::EvalRewards(a)
            | Command::Stitch(a)
            | Command::Guide(a)
            | Command::Perturb(a)
            | Command::Metrics(a) => a,
        }
    }
}

pub fn run(command: &Command) -> CliResult<()> {
    let args = command.args();
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| Path::new("runs").join(command.name()));
    let dir = RunDir::create(&out)?;
    dir.write(CONFIG_SNAPSHOT_FILE, cfg.to_toml()?)?;
    log::info!("{} -> {}", command.name(), out.display());
    let details = match command {
        Command::Pretrain(_) => pretrain::run(&cfg, &dir)?,
        Command::Align(_) => align::run(&cfg, &dir)?,
        Command::EvalRewards(_) => eval_rewards::run(&cfg, &dir)?,
        Command::Stitch(_) => stitch::run(&cfg, &dir)?,
        Command::Guide(_) => guide::run(&cfg, &dir)?,
        Command::Perturb(_) => perturb::run(&cfg, &dir)?,
        Command::Metrics(_) => metrics::run(&cfg, &dir)?,
    };
    dir.write_metadata(command.name(), details)
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn in_file<T>(path: &Path, r: geoalign_core::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn load_scene(path: &Path) -> CliResult<SceneTrajectory> {
    let text = read_text(path)?;
    in_file(path, SceneTrajectory::from_json(&text))
}

pub(crate) fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = read_text(path)?;
    in_file(path, Checkpoint::from_json(&text))
}

/// Policy from `policy.checkpoint`, or pretrained in-process.
pub(crate) fn starting_policy(cfg: &RunConfig) -> CliResult<PolicyNetwork> {
    if let Some(path) = &cfg.policy.checkpoint {
        let policy = in_file(path, load_checkpoint(path)?.policy())?;
        let arch = policy.architecture();
        if arch.latent_dim != LATENT_DIM || arch.cond_dim != COND_DIM {
            let source = geoalign_core::Error::ShapeMismatch {
                expected: LATENT_DIM + COND_DIM,
                got: arch.latent_dim + arch.cond_dim,
            };
            return Err(CliError::Input { path: path.clone(), source });
        }
        return Ok(policy);
    }
    log::info!("no policy checkpoint configured; pretraining for {} steps", cfg.pretrain.steps);
    let init = PolicyNetwork::init(cfg.policy.architecture(), cfg.seed);
    Ok(pretrain_flow(init, &LatentPrior::default_mixture(), &cfg.pretrain)?.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
