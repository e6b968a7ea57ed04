//! TOML run configuration with strict key checking.

use std::path::{Path, PathBuf};

use geoalign_core::grpo::GrpoConfig;
use geoalign_core::guidance::GuidanceConfig;
use geoalign_core::rewards::RewardConfig;
use geoalign_core::stitching::AlignConfig;
use geoalign_core::toy_world::{Architecture, PretrainConfig, ScenePreset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub hidden: [usize; 2],
    /// Policy checkpoint to start from; pretrained in-process when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            hidden: Architecture::toy().hidden,
            checkpoint: None,
        }
    }
}

impl PolicySection {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            ..Architecture::toy()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuideSection {
    pub seeds: u64,
    pub presets: Vec<ScenePreset>,
}

impl Default for GuideSection {
    fn default() -> Self {
        Self {
            seeds: 20,
            presets: ScenePreset::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StitchSection {
    /// Gaussian perturbation of the searched connector before fine-tuning.
    pub perturb_scale: f64,
}

impl Default for StitchSection {
    fn default() -> Self {
        Self { perturb_scale: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSection {
    pub alphas: Vec<f64>,
    pub seeds: u64,
    pub inputs: usize,
    pub quantization_step: f64,
    /// Stitched checkpoint; searched in-process when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
            seeds: 20,
            inputs: 32,
            quantization_step: 0.05,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRewardsSection {
    pub scenes: Vec<PathBuf>,
    /// Number of toy-world scenes to decode, save and score in addition.
    pub sample_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    /// CSV of correspondences: view_i, view_j, x_i, y_i, x_j, y_j.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matches: Option<PathBuf>,
    pub taus: Vec<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            pred: None,
            gt: None,
            matches: None,
            taus: vec![5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub policy: PolicySection,
    pub pretrain: PretrainConfig,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub guidance: GuidanceConfig,
    pub guide: GuideSection,
    pub stitching: AlignConfig,
    pub stitch: StitchSection,
    pub perturb: PerturbSection,
    pub eval_rewards: EvalRewardsSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a config file, applies the command-line seed, propagates the
    /// global seed into every section and resolves relative paths against
    /// the config's directory.
    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        self.pretrain.seed = self.seed;
        self.grpo.seed = self.seed;
        self.stitching.seed = self.seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.out.iter_mut().for_each(fix);
        self.policy.checkpoint.iter_mut().for_each(fix);
        self.perturb.checkpoint.iter_mut().for_each(fix);
        self.eval_rewards.scenes.iter_mut().for_each(fix);
        self.metrics.pred.iter_mut().for_each(fix);
        self.metrics.gt.iter_mut().for_each(fix);
        self.metrics.matches.iter_mut().for_each(fix);
    }

    pub fn validate(&self, path: &Path) -> CliResult<()> {
        let wrap = |e: geoalign_core::Error| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        self.reward.validate().map_err(wrap)?;
        self.grpo.validate().map_err(wrap)?;
        self.guidance.validate().map_err(wrap)?;
        self.stitching.validate().map_err(wrap)?;
        let fail = |message: &str| {
            Err(CliError::Config {
                path: path.to_path_buf(),
                message: message.to_string(),
            })
        };
        if self.policy.hidden.contains(&0) {
            return fail("policy.hidden widths must be positive");
        }
        if self.pretrain.batch_size == 0 {
            return fail("pretrain.batch_size must be positive");
        }
        if self.perturb.alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return fail("perturb.alphas must be finite and non-negative");
        }
        if !(self.perturb.quantization_step >= 0.0) || !(self.stitch.perturb_scale >= 0.0) {
            return fail("perturb.quantization_step and stitch.perturb_scale must be non-negative");
        }
        if self.perturb.inputs == 0 || self.perturb.seeds == 0 {
            return fail("perturb.inputs and perturb.seeds must be positive");
        }
        if self.metrics.taus.iter().any(|t| !(*t > 0.0)) {
            return fail("metrics.taus must be positive");
        }
        Ok(())
    }

    /// TOML snapshot of every resolved parameter (the output directory is
    /// left out so that runs differing only in location compare equal).
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Write {
            path: "resolved_config.toml".into(),
            message: e.to_string(),
        })
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }
}
