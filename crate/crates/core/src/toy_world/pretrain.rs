//! Flow-matching pretraining of the toy policy on a latent prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fm_loss_and_grad, FmSample};
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};

use super::decoder::{ScenePreset, LATENT_DIM};
use super::policy::PolicyNetwork;

/// Per-condition Gaussian mixture over latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrior {
    /// `components[c]` lists `(mean, std)` pairs for condition `c`, equally weighted.
    pub components: Vec<Vec<(Vec<f64>, f64)>>,
}

impl LatentPrior {
    /// Two modes per scene preset, differing in path bend. Both carry the
    /// same systematic jitter and depth bias for alignment to remove.
    pub fn default_mixture() -> Self {
        const PATH: [f64; 6] = [0.3, -0.2, 0.1, -0.2, 0.3, 0.1];
        const JITTER: [f64; 6] = [0.5, -0.25, 0.15, 0.2, 0.3, -0.15];
        let components = ScenePreset::ALL
            .iter()
            .map(|preset| {
                let flip = if preset.index() % 2 == 0 { 1.0 } else { -1.0 };
                [1.0, -1.0]
                    .iter()
                    .map(|s| {
                        let mut mean = Vec::with_capacity(LATENT_DIM);
                        mean.extend(PATH.iter().map(|v| v * s));
                        mean.extend(JITTER.iter().map(|v| v * flip));
                        mean.extend([0.6 * flip, -0.4 * flip]);
                        mean.extend([0.5, 0.3 * s]);
                        (mean, 0.15)
                    })
                    .collect()
            })
            .collect();
        Self { components }
    }

    pub fn sample(&self, cond_index: usize, rng: &mut impl Rng) -> Vec<f64> {
        let comps = &self.components[cond_index];
        let (mean, std) = &comps[rng.gen_range(0..comps.len())];
        let normal = Normal::new(0.0, *std).expect("positive std");
        mean.iter().map(|m| m + normal.sample(rng)).collect()
    }

    pub fn condition_count(&self) -> usize {
        self.components.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

impl PretrainLog {
    /// Mean minibatch loss over a window at the start (`head`) or end.
    pub fn window_mean(&self, len: usize, head: bool) -> f64 {
        let n = len.min(self.losses.len()).max(1);
        let slice = if head {
            &self.losses[..n]
        } else {
            &self.losses[self.losses.len() - n..]
        };
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

fn draw_batch(prior: &LatentPrior, rng: &mut ChaCha8Rng, size: usize) -> Vec<FmSample> {
    (0..size)
        .map(|_| {
            let c = rng.gen_range(0..prior.condition_count());
            let x0 = prior.sample(c, rng);
            let eps = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
            let mut cond = vec![0.0; prior.condition_count()];
            cond[c] = 1.0;
            FmSample {
                x0,
                eps,
                t: rng.gen_range(0.0..1.0),
                cond,
            }
        })
        .collect()
}

/// Adam with cosine decay on the flow-matching loss. Deterministic in
/// `(policy, prior, cfg)`.
pub fn pretrain_flow(mut policy: PolicyNetwork, prior: &LatentPrior, cfg: &PretrainConfig) -> Result<(PolicyNetwork, PretrainLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if prior.condition_count() != policy.architecture().cond_dim {
        return Err(Error::ShapeMismatch {
            expected: policy.architecture().cond_dim,
            got: prior.condition_count(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, policy.params().len(), cfg.learning_rate, 0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(prior, &mut rng, cfg.batch_size);
        let (loss, grad) = fm_loss_and_grad(&policy, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("flow-matching loss"));
        }
        losses.push(loss);
        opt.set_lr(cosine_lr(cfg.learning_rate, step, cfg.steps));
        opt.descend(policy.params_mut(), &grad);
    }
    Ok((policy, PretrainLog { losses }))
}

/// Loss on a fixed held-out batch, for before/after comparisons.
pub fn evaluation_loss(policy: &PolicyNetwork, prior: &LatentPrior, seed: u64, size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = draw_batch(prior, &mut rng, size);
    fm_loss_and_grad(policy, &batch).map(|(l, _)| l)
}
