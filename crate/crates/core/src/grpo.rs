//! Group-relative policy optimization over sampler trajectories.
//!
//! Each iteration samples a group of `K` stochastic rollouts for one
//! condition, decodes and scores them, standardizes the two reward channels
//! within the group and takes one gradient-ascent step on the clipped
//! per-step surrogate minus a closed-form KL penalty toward a frozen
//! reference policy.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    sample_trajectory, sigma_t, step_coefficients, step_log_prob, step_mean, LatentTrajectory,
    NoiseSchedule,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rewards::{reward_bundle, GeometryFrame, RewardBundle, RewardConfig};
use crate::toy_world::{PolicyNetwork, ScenePreset, ToyDecoder};

pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub t_train: usize,
    pub t_infer: usize,
    pub sigma_a: f64,
    pub std_floor: f64,
    pub iterations: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Evaluation rollouts per scene preset.
    pub eval_rollouts: usize,
    /// Evaluate every this many iterations (0: only first and last).
    pub eval_every: usize,
    /// Noise level used by evaluation rollouts; 0 means the ODE sampler.
    pub eval_sigma_a: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 1e-3,
            kl_weight: 0.004,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            t_train: 10,
            t_infer: 40,
            sigma_a: 0.7,
            std_floor: 1e-6,
            iterations: 200,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            eval_rollouts: 16,
            eval_every: 0,
            eval_sigma_a: 0.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0) {
            return fail("clip_eps must be positive");
        }
        if !(self.kl_weight >= 0.0) {
            return fail("kl_weight must be non-negative");
        }
        if self.t_train == 0 || self.t_train > self.t_infer {
            return fail("need 1 ≤ t_train ≤ t_infer");
        }
        if !(self.std_floor > 0.0) {
            return fail("std_floor must be positive");
        }
        if !(self.sigma_a > 0.0) {
            return fail("sigma_a must be positive: deterministic rollouts have no importance ratio");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return fail("learning_rate and weight_decay must be non-negative");
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(r − μ)/σ` with population standard deviation; all zeros when `σ` is
/// below `std_floor`.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward"));
    }
    let mu = mean(rewards);
    let var = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / rewards.len() as f64;
    let sigma = var.sqrt();
    if sigma < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mu) / sigma).collect())
}

/// Average of the separately standardized motion and geometry channels.
pub fn dual_advantages(motion: &[f64], geo: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if motion.len() != geo.len() {
        return Err(Error::ShapeMismatch {
            expected: motion.len(),
            got: geo.len(),
        });
    }
    let m = group_advantages(motion, std_floor)?;
    let g = group_advantages(geo, std_floor)?;
    Ok(m.iter().zip(&g).map(|(a, b)| 0.5 * (a + b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub clamped: bool,
}

/// `exp(new − old)` clamped to `[1e-6, 1e6]`.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> Result<Ratio> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(Error::NonFinite("log-probability"));
    }
    let raw = (logp_new - logp_old).exp();
    let value = raw.clamp(RATIO_MIN, RATIO_MAX);
    Ok(Ratio {
        value,
        clamped: value != raw,
    })
}

pub fn clip_ratio(rho: f64, eps: f64) -> f64 {
    rho.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(rho: f64, advantage: f64, eps: f64) -> f64 {
    (rho * advantage).min(clip_ratio(rho, eps) * advantage)
}

/// `∂/∂ρ` of [`clipped_surrogate`]; zero where the clipped branch is active.
fn surrogate_slope(rho: f64, advantage: f64, eps: f64) -> f64 {
    if rho * advantage <= clip_ratio(rho, eps) * advantage {
        advantage
    } else {
        0.0
    }
}

/// Factor `w` with `KL = w·‖v_θ − v_ref‖²` for one step.
fn kl_factor(t: f64, sigma: f64, dt: f64, schedule: &NoiseSchedule) -> f64 {
    let coef = sigma * (1.0 - t) / (2.0 * schedule.clamp(t)) + 1.0 / sigma;
    0.5 * dt * coef * coef
}

/// Per-step KL between two Euler–Maruyama kernels that share their
/// variance, as a function of the velocity difference.
pub fn kl_closed_form(
    v_theta: &[f64],
    v_ref: &[f64],
    t: f64,
    sigma: f64,
    dt: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DegenerateKernel(sigma));
    }
    if v_theta.len() != v_ref.len() {
        return Err(Error::ShapeMismatch {
            expected: v_theta.len(),
            got: v_ref.len(),
        });
    }
    let sq: f64 = v_theta.iter().zip(v_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(kl_factor(t, sigma, dt, schedule) * sq)
}

/// KL between two isotropic Gaussians with equal variance `std²`.
pub fn gaussian_kl_equal_variance(mean_a: &[f64], mean_b: &[f64], std: f64) -> f64 {
    let sq: f64 = mean_a.iter().zip(mean_b).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * std * std)
}

/// K scored rollouts sharing one condition.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub trajectories: Vec<LatentTrajectory>,
    pub frames: Vec<Vec<GeometryFrame>>,
    pub rewards: Vec<RewardBundle>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub ratio_clamps: usize,
}

fn schedule_for(traj: &LatentTrajectory, cfg: &GrpoConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::new(traj.timesteps.clone(), cfg.sigma_a)
}

/// Objective `(1/K)Σ_k (1/T)Σ_t [min(ρA, clip(ρ)A) − β·KL]` and its exact
/// gradient with respect to the policy parameters.
pub fn objective_and_grad(
    policy: &PolicyNetwork,
    ref_policy: &PolicyNetwork,
    trajectories: &[LatentTrajectory],
    advantages: &[f64],
    cfg: &GrpoConfig,
) -> Result<(ObjectiveStats, Vec<f64>)> {
    if trajectories.len() != advantages.len() {
        return Err(Error::ShapeMismatch {
            expected: trajectories.len(),
            got: advantages.len(),
        });
    }
    if trajectories.len() < 2 {
        return Err(Error::GroupTooSmall(trajectories.len()));
    }
    let k = trajectories.len() as f64;
    let per_member: Vec<Result<(ObjectiveStats, usize, Vec<f64>)>> = trajectories
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(traj, &adv)| {
            if traj.deterministic || traj.step_log_probs.len() != traj.steps() {
                return Err(Error::DeterministicTrajectory);
            }
            let schedule = schedule_for(traj, cfg)?;
            let steps = traj.steps();
            let w = 1.0 / (k * steps as f64);
            let mut grad = vec![0.0; policy.params().len()];
            let mut stats = ObjectiveStats::default();
            let mut clipped = 0usize;
            for i in 0..steps {
                let (t, t_next) = (traj.timesteps[i], traj.timesteps[i + 1]);
                let coef = step_coefficients(t, t_next, &schedule)?;
                let x = &traj.states[i];
                let x_next = &traj.states[i + 1];
                let (v, cache) = policy.forward_cached(x, t, &traj.condition)?;
                let v_ref = ref_policy.forward(x, t, &traj.condition)?;
                let mu = step_mean(x, &v, &coef);
                let logp = step_log_prob(x_next, &mu, coef.std)?;
                let ratio = importance_ratio(logp, traj.step_log_probs[i])?;
                if ratio.clamped {
                    stats.ratio_clamps += 1;
                }
                let rho = ratio.value;
                if (rho - clip_ratio(rho, cfg.clip_eps)).abs() > 0.0 {
                    clipped += 1;
                }
                let kl = kl_closed_form(&v, &v_ref, t, sigma_t(t, &schedule), coef.dt, &schedule)?;
                stats.surrogate += w * clipped_surrogate(rho, adv, cfg.clip_eps);
                stats.kl += w * kl;

                // d logp / d v = (x_next − μ)/std² · v_scale; dρ/dlogp = ρ unless clamped.
                let d_rho = if ratio.clamped { 0.0 } else { rho };
                let g_sur = surrogate_slope(rho, adv, cfg.clip_eps) * d_rho;
                let var = coef.std * coef.std;
                let kl_w = kl_factor(t, coef.sigma, coef.dt, &schedule);
                let adjoint: Vec<f64> = (0..v.len())
                    .map(|j| {
                        let dlogp = (x_next[j] - mu[j]) / var * coef.v_scale;
                        w * (g_sur * dlogp - cfg.kl_weight * 2.0 * kl_w * (v[j] - v_ref[j]))
                    })
                    .collect();
                policy.accumulate_grad(&cache, &adjoint, &mut grad)?;
            }
            Ok((stats, clipped, grad))
        })
        .collect();

    let mut total = ObjectiveStats::default();
    let mut clipped = 0usize;
    let mut count = 0usize;
    let mut grad = vec![0.0; policy.params().len()];
    for (r, traj) in per_member.into_iter().zip(trajectories) {
        let (s, c, g) = r?;
        total.surrogate += s.surrogate;
        total.kl += s.kl;
        total.ratio_clamps += s.ratio_clamps;
        clipped += c;
        count += traj.steps();
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    total.objective = total.surrogate - cfg.kl_weight * total.kl;
    total.clip_fraction = clipped as f64 / count as f64;
    Ok((total, grad))
}

/// One ascent step on the group objective. Returns the objective evaluated
/// before the update.
pub fn vggrpo_step(
    policy: &mut PolicyNetwork,
    ref_policy: &PolicyNetwork,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    optimizer: &mut Optimizer,
) -> Result<ObjectiveStats> {
    let (stats, grad) = objective_and_grad(policy, ref_policy, &group.trajectories, &group.advantages, cfg)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient"));
    }
    let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
    optimizer.descend(policy.params_mut(), &ascent);
    Ok(stats)
}

/// Decoders and reward settings standing in for generator + geometry model.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub decoders: Vec<ToyDecoder>,
    pub reward: RewardConfig,
}

impl Default for ToyWorld {
    fn default() -> Self {
        Self {
            decoders: ScenePreset::ALL.iter().map(|p| ToyDecoder::new(*p)).collect(),
            reward: RewardConfig::default(),
        }
    }
}

impl ToyWorld {
    pub fn decoder(&self, preset: ScenePreset) -> &ToyDecoder {
        &self.decoders[preset.index()]
    }

    pub fn score(&self, preset: ScenePreset, latent: &[f64]) -> Result<(Vec<GeometryFrame>, RewardBundle)> {
        let frames = self.decoder(preset).decode(latent)?;
        let bundle = reward_bundle(&frames, &self.reward)?;
        Ok((frames, bundle))
    }
}

/// Samples, decodes and scores one group.
pub fn collect_group(
    world: &ToyWorld,
    policy: &PolicyNetwork,
    preset: ScenePreset,
    seeds: &[u64],
    schedule: &NoiseSchedule,
    std_floor: f64,
) -> Result<RolloutGroup> {
    let cond = preset.condition();
    let scored: Vec<Result<(LatentTrajectory, Vec<GeometryFrame>, RewardBundle)>> = seeds
        .par_iter()
        .map(|seed| {
            let traj = sample_trajectory(policy, schedule, &cond, *seed)?;
            let (frames, bundle) = world.score(preset, traj.final_latent())?;
            Ok((traj, frames, bundle))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(seeds.len());
    let mut frames = Vec::with_capacity(seeds.len());
    let mut rewards = Vec::with_capacity(seeds.len());
    for item in scored {
        let (t, f, r) = item?;
        trajectories.push(t);
        frames.push(f);
        rewards.push(r);
    }
    let motion: Vec<f64> = rewards.iter().map(|r| r.r_motion).collect();
    let geo: Vec<f64> = rewards.iter().map(|r| r.r_geo).collect();
    let advantages = dual_advantages(&motion, &geo, std_floor)?;
    Ok(RolloutGroup {
        trajectories,
        frames,
        rewards,
        advantages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_r_motion: f64,
    pub mean_r_geo: f64,
    pub mean_advantage: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of updates applied before this evaluation.
    pub iteration: usize,
    pub mean_r_motion: f64,
    pub mean_r_geo: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub iterations: Vec<IterationRecord>,
    pub evaluations: Vec<EvalRecord>,
    /// Wall-clock milliseconds per iteration; kept apart from the
    /// deterministic records.
    pub wall_time_ms: Vec<u64>,
}

/// Mean evaluation rewards over all presets with `t_infer` sampler steps.
pub fn evaluate(world: &ToyWorld, policy: &PolicyNetwork, cfg: &GrpoConfig) -> Result<(f64, f64)> {
    let schedule = NoiseSchedule::uniform(cfg.t_infer, cfg.eval_sigma_a)?;
    let mut motion = Vec::new();
    let mut geo = Vec::new();
    for preset in ScenePreset::ALL {
        let cond = preset.condition();
        let results: Vec<Result<RewardBundle>> = (0..cfg.eval_rollouts)
            .into_par_iter()
            .map(|i| {
                let seed = eval_seed(cfg.seed, preset, i);
                let traj = sample_trajectory(policy, &schedule, &cond, seed)?;
                world.score(preset, traj.final_latent()).map(|(_, b)| b)
            })
            .collect();
        for r in results {
            let b = r?;
            motion.push(b.r_motion);
            geo.push(b.r_geo);
        }
    }
    Ok((mean(&motion), mean(&geo)))
}

fn eval_seed(seed: u64, preset: ScenePreset, i: usize) -> u64 {
    // Disjoint from the training stream, identical across evaluations.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1_0000_0000);
    rng.set_word_pos(((preset.index() * 1_000_000 + i) * 16) as u128);
    rng.gen()
}

/// Full alignment loop. The reference policy is the input snapshot; the
/// old policy for importance ratios is the snapshot used for each rollout.
pub fn train(world: &ToyWorld, policy: PolicyNetwork, cfg: &GrpoConfig) -> Result<(PolicyNetwork, TrainingLog)> {
    train_with_callback(world, policy, cfg, |_| {})
}

pub fn train_with_callback(
    world: &ToyWorld,
    mut policy: PolicyNetwork,
    cfg: &GrpoConfig,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<(PolicyNetwork, TrainingLog)> {
    cfg.validate()?;
    let ref_policy = policy.clone();
    let schedule = NoiseSchedule::uniform(cfg.t_train, cfg.sigma_a)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.params().len(), cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();

    let (m0, g0) = evaluate(world, &policy, cfg)?;
    log.evaluations.push(EvalRecord {
        iteration: 0,
        mean_r_motion: m0,
        mean_r_geo: g0,
    });

    for it in 0..cfg.iterations {
        let started = Instant::now();
        let preset = ScenePreset::ALL[it % ScenePreset::ALL.len()];
        let seeds: Vec<u64> = (0..cfg.group_size).map(|_| rng.gen()).collect();
        let group = collect_group(world, &policy, preset, &seeds, &schedule, cfg.std_floor)?;
        let stats = vggrpo_step(&mut policy, &ref_policy, &group, cfg, &mut optimizer)?;
        let record = IterationRecord {
            iteration: it,
            mean_r_motion: mean(&group.rewards.iter().map(|r| r.r_motion).collect::<Vec<_>>()),
            mean_r_geo: mean(&group.rewards.iter().map(|r| r.r_geo).collect::<Vec<_>>()),
            mean_advantage: mean(&group.advantages),
            kl: stats.kl,
            clip_fraction: stats.clip_fraction,
        };
        on_iteration(&record);
        log.iterations.push(record);
        let done = it + 1;
        if done == cfg.iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let (m, g) = evaluate(world, &policy, cfg)?;
            log.evaluations.push(EvalRecord {
                iteration: done,
                mean_r_motion: m,
                mean_r_geo: g,
            });
        }
        log.wall_time_ms.push(started.elapsed().as_millis() as u64);
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::Architecture;
    use approx::assert_abs_diff_eq;

    #[test]
    fn advantages_example() {
        let a = group_advantages(&[1.0, 2.0, 3.0, 4.0], 1e-6).unwrap();
        let expected = [-1.341641, -0.447214, 0.447214, 1.341641];
        for (x, e) in a.iter().zip(expected) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-6);
        }
        assert_eq!(group_advantages(&[2.0; 5], 1e-6).unwrap(), vec![0.0; 5]);
        assert_eq!(group_advantages(&[1.0], 1e-6), Err(Error::GroupTooSmall(1)));
        let shifted: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|r| 3.0 * r + 7.0).collect();
        for (x, y) in a.iter().zip(group_advantages(&shifted, 1e-6).unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_advantage_cases() {
        let r = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(dual_advantages(&r, &r, 1e-6).unwrap(), group_advantages(&r, 1e-6).unwrap());
        let half: Vec<f64> = group_advantages(&r, 1e-6).unwrap().iter().map(|a| 0.5 * a).collect();
        assert_eq!(dual_advantages(&r, &[0.3; 4], 1e-6).unwrap(), half);
        assert!(dual_advantages(&r, &r[..3], 1e-6).is_err());
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(importance_ratio(-3.0, -3.0).unwrap().value, 1.0);
        assert_abs_diff_eq!(importance_ratio(2f64.ln(), 0.0).unwrap().value, 2.0, epsilon = 1e-15);
        let big = importance_ratio(50.0, 0.0).unwrap();
        assert_eq!(big.value, 1e6);
        assert!(big.clamped);
        assert!(importance_ratio(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn surrogate_cases() {
        assert_eq!(clipped_surrogate(1.0, 1.0, 1e-3), 1.0);
        assert_abs_diff_eq!(clipped_surrogate(1.5, 1.0, 1e-3), 1.001, epsilon = 1e-15);
        assert_abs_diff_eq!(clipped_surrogate(0.5, -1.0, 1e-3), -0.999, epsilon = 1e-15);
    }

    #[test]
    fn kl_cases() {
        let s = NoiseSchedule::uniform(10, 1.0).unwrap();
        assert_eq!(kl_closed_form(&[1.0, 2.0], &[1.0, 2.0], 0.5, 1.0, 0.1, &s).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_closed_form(&[2.0, 0.0], &[0.0, 0.0], 0.5, 1.0, 0.1, &s).unwrap(),
            0.45,
            epsilon = 1e-14
        );
        assert_eq!(kl_closed_form(&[1.0], &[0.0], 0.5, 0.0, 0.1, &s), Err(Error::DegenerateKernel(0.0)));
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            latent_dim: 2,
            cond_dim: 1,
            hidden: [3, 2],
        }
    }

    #[test]
    fn on_policy_objective_is_mean_advantage() {
        let net = PolicyNetwork::init(tiny_arch(), 1);
        let s = NoiseSchedule::uniform(5, 0.7).unwrap();
        let trajs: Vec<_> = (0..4).map(|i| sample_trajectory(&net, &s, &[1.0], i).unwrap()).collect();
        let adv = group_advantages(&[0.1, 0.5, 0.2, 0.9], 1e-6).unwrap();
        let cfg = GrpoConfig::default();
        let (stats, _) = objective_and_grad(&net, &net, &trajs, &adv, &cfg).unwrap();
        assert!(stats.surrogate.abs() < 1e-12);
        assert_eq!(stats.kl, 0.0);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_without_kl_leaves_parameters() {
        let mut net = PolicyNetwork::init(tiny_arch(), 2);
        let reference = net.clone();
        let s = NoiseSchedule::uniform(5, 0.7).unwrap();
        let trajs: Vec<_> = (0..3).map(|i| sample_trajectory(&net, &s, &[1.0], i).unwrap()).collect();
        let group = RolloutGroup {
            trajectories: trajs,
            frames: vec![],
            rewards: vec![],
            advantages: vec![0.0; 3],
        };
        let cfg = GrpoConfig {
            kl_weight: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, net.params().len(), 0.1, 0.0);
        vggrpo_step(&mut net, &reference, &group, &cfg, &mut opt).unwrap();
        assert_eq!(net, reference);
    }

    #[test]
    fn deterministic_trajectories_rejected() {
        let net = PolicyNetwork::init(tiny_arch(), 3);
        let s = NoiseSchedule::uniform(5, 0.0).unwrap();
        let trajs: Vec<_> = (0..2).map(|i| sample_trajectory(&net, &s, &[1.0], i).unwrap()).collect();
        let r = objective_and_grad(&net, &net, &trajs, &[1.0, -1.0], &GrpoConfig::default());
        assert_eq!(r.unwrap_err(), Error::DeterministicTrajectory);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let arch = Architecture {
            latent_dim: 1,
            cond_dim: 1,
            hidden: [1, 1],
        };
        // 1·3+1 + 1+1 + 1+1 = 8 parameters; the policy is perturbed away from
        // the rollout policy so ratios differ from one.
        let old = PolicyNetwork::init(arch, 4);
        let mut cur = old.clone();
        cur.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += 0.01 * (i as f64 - 3.0));
        let reference = PolicyNetwork::init(arch, 5);
        let s = NoiseSchedule::uniform(6, 0.7).unwrap();
        let trajs: Vec<_> = (0..4).map(|i| sample_trajectory(&old, &s, &[1.0], 10 + i).unwrap()).collect();
        let adv = [1.2, -0.4, 0.3, -1.1];
        let cfg = GrpoConfig {
            clip_eps: 0.5,
            kl_weight: 0.3,
            ..Default::default()
        };
        let (_, g) = objective_and_grad(&cur, &reference, &trajs, &adv, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..g.len() {
            let eval = |d: f64| {
                let mut n = cur.clone();
                n.params_mut()[i] += d;
                objective_and_grad(&n, &reference, &trajs, &adv, &cfg).unwrap().0.objective
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / scale < 1e-3, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}
