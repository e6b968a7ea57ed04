//! Test-time reward guidance: sparse finite-difference reward gradients
//! added to the sampler's velocity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{seeded_noise, NoiseSchedule, VelocityField};
use crate::rewards::{reward_bundle, RewardConfig};
use crate::stitching::{stitched_predict, StitchedModel};
use crate::toy_world::ToyDecoder;
use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub s_reward: f64,
    pub guidance_interval: usize,
    pub total_steps: usize,
    pub cfg_scale: f64,
    pub lambda_motion: f64,
    pub lambda_geo: f64,
    pub fd_step: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_reward: 1.0,
            guidance_interval: 20,
            total_steps: 50,
            cfg_scale: 1.0,
            lambda_motion: 1.0,
            lambda_geo: 1.0,
            fd_step: 1e-3,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guidance_interval == 0 {
            return Err(Error::Config("guidance_interval must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config("fd_step must be positive".into()));
        }
        if !self.s_reward.is_finite() || !self.cfg_scale.is_finite() {
            return Err(Error::Config("s_reward and cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// A scalar reward on latents.
pub trait LatentReward: Sync {
    fn latent_dim(&self) -> usize;
    fn reward(&self, z: &[f64]) -> Result<f64>;
}

/// `λ_motion·r_motion + λ_geo·r_geo` of the decoded frames.
#[derive(Debug, Clone)]
pub struct DecoderReward<'a> {
    pub decoder: &'a ToyDecoder,
    pub config: RewardConfig,
    pub lambda_motion: f64,
    pub lambda_geo: f64,
}

impl LatentReward for DecoderReward<'_> {
    fn latent_dim(&self) -> usize {
        self.decoder.latent_dim()
    }

    fn reward(&self, z: &[f64]) -> Result<f64> {
        let b = reward_bundle(&self.decoder.decode(z)?, &self.config)?;
        Ok(self.lambda_motion * b.r_motion + self.lambda_geo * b.r_geo)
    }
}

/// Same combination evaluated on a stitched model's predictions.
#[derive(Debug, Clone)]
pub struct StitchedReward<'a> {
    pub model: &'a StitchedModel,
    pub config: RewardConfig,
    pub lambda_motion: f64,
    pub lambda_geo: f64,
}

impl LatentReward for StitchedReward<'_> {
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn reward(&self, z: &[f64]) -> Result<f64> {
        let frames = stitched_predict(self.model, &DVector::from_column_slice(z))?;
        let b = reward_bundle(&frames, &self.config)?;
        Ok(self.lambda_motion * b.r_motion + self.lambda_geo * b.r_geo)
    }
}

/// `−‖z − target‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticReward {
    pub target: Vec<f64>,
}

impl LatentReward for QuadraticReward {
    fn latent_dim(&self) -> usize {
        self.target.len()
    }

    fn reward(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.target.len() {
            return Err(Error::ShapeMismatch {
                expected: self.target.len(),
                got: z.len(),
            });
        }
        Ok(-z.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }
}

/// Coordinate-wise central differences with step `h`.
pub fn reward_gradient<R: LatentReward + ?Sized>(reward: &R, z: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    if z.len() != reward.latent_dim() {
        return Err(Error::ShapeMismatch {
            expected: reward.latent_dim(),
            got: z.len(),
        });
    }
    (0..z.len())
        .into_par_iter()
        .map(|i| {
            let probe = |d: f64| {
                let mut zp = z.to_vec();
                zp[i] += d;
                reward.reward(&zp).map_err(|e| Error::RewardProbe {
                    index: i,
                    source: Box::new(e),
                })
            };
            Ok((probe(h)? - probe(-h)?) / (2.0 * h))
        })
        .collect()
}

/// `v_uncond + scale·(v_cond − v_uncond)`.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::ShapeMismatch {
            expected: v_cond.len(),
            got: v_uncond.len(),
        });
    }
    if scale == 1.0 {
        return Ok(v_cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(v_uncond.to_vec());
    }
    Ok(v_cond.iter().zip(v_uncond).map(|(c, u)| u + scale * (c - u)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedSample {
    pub states: Vec<Vec<f64>>,
    pub timesteps: Vec<f64>,
    /// Step indices at which guidance was applied.
    pub guided_steps: Vec<usize>,
}

impl GuidedSample {
    pub fn final_latent(&self) -> &[f64] {
        self.states.last().expect("sample has states")
    }
}

/// Indices `i` with `(i + 1) mod k = 0` whose time lies below the
/// schedule's upper clamp.
pub fn guidance_steps(schedule: &NoiseSchedule, interval: usize) -> Vec<usize> {
    (0..schedule.steps())
        .filter(|i| (i + 1) % interval == 0 && schedule.timesteps[*i] < schedule.t_max)
        .collect()
}

/// Euler sampler from seeded noise. At guidance steps the velocity becomes
/// `v − s·(t/(1−t))·∇r(z_t)` with `t` clamped as in the flow sampler.
pub fn guided_sample<F: VelocityField + ?Sized, R: LatentReward + ?Sized>(
    policy: &F,
    reward: &R,
    cond: &[f64],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<GuidedSample> {
    cfg.validate()?;
    let schedule = NoiseSchedule::uniform(cfg.total_steps, 0.0)?;
    let steps = guidance_steps(&schedule, cfg.guidance_interval);
    let (x_init, _) = seeded_noise(seed, policy.latent_dim(), 0);
    let uncond = vec![0.0; cond.len()];
    let mut states = vec![x_init];
    let mut guided = Vec::new();
    for (i, w) in schedule.timesteps.windows(2).enumerate() {
        let (t, dt) = (w[0], w[0] - w[1]);
        let x = states.last().expect("non-empty");
        let v_cond = policy.velocity(x, t, cond)?;
        let mut v = if cfg.cfg_scale == 1.0 {
            v_cond
        } else {
            cfg_combine(&v_cond, &policy.velocity(x, t, &uncond)?, cfg.cfg_scale)?
        };
        if cfg.s_reward != 0.0 && steps.contains(&i) {
            let tc = schedule.clamp(t);
            let factor = cfg.s_reward * tc / (1.0 - tc);
            let grad = reward_gradient(reward, x, cfg.fd_step)?;
            v.iter_mut().zip(&grad).for_each(|(vi, g)| *vi -= factor * g);
            guided.push(i);
        }
        let next: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi - dt * vi).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("guided sampler state"));
        }
        states.push(next);
    }
    Ok(GuidedSample {
        states,
        timesteps: schedule.timesteps,
        guided_steps: guided,
    })
}

/// One-sided sign-test p-value for `wins` successes out of `wins + losses`
/// paired comparisons (ties dropped): `P(X ≥ wins)` with `X ~ Bin(n, ½)`.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut coeff = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += coeff;
        }
        coeff = coeff * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ode_sample;
    use crate::toy_world::{Architecture, PolicyNetwork, ScenePreset};

    struct Constant;
    impl LatentReward for Constant {
        fn latent_dim(&self) -> usize {
            3
        }
        fn reward(&self, _: &[f64]) -> Result<f64> {
            Ok(2.5)
        }
    }

    struct Failing;
    impl LatentReward for Failing {
        fn latent_dim(&self) -> usize {
            2
        }
        fn reward(&self, z: &[f64]) -> Result<f64> {
            if z[1] > 0.0 {
                Err(Error::NonFinite("probe"))
            } else {
                Ok(0.0)
            }
        }
    }

    #[test]
    fn quadratic_gradient_and_convergence_order() {
        let r = QuadraticReward {
            target: vec![0.5, -1.0, 2.0],
        };
        let z = [1.0, 1.0, -1.0];
        let oracle: Vec<f64> = z.iter().zip(&r.target).map(|(a, b)| -2.0 * (a - b)).collect();
        let g = reward_gradient(&r, &z, 1e-3).unwrap();
        for (a, b) in g.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(reward_gradient(&Constant, &[0.1, 0.2, 0.3], 1e-3).unwrap().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn fd_error_shrinks_quadratically() {
        struct Cubic;
        impl LatentReward for Cubic {
            fn latent_dim(&self) -> usize {
                1
            }
            fn reward(&self, z: &[f64]) -> Result<f64> {
                Ok(z[0].powi(3))
            }
        }
        // d/dz z³ = 3z²; central-difference error is exactly h².
        let err = |h: f64| (reward_gradient(&Cubic, &[0.7], h).unwrap()[0] - 3.0 * 0.49).abs();
        for h in [1e-2, 1e-3] {
            let ratio = err(h) / err(h / 2.0);
            assert!((ratio - 4.0).abs() < 0.05, "h {h}: ratio {ratio}");
        }
    }

    #[test]
    fn probe_failures_carry_the_coordinate() {
        match reward_gradient(&Failing, &[0.0, 0.0], 1e-3) {
            Err(Error::RewardProbe { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p_value(0, 0), 1.0);
        assert!((sign_test_p_value(20, 0) - 0.5f64.powi(20)).abs() < 1e-18);
        // P(X ≥ 15 | n = 20) = 21700 / 2²⁰.
        assert!((sign_test_p_value(15, 5) - 21700.0 / 1048576.0).abs() < 1e-15);
        assert!(sign_test_p_value(14, 6) > 0.05);
    }

    #[test]
    fn cfg_cases() {
        assert_eq!(cfg_combine(&[3.0], &[1.0], 1.0).unwrap(), vec![3.0]);
        assert_eq!(cfg_combine(&[3.0], &[1.0], 0.0).unwrap(), vec![1.0]);
        assert_eq!(cfg_combine(&[3.0], &[1.0], 2.0).unwrap(), vec![5.0]);
        assert!(cfg_combine(&[3.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn jitter_gradient_points_toward_smoothness() {
        let decoder = ToyDecoder::new(ScenePreset::StaticIndoor);
        let reward = DecoderReward {
            decoder: &decoder,
            config: RewardConfig::default(),
            lambda_motion: 1.0,
            lambda_geo: 0.0,
        };
        for j in 6..12 {
            let mut z = vec![0.0; 16];
            z[j] = 0.5;
            let g = reward_gradient(&reward, &z, 1e-3).unwrap();
            assert!(g[j] < 0.0, "coordinate {j}: {}", g[j]);
        }
    }

    fn policy() -> PolicyNetwork {
        PolicyNetwork::init(
            Architecture {
                latent_dim: 3,
                cond_dim: 2,
                hidden: [8, 8],
            },
            7,
        )
    }

    #[test]
    fn zero_strength_reproduces_unguided_sampler() {
        let p = policy();
        let r = QuadraticReward { target: vec![1.0; 3] };
        let cfg = GuidanceConfig {
            s_reward: 0.0,
            ..Default::default()
        };
        let g = guided_sample(&p, &r, &[1.0, 0.0], &cfg, 11).unwrap();
        let (x0, _) = seeded_noise(11, 3, 0);
        let plain = ode_sample(&p, &g.timesteps, &[1.0, 0.0], &x0).unwrap();
        assert_eq!(g.states, plain);
        assert!(g.guided_steps.is_empty());
    }

    #[test]
    fn guidance_step_indices() {
        let s = NoiseSchedule::uniform(50, 0.0).unwrap();
        assert_eq!(guidance_steps(&s, 20), vec![19, 39]);
        for (n, k) in [(50, 7), (40, 3), (10, 2)] {
            let s = NoiseSchedule::uniform(n, 0.0).unwrap();
            let steps = guidance_steps(&s, k);
            assert_eq!(steps.len(), n / k);
            assert!(steps.iter().all(|i| s.timesteps[*i] < s.t_max));
        }
    }

    #[test]
    fn guidance_moves_toward_quadratic_target() {
        let p = policy();
        let r = QuadraticReward {
            target: vec![2.0, -2.0, 1.0],
        };
        let cfg = GuidanceConfig {
            s_reward: 1.0,
            ..Default::default()
        };
        let off = GuidanceConfig { s_reward: 0.0, ..cfg };
        for seed in 0..5 {
            let a = guided_sample(&p, &r, &[0.0, 1.0], &cfg, seed).unwrap();
            let b = guided_sample(&p, &r, &[0.0, 1.0], &off, seed).unwrap();
            assert_eq!(a.guided_steps, vec![19, 39]);
            assert!(r.reward(a.final_latent()).unwrap() > r.reward(b.final_latent()).unwrap());
        }
    }
}
