//! Rectified-flow objective and samplers.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). The stochastic sampler
//! is the Euler–Maruyama discretization of the marginal-preserving SDE with
//! diffusion `σ_t = a·√(t/(1−t))`; every step is an isotropic Gaussian with
//! a tractable log-density. With `a = 0` it is the plain Euler ODE solver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy_world::policy::PolicyNetwork;

/// Name of the per-rollout noise generator, recorded in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng(seed_from_u64)";

/// Anything that predicts a velocity for a latent at time `t`.
pub trait VelocityField {
    fn latent_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Strictly decreasing from 1 to 0.
    pub timesteps: Vec<f64>,
    pub a: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    pub const DEFAULT_T_MIN: f64 = 0.02;
    pub const DEFAULT_T_MAX: f64 = 0.98;

    /// `steps` uniform intervals from 1 down to 0.
    pub fn uniform(steps: usize, a: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        let mut timesteps: Vec<f64> = (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect();
        timesteps[steps] = 0.0;
        Self::new(timesteps, a)
    }

    pub fn new(timesteps: Vec<f64>, a: f64) -> Result<Self> {
        let s = Self {
            timesteps,
            a,
            t_min: Self::DEFAULT_T_MIN,
            t_max: Self::DEFAULT_T_MAX,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ts = &self.timesteps;
        if ts.len() < 2 || ts[0] != 1.0 || *ts.last().expect("nonempty") != 0.0 {
            return Err(Error::InvalidSchedule("timesteps must run from exactly 1 to exactly 0".into()));
        }
        if ts.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidSchedule("timesteps must be strictly decreasing".into()));
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::InvalidSchedule("noise level a must be finite and ≥ 0".into()));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::InvalidSchedule("need 0 < t_min < t_max < 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }
}

pub fn forward_interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect())
}

pub fn sigma_t(t: f64, schedule: &NoiseSchedule) -> f64 {
    let tc = schedule.clamp(t);
    schedule.a * (tc / (1.0 - tc)).sqrt()
}

/// Coefficients of the step mean `x − Δt·(v + c·(x + (1−t)·v))`, written as
/// `mean = x·(1 − Δt·c) − Δt·(1 + c·(1−t))·v` with `c = σ_t²/(2t′)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub x_scale: f64,
    pub v_scale: f64,
    pub std: f64,
    pub sigma: f64,
    pub dt: f64,
}

pub fn step_coefficients(t: f64, t_next: f64, schedule: &NoiseSchedule) -> Result<StepCoefficients> {
    if !(t > t_next) {
        return Err(Error::ScheduleOrder { t, t_next });
    }
    let dt = t - t_next;
    let sigma = sigma_t(t, schedule);
    let c = sigma * sigma / (2.0 * schedule.clamp(t));
    Ok(StepCoefficients {
        x_scale: 1.0 - dt * c,
        v_scale: -dt * (1.0 + c * (1.0 - t)),
        std: sigma * dt.sqrt(),
        sigma,
        dt,
    })
}

pub fn step_mean(x: &[f64], v: &[f64], coef: &StepCoefficients) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| coef.x_scale * xi + coef.v_scale * vi).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// One Euler–Maruyama step from `t` to `t_next < t` with caller-supplied
/// standard-normal `noise`.
pub fn sde_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    t_next: f64,
    noise: &[f64],
    cond: &[f64],
    schedule: &NoiseSchedule,
) -> Result<StepOutput> {
    if noise.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            got: noise.len(),
        });
    }
    let coef = step_coefficients(t, t_next, schedule)?;
    let v = field.velocity(x, t, cond)?;
    let mean = if coef.sigma == 0.0 {
        // Exactly the Euler ODE update.
        x.iter().zip(&v).map(|(xi, vi)| xi - coef.dt * vi).collect()
    } else {
        step_mean(x, &v, &coef)
    };
    let x_next = mean.iter().zip(noise).map(|(m, n)| m + coef.std * n).collect();
    Ok(StepOutput {
        x_next,
        mean,
        std: coef.std,
    })
}

/// Log-density of an isotropic Gaussian.
pub fn step_log_prob(x_next: &[f64], mean: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::DegenerateKernel(std));
    }
    if x_next.len() != mean.len() {
        return Err(Error::ShapeMismatch {
            expected: mean.len(),
            got: x_next.len(),
        });
    }
    let d = mean.len() as f64;
    let sq: f64 = x_next.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let var = std * std;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

/// One rollout through the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    /// `x_{t_T}, …, x_{t_0}`; one more entry than there are steps.
    pub states: Vec<Vec<f64>>,
    pub timesteps: Vec<f64>,
    pub step_means: Vec<Vec<f64>>,
    pub step_stds: Vec<f64>,
    /// Empty when `deterministic`.
    pub step_log_probs: Vec<f64>,
    pub condition: Vec<f64>,
    pub seed: u64,
    /// Set when the sampler had no noise (`a = 0`).
    pub deterministic: bool,
}

impl LatentTrajectory {
    pub fn final_latent(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Initial latent and per-step noise for a seed; the same stream feeds both
/// the stochastic and the deterministic samplers.
pub fn seeded_noise(seed: u64, dim: usize, steps: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = standard_normal(&mut rng, dim);
    let noise = (0..steps).map(|_| standard_normal(&mut rng, dim)).collect();
    (x0, noise)
}

pub fn sample_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    schedule: &NoiseSchedule,
    cond: &[f64],
    seed: u64,
) -> Result<LatentTrajectory> {
    schedule.validate()?;
    let dim = field.latent_dim();
    let steps = schedule.steps();
    let (x_init, noise) = seeded_noise(seed, dim, steps);
    let deterministic = schedule.a == 0.0;
    let mut states = Vec::with_capacity(steps + 1);
    let mut step_means = Vec::with_capacity(steps);
    let mut step_stds = Vec::with_capacity(steps);
    let mut step_log_probs = Vec::with_capacity(steps);
    states.push(x_init);
    for (i, w) in schedule.timesteps.windows(2).enumerate() {
        let out = sde_step(field, &states[i], w[0], w[1], &noise[i], cond, schedule)?;
        if !deterministic {
            let lp = step_log_prob(&out.x_next, &out.mean, out.std)?;
            if !lp.is_finite() {
                return Err(Error::NonFinite("step log-probability"));
            }
            step_log_probs.push(lp);
        }
        if out.x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampler state"));
        }
        step_means.push(out.mean);
        step_stds.push(out.std);
        states.push(out.x_next);
    }
    Ok(LatentTrajectory {
        states,
        timesteps: schedule.timesteps.clone(),
        step_means,
        step_stds,
        step_log_probs,
        condition: cond.to_vec(),
        seed,
        deterministic,
    })
}

/// Plain Euler integration of the ODE from `x_init`.
pub fn ode_sample<F: VelocityField + ?Sized>(
    field: &F,
    timesteps: &[f64],
    cond: &[f64],
    x_init: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut states = vec![x_init.to_vec()];
    for w in timesteps.windows(2) {
        let dt = w[0] - w[1];
        let x = states.last().expect("nonempty");
        let v = field.velocity(x, w[0], cond)?;
        states.push(x.iter().zip(&v).map(|(xi, vi)| xi - dt * vi).collect());
    }
    Ok(states)
}

/// One flow-matching training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FmSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub cond: Vec<f64>,
}

/// Mean over the batch of `‖(ε − x₀) − v(x_t, t, c)‖²` and its exact
/// parameter gradient.
pub fn fm_loss_and_grad(policy: &PolicyNetwork, batch: &[FmSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("flow-matching batch"));
    }
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let xt = forward_interpolate(&s.x0, &s.eps, s.t)?;
        let (v, cache) = policy.forward_cached(&xt, s.t, &s.cond)?;
        let resid: Vec<f64> = v
            .iter()
            .zip(s.eps.iter().zip(&s.x0))
            .map(|(vi, (e, x))| vi - (e - x))
            .collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() * scale;
        let adj: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
        policy.accumulate_grad(&cache, &adj, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Exact velocity for one-dimensional data `x₀ ~ N(0, s²)`:
/// `v*(x, t) = x·(t − (1−t)s²) / ((1−t)²s² + t²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDataVelocity {
    pub data_std: f64,
}

impl GaussianDataVelocity {
    pub fn marginal_variance(&self, t: f64) -> f64 {
        let s2 = self.data_std * self.data_std;
        (1.0 - t) * (1.0 - t) * s2 + t * t
    }
}

impl VelocityField for GaussianDataVelocity {
    fn latent_dim(&self) -> usize {
        1
    }

    fn velocity(&self, x: &[f64], t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
        let s2 = self.data_std * self.data_std;
        let gain = (t - (1.0 - t) * s2) / self.marginal_variance(t);
        Ok(x.iter().map(|xi| xi * gain).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::policy::Architecture;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    struct Constant(f64);

    impl VelocityField for Constant {
        fn latent_dim(&self) -> usize {
            1
        }
        fn velocity(&self, x: &[f64], _t: f64, _cond: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![self.0; x.len()])
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let x0 = [1.0, -2.0];
        let eps = [0.5, 0.25];
        assert_eq!(forward_interpolate(&x0, &eps, 0.0).unwrap(), x0.to_vec());
        assert_eq!(forward_interpolate(&x0, &eps, 1.0).unwrap(), eps.to_vec());
        assert_eq!(forward_interpolate(&[2.0], &[0.0], 0.25).unwrap(), vec![1.5]);
        assert!(forward_interpolate(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn sigma_values() {
        let s0 = NoiseSchedule::uniform(10, 0.0).unwrap();
        assert!([0.0, 0.3, 0.999].iter().all(|t| sigma_t(*t, &s0) == 0.0));
        let s1 = NoiseSchedule::uniform(10, 1.0).unwrap();
        assert_abs_diff_eq!(sigma_t(0.5, &s1), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma_t(0.999, &s1), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.5, 0.0], 0.5).is_err());
        assert!(NoiseSchedule::new(vec![0.9, 0.0], 0.5).is_err());
        assert!(NoiseSchedule::new(vec![1.0, 0.0], -1.0).is_err());
        let s = NoiseSchedule::uniform(4, 0.3).unwrap();
        assert_eq!(s.timesteps, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn ode_reduction_single_step() {
        let s = NoiseSchedule::uniform(10, 0.0).unwrap();
        let out = sde_step(&Constant(2.0), &[1.0], 0.5, 0.4, &[0.7], &[], &s).unwrap();
        assert_abs_diff_eq!(out.x_next[0], 0.8, epsilon = 1e-15);
        assert_eq!(out.std, 0.0);
    }

    #[test]
    fn step_rejects_wrong_order() {
        let s = NoiseSchedule::uniform(10, 0.5).unwrap();
        assert_eq!(
            sde_step(&Constant(0.0), &[0.0], 0.3, 0.3, &[0.0], &[], &s),
            Err(Error::ScheduleOrder { t: 0.3, t_next: 0.3 })
        );
    }

    #[test]
    fn log_prob_values() {
        let base = step_log_prob(&[0.0], &[0.0], 1.0).unwrap();
        assert_abs_diff_eq!(base, -0.918939, epsilon = 1e-6);
        let shifted = step_log_prob(&[0.5], &[0.0], 0.5).unwrap();
        assert_abs_diff_eq!(shifted, step_log_prob(&[0.0], &[0.0], 0.5).unwrap() - 0.5, epsilon = 1e-14);
        assert_eq!(step_log_prob(&[0.0], &[0.0], 0.0), Err(Error::DegenerateKernel(0.0)));
    }

    #[test]
    fn log_prob_integrates_to_one() {
        let (lo, hi, n) = (-10.0, 10.0, 20_001);
        let h = (hi - lo) / (n - 1) as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * step_log_prob(&[x], &[0.3], 0.8).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sde_with_zero_noise_level_matches_ode() {
        let arch = Architecture {
            latent_dim: 3,
            cond_dim: 2,
            hidden: [8, 8],
        };
        let net = PolicyNetwork::init(arch, 9);
        let s = NoiseSchedule::uniform(25, 0.0).unwrap();
        let cond = [1.0, 0.0];
        let traj = sample_trajectory(&net, &s, &cond, 17).unwrap();
        assert!(traj.deterministic);
        assert!(traj.step_log_probs.is_empty());
        assert!(traj.step_stds.iter().all(|s| *s == 0.0));
        let ode = ode_sample(&net, &s.timesteps, &cond, &traj.states[0]).unwrap();
        for (a, b) in traj.states.iter().zip(&ode) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn trajectories_are_deterministic_and_self_consistent() {
        let arch = Architecture {
            latent_dim: 4,
            cond_dim: 1,
            hidden: [6, 6],
        };
        let net = PolicyNetwork::init(arch, 2);
        let s = NoiseSchedule::uniform(10, 0.7).unwrap();
        let a = sample_trajectory(&net, &s, &[1.0], 5).unwrap();
        let b = sample_trajectory(&net, &s, &[1.0], 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step_log_probs.len(), 10);
        for i in 0..a.steps() {
            let lp = step_log_prob(&a.states[i + 1], &a.step_means[i], a.step_stds[i]).unwrap();
            assert!((lp - a.step_log_probs[i]).abs() <= 1e-12);
        }
        let c = sample_trajectory(&net, &s, &[1.0], 6).unwrap();
        assert_ne!(a.final_latent(), c.final_latent());
    }

    #[test]
    fn gaussian_velocity_value() {
        let v = GaussianDataVelocity { data_std: 2.0 };
        assert_abs_diff_eq!(v.velocity(&[1.0], 0.5, &[]).unwrap()[0], -1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(v.marginal_variance(0.5), 1.25, epsilon = 1e-15);
    }

    #[test]
    fn fm_loss_cases() {
        let arch = Architecture {
            latent_dim: 2,
            cond_dim: 1,
            hidden: [4, 4],
        };
        let zero = PolicyNetwork::zeros(arch);
        let batch = vec![FmSample {
            x0: vec![1.0, 1.0],
            eps: vec![1.0, -1.0],
            t: 0.3,
            cond: vec![0.0],
        }];
        let (loss, _) = fm_loss_and_grad(&zero, &batch).unwrap();
        assert_abs_diff_eq!(loss, 4.0, epsilon = 1e-15);
        assert!(fm_loss_and_grad(&zero, &[]).is_err());
    }

    #[test]
    fn oracle_velocity_has_zero_loss_and_gradient() {
        let arch = Architecture {
            latent_dim: 2,
            cond_dim: 1,
            hidden: [3, 3],
        };
        let sample = FmSample {
            x0: vec![0.5, -1.0],
            eps: vec![1.5, 0.25],
            t: 0.6,
            cond: vec![1.0],
        };
        let mut net = PolicyNetwork::zeros(arch);
        let n = net.params().len();
        net.params_mut()[n - 2] = 1.0;
        net.params_mut()[n - 1] = 1.25;
        let (loss, grad) = fm_loss_and_grad(&net, &[sample]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn fm_gradient_matches_finite_differences() {
        let arch = Architecture {
            latent_dim: 2,
            cond_dim: 1,
            hidden: [4, 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = PolicyNetwork::init(arch, 8);
        let batch: Vec<FmSample> = (0..5)
            .map(|_| FmSample {
                x0: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                eps: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                t: rng.gen_range(0.0..1.0),
                cond: vec![1.0],
            })
            .collect();
        let (_, g) = fm_loss_and_grad(&net, &batch).unwrap();
        let h = 1e-5;
        for i in 0..g.len() {
            let eval = |d: f64| {
                let mut n = net.clone();
                n.params_mut()[i] += d;
                fm_loss_and_grad(&n, &batch).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / scale < 1e-4, "param {i}");
        }
    }
}
