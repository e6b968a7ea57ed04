//! Logarithmic sweep of the reward-guidance strength on the toy world.
//!
//! Pretrains the toy policy, then compares guided and unguided samples over
//! a fixed set of seeds for each strength and prints the mean reward gain
//! and the number of seeds where guidance helped.

use geoalign_core::guidance::{guided_sample, DecoderReward, GuidanceConfig, LatentReward};
use geoalign_core::rewards::RewardConfig;
use geoalign_core::toy_world::{pretrain_flow, Architecture, LatentPrior, PolicyNetwork, PretrainConfig, ScenePreset, ToyDecoder};

const STRENGTHS: [f64; 7] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0];
const SEEDS: u64 = 20;

fn main() -> geoalign_core::Result<()> {
    let (policy, _) = pretrain_flow(PolicyNetwork::init(Architecture::toy(), 0), &LatentPrior::default_mixture(), &PretrainConfig::default())?;
    println!("s_reward,preset,mean_unguided,mean_guided,wins");
    for preset in ScenePreset::ALL {
        let decoder = ToyDecoder::new(preset);
        let reward = DecoderReward {
            decoder: &decoder,
            config: RewardConfig::default(),
            lambda_motion: 1.0,
            lambda_geo: 1.0,
        };
        let off = GuidanceConfig {
            s_reward: 0.0,
            ..Default::default()
        };
        let base: Vec<f64> = (0..SEEDS)
            .map(|s| guided_sample(&policy, &reward, &preset.condition(), &off, s).and_then(|g| reward.reward(g.final_latent())))
            .collect::<geoalign_core::Result<_>>()?;
        for s_reward in STRENGTHS {
            let cfg = GuidanceConfig { s_reward, ..off };
            let guided: Vec<f64> = (0..SEEDS)
                .map(|s| guided_sample(&policy, &reward, &preset.condition(), &cfg, s).and_then(|g| reward.reward(g.final_latent())))
                .collect::<geoalign_core::Result<_>>()?;
            let wins = guided.iter().zip(&base).filter(|(g, b)| g > b).count();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!("{s_reward},{preset:?},{:.5},{:.5},{wins}", mean(&base), mean(&guided));
        }
    }
    Ok(())
}
