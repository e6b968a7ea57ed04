use geoalign_core::guidance::{guided_sample, sign_test_p_value, DecoderReward, GuidanceConfig, LatentReward};
use geoalign_core::toy_world::{ScenePreset, ToyDecoder};
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{mean, starting_policy};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunDir;

#[derive(Serialize)]
struct PairRow {
    preset: ScenePreset,
    seed: u64,
    unguided: f64,
    guided: f64,
    guided_steps: usize,
}

#[derive(Serialize)]
struct SummaryRow {
    preset: String,
    seeds: usize,
    mean_unguided: f64,
    mean_guided: f64,
    wins: usize,
    losses: usize,
    ties: usize,
    sign_test_p: f64,
}

fn summarize(preset: String, rows: &[&PairRow]) -> SummaryRow {
    let wins = rows.iter().filter(|r| r.guided > r.unguided).count();
    let losses = rows.iter().filter(|r| r.guided < r.unguided).count();
    let unguided: Vec<f64> = rows.iter().map(|r| r.unguided).collect();
    let guided: Vec<f64> = rows.iter().map(|r| r.guided).collect();
    SummaryRow {
        preset,
        seeds: rows.len(),
        mean_unguided: mean(&unguided),
        mean_guided: mean(&guided),
        wins,
        losses,
        ties: rows.len() - wins - losses,
        sign_test_p: sign_test_p_value(wins, losses),
    }
}

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let policy = starting_policy(cfg)?;
    let unguided_cfg = GuidanceConfig {
        s_reward: 0.0,
        ..cfg.guidance
    };
    let mut rows = Vec::new();
    for &preset in &cfg.guide.presets {
        let decoder = ToyDecoder::new(preset);
        let reward = DecoderReward {
            decoder: &decoder,
            config: cfg.reward,
            lambda_motion: cfg.guidance.lambda_motion,
            lambda_geo: cfg.guidance.lambda_geo,
        };
        let cond = preset.condition();
        let pairs: Vec<CliResult<PairRow>> = (0..cfg.guide.seeds)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.seed.wrapping_add(i);
                let base = guided_sample(&policy, &reward, &cond, &unguided_cfg, seed)?;
                let guided = guided_sample(&policy, &reward, &cond, &cfg.guidance, seed)?;
                Ok(PairRow {
                    preset,
                    seed,
                    unguided: reward.reward(base.final_latent())?,
                    guided: reward.reward(guided.final_latent())?,
                    guided_steps: guided.guided_steps.len(),
                })
            })
            .collect();
        for p in pairs {
            rows.push(p?);
        }
    }
    let mut summary: Vec<SummaryRow> = cfg
        .guide
        .presets
        .iter()
        .map(|p| {
            let subset: Vec<&PairRow> = rows.iter().filter(|r| r.preset == *p).collect();
            summarize(serde_json::to_value(p).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(), &subset)
        })
        .collect();
    summary.push(summarize("all".into(), &rows.iter().collect::<Vec<_>>()));
    for s in &summary {
        log::info!("{}: guided beats unguided in {}/{} seeds (p = {:.2e})", s.preset, s.wins, s.seeds, s.sign_test_p);
    }
    dir.write_csv("guide.csv", &rows)?;
    dir.write_csv("guide_summary.csv", &summary)?;
    Ok(serde_json::json!({}))
}
