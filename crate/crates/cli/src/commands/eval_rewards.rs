use geoalign_core::formats::SceneTrajectory;
use geoalign_core::rewards::{reward_bundle, RewardBundle};
use geoalign_core::toy_world::{LatentPrior, ScenePreset, ToyDecoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{in_file, load_scene};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunDir;

#[derive(Serialize)]
struct RewardRow<'a> {
    scene: &'a str,
    frames: usize,
    r_motion: f64,
    r_geo: f64,
    e_trans: f64,
    e_rot: f64,
    worst_view_error: f64,
    empty_views: usize,
}

#[derive(Serialize)]
struct ViewRow<'a> {
    scene: &'a str,
    view: usize,
    error: f64,
}

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let mut scenes: Vec<(String, SceneTrajectory)> = Vec::new();
    for path in &cfg.eval_rewards.scenes {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        scenes.push((name, load_scene(path)?));
    }
    let prior = LatentPrior::default_mixture();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.eval_rewards.sample_scenes {
        let preset = ScenePreset::ALL[i % ScenePreset::ALL.len()];
        let latent = prior.sample(preset.index(), &mut rng);
        let scene = SceneTrajectory::new(ToyDecoder::new(preset).decode(&latent)?)?;
        let name = format!("scenes/sample_{i:03}.json");
        dir.write(&name, scene.to_json()?)?;
        scenes.push((name, scene));
    }
    let bundles: Vec<CliResult<RewardBundle>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, (_, s))| {
            let r = reward_bundle(&s.frames, &cfg.reward);
            match cfg.eval_rewards.scenes.get(i) {
                Some(path) => in_file(path, r),
                None => Ok(r?),
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(scenes.len());
    let mut views = Vec::new();
    for ((name, scene), b) in scenes.iter().zip(bundles) {
        let b = b?;
        rows.push(RewardRow {
            scene: name,
            frames: scene.frames.len(),
            r_motion: b.r_motion,
            r_geo: b.r_geo,
            e_trans: b.e_trans,
            e_rot: b.e_rot,
            worst_view_error: b.per_view_errors.iter().copied().fold(0.0, f64::max),
            empty_views: b.empty_views.len(),
        });
        views.extend(b.per_view_errors.iter().enumerate().map(|(view, &error)| ViewRow { scene: name, view, error }));
    }
    dir.write_csv("rewards.csv", &rows)?;
    dir.write_csv("view_errors.csv", &views)?;
    Ok(serde_json::json!({ "scenes": rows.len() }))
}
