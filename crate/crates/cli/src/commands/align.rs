use geoalign_core::formats::Checkpoint;
use geoalign_core::grpo::{train_with_callback, ToyWorld};

use crate::commands::starting_policy;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunDir;

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let policy = starting_policy(cfg)?;
    let world = ToyWorld {
        reward: cfg.reward,
        ..ToyWorld::default()
    };
    let (policy, log) = train_with_callback(&world, policy, &cfg.grpo, |r| {
        if r.iteration % 10 == 0 {
            log::info!(
                "iteration {}: r_motion {:.4} r_geo {:.4} kl {:.2e}",
                r.iteration,
                r.mean_r_motion,
                r.mean_r_geo,
                r.kl
            );
        }
    })?;
    dir.write_jsonl("training_log.jsonl", &log.iterations)?;
    dir.write_csv("evaluations.csv", &log.evaluations)?;
    if let (Some(first), Some(last)) = (log.evaluations.first(), log.evaluations.last()) {
        log::info!(
            "evaluation r_motion {:.4} -> {:.4}, r_geo {:.4} -> {:.4}",
            first.mean_r_motion,
            last.mean_r_motion,
            first.mean_r_geo,
            last.mean_r_geo
        );
    }
    let ckpt = Checkpoint::for_policy(&policy, cfg.grpo.iterations, cfg.seed, cfg.to_json_value());
    dir.write("checkpoint.json", ckpt.to_json()?)?;
    Ok(serde_json::json!({ "iteration_wall_time_ms": log.wall_time_ms }))
}
