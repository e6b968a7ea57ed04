use geoalign_core::formats::Checkpoint;
use geoalign_core::toy_world::{evaluation_loss, pretrain_flow, LatentPrior, PolicyNetwork};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunDir;

const HELDOUT_SEED_OFFSET: u64 = 0x0004_e1d0_u64;
const HELDOUT_SIZE: usize = 512;
const WINDOW: usize = 100;

#[derive(Serialize)]
struct LossRecord {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct Summary {
    steps: usize,
    initial_window_loss: f64,
    final_window_loss: f64,
    heldout_loss_before: f64,
    heldout_loss_after: f64,
}

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let prior = LatentPrior::default_mixture();
    let init = PolicyNetwork::init(cfg.policy.architecture(), cfg.seed);
    let heldout_seed = cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET);
    let before = evaluation_loss(&init, &prior, heldout_seed, HELDOUT_SIZE)?;
    let (policy, log) = pretrain_flow(init, &prior, &cfg.pretrain)?;
    let after = evaluation_loss(&policy, &prior, heldout_seed, HELDOUT_SIZE)?;
    let records: Vec<LossRecord> = log.losses.iter().enumerate().map(|(step, &loss)| LossRecord { step, loss }).collect();
    dir.write_jsonl("pretrain_log.jsonl", &records)?;
    let summary = Summary {
        steps: cfg.pretrain.steps,
        initial_window_loss: log.window_mean(WINDOW, true),
        final_window_loss: log.window_mean(WINDOW, false),
        heldout_loss_before: before,
        heldout_loss_after: after,
    };
    log::info!("held-out flow-matching loss {before:.4} -> {after:.4}");
    dir.write_csv("pretrain_summary.csv", &[summary])?;
    let ckpt = Checkpoint::for_policy(&policy, cfg.pretrain.steps, cfg.seed, cfg.to_json_value());
    dir.write("checkpoint.json", ckpt.to_json()?)?;
    Ok(serde_json::json!({}))
}
