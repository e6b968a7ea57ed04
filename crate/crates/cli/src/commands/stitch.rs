use geoalign_core::formats::Checkpoint;
use geoalign_core::stitching::planted::PlantedProblem;
use geoalign_core::stitching::{align_finetune, alignment_loss, stitch_search, Modality, StitchedModel};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunDir;

/// Offset of the calibration-input stream from the run seed.
pub(crate) const CALIBRATION_STREAM: u64 = 0xca1b;

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    error: f64,
    low_rank: bool,
    selected: bool,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    weighted_loss: f64,
}

#[derive(Serialize)]
struct ModalityRow {
    modality: &'static str,
    weight: f64,
    initial: f64,
    last: f64,
}

/// Searched and fine-tuned connector into the synthetic geometry network.
pub(crate) fn build_stitched(cfg: &RunConfig, problem: &PlantedProblem) -> CliResult<StitchedModel> {
    let calib = problem.inputs(cfg.stitching.calibration_size, cfg.seed.wrapping_add(CALIBRATION_STREAM));
    let search = stitch_search(&problem.encoder, &problem.net, &calib, &cfg.stitching)?;
    Ok(StitchedModel::from_reference(&problem.net, search.layer, search.connector)?)
}

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let problem = PlantedProblem::new(cfg.seed);
    let calib = problem.inputs(cfg.stitching.calibration_size, cfg.seed.wrapping_add(CALIBRATION_STREAM));
    let search = stitch_search(&problem.encoder, &problem.net, &calib, &cfg.stitching)?;
    let layers: Vec<LayerRow> = search
        .table
        .iter()
        .map(|r| LayerRow {
            layer: r.layer,
            error: r.error,
            low_rank: r.low_rank,
            selected: r.layer == search.layer,
        })
        .collect();
    dir.write_csv("layer_errors.csv", &layers)?;
    log::info!("stitch layer {} selected", search.layer);

    let mut stitched = StitchedModel::from_reference(&problem.net, search.layer, search.connector)?;
    if cfg.stitch.perturb_scale > 0.0 {
        stitched.perturb_connector(cfg.stitch.perturb_scale, cfg.seed);
    }
    let before = alignment_loss(&stitched, &problem.net, &problem.encoder, &calib, &cfg.stitching.weights)?;
    let (tuned, log) = align_finetune(&stitched, &problem.net, &problem.encoder, &calib, &cfg.stitching)?;
    let after = alignment_loss(&tuned, &problem.net, &problem.encoder, &calib, &cfg.stitching.weights)?;
    log::info!("weighted alignment loss {:.4e} -> {:.4e}", log.initial(), log.last());

    let epochs: Vec<EpochRow> = log
        .losses
        .iter()
        .enumerate()
        .map(|(epoch, &weighted_loss)| EpochRow { epoch, weighted_loss })
        .collect();
    dir.write_csv("finetune_log.csv", &epochs)?;
    let weights = cfg.stitching.weights.as_array();
    let modalities: Vec<ModalityRow> = Modality::ALL
        .iter()
        .map(|m| ModalityRow {
            modality: m.name(),
            weight: weights[m.index()],
            initial: before.per_modality[m.index()],
            last: after.per_modality[m.index()],
        })
        .collect();
    dir.write_csv("finetune_summary.csv", &modalities)?;
    let ckpt = Checkpoint::for_stitched(&tuned, cfg.seed, cfg.to_json_value());
    dir.write("stitched_checkpoint.json", ckpt.to_json()?)?;
    Ok(serde_json::json!({}))
}
