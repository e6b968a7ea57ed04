use geoalign_core::stitching::planted::PlantedProblem;
use geoalign_core::stitching::{perturbation_study, LossyDecoder, Pipeline};
use serde::Serialize;

use crate::commands::stitch::build_stitched;
use crate::commands::{in_file, load_checkpoint};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::RunDir;

/// Offset of the evaluation-input stream from the run seed.
const INPUT_STREAM: u64 = 0x9e27;

#[derive(Serialize)]
struct SummaryRow {
    alpha: f64,
    pipeline: Pipeline,
    seeds: u64,
    racc: f64,
    tacc: f64,
    auc: f64,
}

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let problem = PlantedProblem::new(cfg.seed);
    let stitched = match &cfg.perturb.checkpoint {
        Some(path) => in_file(path, load_checkpoint(path)?.stitched())?,
        None => build_stitched(cfg, &problem)?,
    };
    let decoder = LossyDecoder::new(&problem.encoder, cfg.perturb.quantization_step)?;
    let inputs = problem.inputs(cfg.perturb.inputs, cfg.seed.wrapping_add(INPUT_STREAM));
    let seeds: Vec<u64> = (0..cfg.perturb.seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let table = perturbation_study(&stitched, &problem.net, &problem.encoder, &decoder, &inputs, &cfg.perturb.alphas, &seeds)?;
    let summary: Vec<SummaryRow> = table
        .summary()
        .into_iter()
        .map(|r| SummaryRow {
            alpha: r.alpha,
            pipeline: r.pipeline,
            seeds: r.seed,
            racc: r.racc,
            tacc: r.tacc,
            auc: r.auc,
        })
        .collect();
    for r in &summary {
        log::info!("alpha {:<5} {:?}: Racc {:.3} Tacc {:.3} AUC {:.3}", r.alpha, r.pipeline, r.racc, r.tacc, r.auc);
    }
    dir.write_csv("robustness.csv", &table.per_seed)?;
    dir.write_csv("robustness_summary.csv", &summary)?;
    Ok(serde_json::json!({}))
}
