use std::collections::BTreeMap;
use std::path::Path;

use geoalign_core::formats::SceneTrajectory;
use geoalign_core::geometry::{fundamental_matrix, CameraPose};
use geoalign_core::metrics::{pair_errors, pose_metric_rows, sampson_report, Correspondence};
use geoalign_core::Error;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::commands::{load_scene, read_text};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::RunDir;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchRow {
    view_i: usize,
    view_j: usize,
    x_i: f64,
    y_i: f64,
    x_j: f64,
    y_j: f64,
}

#[derive(Serialize)]
struct Row {
    metric: String,
    tau: Option<f64>,
    value: f64,
    n_pairs: usize,
}

fn config_error(cfg_key: &str) -> CliError {
    CliError::Config {
        path: cfg_key.into(),
        message: "required by the metrics command".into(),
    }
}

fn poses(scene: &SceneTrajectory) -> Vec<CameraPose> {
    scene.frames.iter().map(|f| f.pose).collect()
}

fn read_matches(path: &Path, views: usize) -> CliResult<Vec<Correspondence>> {
    let text = read_text(path)?;
    let bad = |message: String| CliError::Input {
        path: path.to_path_buf(),
        source: Error::Format(message),
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize::<MatchRow>() {
        let m = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            bad(format!("line {line}: {e}"))
        })?;
        let line = out.len() + 2;
        if m.view_i >= views || m.view_j >= views {
            return Err(bad(format!("line {line}: view index outside 0..{views}")));
        }
        if m.view_i == m.view_j {
            return Err(bad(format!("line {line}: correspondence views must differ")));
        }
        if ![m.x_i, m.y_i, m.x_j, m.y_j].iter().all(|v| v.is_finite()) {
            return Err(bad(format!("line {line}: non-finite pixel coordinate")));
        }
        out.push(Correspondence {
            pixel_i: Vector2::new(m.x_i, m.y_i),
            pixel_j: Vector2::new(m.x_j, m.y_j),
            view_i: m.view_i,
            view_j: m.view_j,
        });
    }
    Ok(out)
}

/// Match-weighted Sampson error under the predicted poses' epipolar
/// geometry, one fundamental matrix per view pair.
fn sampson_row(pred: &SceneTrajectory, matches: &[Correspondence]) -> CliResult<Row> {
    let mut by_pair: BTreeMap<(usize, usize), Vec<Correspondence>> = BTreeMap::new();
    for m in matches {
        by_pair.entry((m.view_i, m.view_j)).or_default().push(*m);
    }
    let k = pred.frames[0].intrinsics;
    let (mut total, mut used, mut pairs) = (0.0, 0usize, 0usize);
    for ((i, j), group) in &by_pair {
        let f = match fundamental_matrix(&pred.frames[*i].pose, &pred.frames[*j].pose, &k) {
            Ok(f) => f,
            Err(Error::DegenerateBaseline) => {
                log::warn!("views {i} and {j} share a camera center; their matches are skipped");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let report = sampson_report(&f, group)?;
        total += report.mean * report.used as f64;
        used += report.used;
        pairs += 1;
    }
    if used == 0 {
        return Err(Error::Empty("usable correspondences").into());
    }
    Ok(Row {
        metric: "sampson".into(),
        tau: None,
        value: total / used as f64,
        n_pairs: pairs,
    })
}

pub fn run(cfg: &RunConfig, dir: &RunDir) -> CliResult<serde_json::Value> {
    let m = &cfg.metrics;
    let pred = load_scene(m.pred.as_deref().ok_or_else(|| config_error("metrics.pred"))?)?;
    let gt = load_scene(m.gt.as_deref().ok_or_else(|| config_error("metrics.gt"))?)?;
    let pairs = pair_errors(&poses(&pred), &poses(&gt))?;
    let mut rows = Vec::new();
    for &tau in &m.taus {
        rows.extend(pose_metric_rows(&pairs, tau)?.into_iter().map(|r| Row {
            metric: r.metric,
            tau: Some(r.tau),
            value: r.value,
            n_pairs: r.n_pairs,
        }));
    }
    if let Some(path) = &m.matches {
        let matches = read_matches(path, pred.frames.len())?;
        rows.push(sampson_row(&pred, &matches)?);
    }
    dir.write_csv("metrics.csv", &rows)?;
    Ok(serde_json::json!({}))
}
