//! Epipolar and relative-pose accuracy metrics.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, CameraPose, Rotation};

pub const SAMPSON_MIN_DENOMINATOR: f64 = 1e-12;
pub const MIN_BASELINE: f64 = 1e-9;
pub const AUC_GRID_POINTS: usize = 100;
/// Joint errors below this many degrees count as exact in the AUC curve.
pub const AUC_ZERO_FLOOR_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub pixel_i: Vector2<f64>,
    pub pixel_j: Vector2<f64>,
    pub view_i: usize,
    pub view_j: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampsonReport {
    pub mean: f64,
    pub used: usize,
    pub skipped: usize,
}

/// First-order epipolar distance for `x_jᵀ F x_i = 0`, averaged over
/// matches with a usable denominator.
pub fn sampson_report(f: &Matrix3<f64>, matches: &[Correspondence]) -> Result<SampsonReport> {
    if matches.is_empty() {
        return Err(Error::Empty("correspondences"));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for m in matches {
        if m.view_i == m.view_j {
            return Err(Error::Config(format!("correspondence within a single view {}", m.view_i)));
        }
        if !(m.pixel_i.iter().chain(m.pixel_j.iter()).all(|v| v.is_finite())) {
            return Err(Error::NonFinite("correspondence"));
        }
        let x = Vector3::new(m.pixel_i.x, m.pixel_i.y, 1.0);
        let xp = Vector3::new(m.pixel_j.x, m.pixel_j.y, 1.0);
        let fx = f * x;
        let ftxp = f.transpose() * xp;
        let denom = fx.x * fx.x + fx.y * fx.y + ftxp.x * ftxp.x + ftxp.y * ftxp.y;
        if denom < SAMPSON_MIN_DENOMINATOR {
            skipped += 1;
            continue;
        }
        let num = xp.dot(&fx);
        sum += num * num / denom;
        used += 1;
    }
    if skipped > 0 {
        log::warn!("sampson error: skipped {skipped} of {} matches with vanishing gradient", matches.len());
    }
    if used == 0 {
        return Err(Error::Empty("usable correspondences"));
    }
    Ok(SampsonReport {
        mean: sum / used as f64,
        used,
        skipped,
    })
}

pub fn sampson_error(f: &Matrix3<f64>, matches: &[Correspondence]) -> Result<f64> {
    sampson_report(f, matches).map(|r| r.mean)
}

/// Angular errors in degrees for one unordered frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rotation_deg: f64,
    /// `None` when the ground-truth baseline is degenerate.
    pub translation_deg: Option<f64>,
}

impl PairError {
    /// Joint error: the larger of the two, or the rotation error alone for
    /// degenerate baselines.
    pub fn joint_deg(&self) -> f64 {
        self.translation_deg.map_or(self.rotation_deg, |t| t.max(self.rotation_deg))
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cross = a.cross(b).norm();
    cross.atan2(a.dot(b)).to_degrees()
}

/// Relative-pose errors over all unordered pairs `i < j`.
pub fn pair_errors(pred: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<PairError>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: gt.len(),
        });
    }
    let mut out = Vec::with_capacity(gt.len() * (gt.len() - 1) / 2);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let (rp, tp) = relative_pose(&pred[i], &pred[j]);
            let (rg, tg) = relative_pose(&gt[i], &gt[j]);
            let rotation_deg = Rotation::from_matrix_unchecked(rp.transpose() * rg).angle().to_degrees();
            let translation_deg = if tg.norm() < MIN_BASELINE {
                None
            } else if tp.norm() < MIN_BASELINE {
                Some(180.0)
            } else {
                Some(angle_between(&tp, &tg))
            };
            out.push(PairError {
                i,
                j,
                rotation_deg,
                translation_deg,
            });
        }
    }
    Ok(out)
}

fn fraction_below(errors: impl Iterator<Item = f64>, tau: f64) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for e in errors {
        n += 1;
        if e < tau {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("pose pairs"));
    }
    Ok(hit as f64 / n as f64)
}

pub fn rotation_accuracy_from_pairs(pairs: &[PairError], tau_deg: f64) -> Result<f64> {
    fraction_below(pairs.iter().map(|p| p.rotation_deg), tau_deg)
}

/// Pairs with a degenerate ground-truth baseline are left out.
pub fn translation_accuracy_from_pairs(pairs: &[PairError], tau_deg: f64) -> Result<f64> {
    fraction_below(pairs.iter().filter_map(|p| p.translation_deg), tau_deg)
}

/// Area under the accuracy-vs-threshold curve of the joint error on
/// `[0, tau_max]`, trapezoidal on a uniform grid, normalized to `[0, 1]`.
/// A pair counts as accurate at threshold `τ` when its error is `≤ τ`.
pub fn auc_from_pairs(pairs: &[PairError], tau_max_deg: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pose pairs"));
    }
    if !(tau_max_deg > 0.0) {
        return Err(Error::Config("tau_max must be positive".into()));
    }
    let errors: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let e = p.joint_deg();
            if e < AUC_ZERO_FLOOR_DEG {
                0.0
            } else {
                e
            }
        })
        .collect();
    let n = AUC_GRID_POINTS - 1;
    let acc: Vec<f64> = (0..=n)
        .map(|k| {
            let tau = tau_max_deg * k as f64 / n as f64;
            errors.iter().filter(|e| **e <= tau).count() as f64 / errors.len() as f64
        })
        .collect();
    let area: f64 = acc.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(area / n as f64)
}

pub fn rotation_accuracy(pred: &[CameraPose], gt: &[CameraPose], tau_deg: f64) -> Result<f64> {
    rotation_accuracy_from_pairs(&pair_errors(pred, gt)?, tau_deg)
}

pub fn translation_accuracy(pred: &[CameraPose], gt: &[CameraPose], tau_deg: f64) -> Result<f64> {
    translation_accuracy_from_pairs(&pair_errors(pred, gt)?, tau_deg)
}

pub fn pose_auc(pred: &[CameraPose], gt: &[CameraPose], tau_max_deg: f64) -> Result<f64> {
    auc_from_pairs(&pair_errors(pred, gt)?, tau_max_deg)
}

/// One CSV row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub tau: f64,
    pub value: f64,
    pub n_pairs: usize,
}

/// Racc, Tacc and AUC at one threshold.
pub fn pose_metric_rows(pairs: &[PairError], tau_deg: f64) -> Result<Vec<MetricRow>> {
    let n_trans = pairs.iter().filter(|p| p.translation_deg.is_some()).count();
    Ok(vec![
        MetricRow {
            metric: "racc".into(),
            tau: tau_deg,
            value: rotation_accuracy_from_pairs(pairs, tau_deg)?,
            n_pairs: pairs.len(),
        },
        MetricRow {
            metric: "tacc".into(),
            tau: tau_deg,
            value: translation_accuracy_from_pairs(pairs, tau_deg)?,
            n_pairs: n_trans,
        },
        MetricRow {
            metric: "auc".into(),
            tau: tau_deg,
            value: auc_from_pairs(pairs, tau_deg)?,
            n_pairs: pairs.len(),
        },
    ])
}
