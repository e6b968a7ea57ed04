//! Camera-motion smoothness and depth reprojection consistency rewards.
//!
//! Both rewards consume a sequence of [`GeometryFrame`]s. Smoothness looks
//! only at poses; reprojection aggregates the static part of the world-frame
//! point maps into one cloud, z-buffers it into every view and compares the
//! rendered depth against that view's own depth map.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_center, relative_rotation, so3_log, CameraPose, Intrinsics, Rotation};

/// One frame of predicted geometry. Grids are row-major with `height` rows
/// and `width` columns taken from the intrinsics. Invalid depth is any
/// non-finite or non-positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFrame {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub depth: Vec<f64>,
    pub point_map: Vec<Vector3<f64>>,
    pub flow: Option<Vec<Vector3<f64>>>,
}

impl GeometryFrame {
    pub fn pixel_count(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixel_count();
        for len in [self.depth.len(), self.point_map.len()] {
            if len != n {
                return Err(Error::ShapeMismatch { expected: n, got: len });
            }
        }
        if let Some(flow) = &self.flow {
            if flow.len() != n {
                return Err(Error::ShapeMismatch { expected: n, got: flow.len() });
            }
        }
        for (d, p) in self.depth.iter().zip(&self.point_map) {
            if is_valid_depth(*d) && p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("point map at valid depth"));
            }
        }
        Ok(())
    }
}

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// How the dynamic-point flow threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowThreshold {
    /// Fraction of the diagonal of the bounding box of all valid points.
    SceneRelative(f64),
    /// Fixed threshold in scene units per frame.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub eps_div: f64,
    pub flow_threshold: FlowThreshold,
    pub z_near: f64,
    pub worst_k: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            eps_div: 1e-8,
            flow_threshold: FlowThreshold::SceneRelative(0.05),
            z_near: 1e-6,
            worst_k: 3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let threshold = match self.flow_threshold {
            FlowThreshold::SceneRelative(v) | FlowThreshold::Absolute(v) => v,
        };
        if !(self.eps_div > 0.0 && threshold > 0.0 && self.z_near > 0.0) {
            return Err(Error::Config("reward thresholds must be positive".into()));
        }
        if self.worst_k == 0 {
            return Err(Error::Config("worst_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub r_motion: f64,
    pub r_geo: f64,
    pub e_trans: f64,
    pub e_rot: f64,
    pub per_view_errors: Vec<f64>,
    /// Per-interior-frame translational acceleration norms.
    pub accelerations: Vec<f64>,
    /// Views whose valid projected set was empty.
    pub empty_views: Vec<usize>,
}

fn smoothness_error(velocities: &[Vector3<f64>], eps_div: f64) -> f64 {
    let terms = velocities.len() - 1;
    let sum: f64 = velocities
        .windows(2)
        .map(|w| {
            let denom = w[1].norm() + w[0].norm();
            if denom < eps_div {
                0.0
            } else {
                (w[1] - w[0]).norm() / denom
            }
        })
        .sum();
    sum / terms as f64
}

fn require_frames(got: usize) -> Result<()> {
    if got < 3 {
        return Err(Error::InsufficientFrames { needed: 3, got });
    }
    Ok(())
}

/// Mean scale-normalized acceleration of the camera centers.
pub fn translational_smoothness_error(centers: &[Vector3<f64>], cfg: &RewardConfig) -> Result<f64> {
    require_frames(centers.len())?;
    let velocities: Vec<_> = centers.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(smoothness_error(&velocities, cfg.eps_div))
}

/// Same form as the translational error, on angular velocities `log(RᵢᵀRᵢ₊₁)`.
pub fn rotational_smoothness_error(rotations: &[Rotation], cfg: &RewardConfig) -> Result<f64> {
    require_frames(rotations.len())?;
    let omegas = rotations
        .windows(2)
        .map(|w| so3_log(&relative_rotation(&w[0], &w[1])))
        .collect::<Result<Vec<_>>>()?;
    Ok(smoothness_error(&omegas, cfg.eps_div))
}

fn motion_errors(frames: &[GeometryFrame], cfg: &RewardConfig) -> Result<(f64, f64)> {
    let centers: Vec<_> = frames.iter().map(|f| camera_center(&f.pose)).collect();
    let rotations: Vec<_> = frames.iter().map(|f| f.pose.rotation).collect();
    Ok((
        translational_smoothness_error(&centers, cfg)?,
        rotational_smoothness_error(&rotations, cfg)?,
    ))
}

pub fn motion_reward_from_errors(e_trans: f64, e_rot: f64) -> f64 {
    0.5 * (1.0 / (1.0 + e_trans) + 1.0 / (1.0 + e_rot))
}

pub fn motion_reward(frames: &[GeometryFrame], cfg: &RewardConfig) -> Result<f64> {
    let (e_trans, e_rot) = motion_errors(frames, cfg)?;
    Ok(motion_reward_from_errors(e_trans, e_rot))
}

fn scene_diagonal(frames: &[GeometryFrame]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for f in frames {
        for (d, p) in f.depth.iter().zip(&f.point_map) {
            if is_valid_depth(*d) {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
        }
    }
    if lo.x > hi.x {
        0.0
    } else {
        (hi - lo).norm()
    }
}

/// Resolves the absolute flow threshold for a frame sequence.
pub fn resolve_flow_threshold(frames: &[GeometryFrame], cfg: &RewardConfig) -> f64 {
    match cfg.flow_threshold {
        FlowThreshold::Absolute(v) => v,
        FlowThreshold::SceneRelative(frac) => frac * scene_diagonal(frames),
    }
}

fn lexicographic(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// Union of valid point-map entries, dropping entries whose scene flow
/// exceeds the threshold. Returned sorted with exact duplicates removed,
/// so the result does not depend on frame order.
pub fn build_static_cloud(frames: &[GeometryFrame], cfg: &RewardConfig) -> Result<Vec<Vector3<f64>>> {
    let threshold = resolve_flow_threshold(frames, cfg);
    let mut cloud = Vec::new();
    for f in frames {
        f.validate()?;
        for (idx, (d, p)) in f.depth.iter().zip(&f.point_map).enumerate() {
            if !is_valid_depth(*d) {
                continue;
            }
            if let Some(flow) = &f.flow {
                if flow[idx].norm() > threshold {
                    continue;
                }
            }
            cloud.push(*p);
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    cloud.sort_by(lexicographic);
    cloud.dedup_by(|a, b| lexicographic(a, b).is_eq());
    Ok(cloud)
}

/// Rendered depth with its coverage mask. Uncovered pixels hold `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Nearest-pixel z-buffer splat of a cloud into one view.
pub fn render_depth(cloud: &[Vector3<f64>], pose: &CameraPose, k: &Intrinsics, z_near: f64) -> DepthRender {
    let n = k.width * k.height;
    let mut hits: Vec<(usize, f64)> = cloud
        .iter()
        .filter_map(|p| {
            let pc = pose.to_camera(p);
            if pc.z <= z_near {
                return None;
            }
            let proj = crate::geometry::project(p, pose, k)?;
            let (col, row) = k.pixel_index(&proj.pixel)?;
            Some((row * k.width + col, proj.depth))
        })
        .collect();
    // Sorting by (pixel, depth) leaves the nearest surface first in each run.
    hits.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut depth = vec![f64::INFINITY; n];
    let mut mask = vec![false; n];
    for (idx, z) in hits {
        if !mask[idx] {
            mask[idx] = true;
            depth[idx] = z;
        }
    }
    DepthRender { depth, mask }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionReport {
    pub errors: Vec<f64>,
    pub empty_views: Vec<usize>,
}

/// Mean absolute difference between the rendered static cloud and each
/// view's depth over pixels that are both covered and valid.
pub fn reprojection_error_per_view(frames: &[GeometryFrame], cfg: &RewardConfig) -> Result<ReprojectionReport> {
    if frames.is_empty() {
        return Err(Error::InsufficientFrames { needed: 1, got: 0 });
    }
    let cloud = build_static_cloud(frames, cfg)?;
    let per_view: Vec<Option<f64>> = frames
        .par_iter()
        .map(|f| {
            let render = render_depth(&cloud, &f.pose, &f.intrinsics, cfg.z_near);
            let mut sum = 0.0;
            let mut count = 0usize;
            for (idx, &covered) in render.mask.iter().enumerate() {
                if covered && is_valid_depth(f.depth[idx]) {
                    sum += (render.depth[idx] - f.depth[idx]).abs();
                    count += 1;
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    let mut empty_views = Vec::new();
    let errors = per_view
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            e.unwrap_or_else(|| {
                log::warn!("view {i} has no valid projected pixels; error set to 0");
                empty_views.push(i);
                0.0
            })
        })
        .collect();
    Ok(ReprojectionReport { errors, empty_views })
}

/// Negated mean of the `worst_k` largest errors (all of them if fewer).
pub fn geometry_reward_from_errors(errors: &[f64], worst_k: usize) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = worst_k.min(sorted.len());
    -sorted[..k].iter().sum::<f64>() / k as f64
}

pub fn geometry_reward(frames: &[GeometryFrame], cfg: &RewardConfig) -> Result<f64> {
    let report = reprojection_error_per_view(frames, cfg)?;
    Ok(geometry_reward_from_errors(&report.errors, cfg.worst_k))
}

pub fn reward_bundle(frames: &[GeometryFrame], cfg: &RewardConfig) -> Result<RewardBundle> {
    let (e_trans, e_rot) = motion_errors(frames, cfg)?;
    let report = reprojection_error_per_view(frames, cfg)?;
    let centers: Vec<_> = frames.iter().map(|f| camera_center(&f.pose)).collect();
    let accelerations = centers
        .windows(3)
        .map(|w| ((w[2] - w[1]) - (w[1] - w[0])).norm())
        .collect();
    Ok(RewardBundle {
        r_motion: motion_reward_from_errors(e_trans, e_rot),
        r_geo: geometry_reward_from_errors(&report.errors, cfg.worst_k),
        e_trans,
        e_rot,
        per_view_errors: report.errors,
        accelerations,
        empty_views: report.empty_views,
    })
}

/// Scenes with exactly known geometry for tests and examples.
pub mod synthetic {
    use super::*;
    use nalgebra::Vector2;

    /// Identity-oriented cameras at `centers` looking down +z at the plane
    /// `z = plane_z`. Depth is constant per view, so every view is exactly
    /// consistent with every other.
    pub fn fronto_parallel_scene(centers: &[Vector3<f64>], plane_z: f64, k: &Intrinsics) -> Vec<GeometryFrame> {
        centers
            .iter()
            .map(|c| {
                let pose = CameraPose::from_center(Rotation::identity(), c);
                let d = plane_z - c.z;
                let mut depth = Vec::with_capacity(k.width * k.height);
                let mut point_map = Vec::with_capacity(k.width * k.height);
                for row in 0..k.height {
                    for col in 0..k.width {
                        let px = Vector2::new(col as f64, row as f64);
                        depth.push(d);
                        point_map.push(crate::geometry::unproject(&px, d, &pose, k).expect("positive depth"));
                    }
                }
                GeometryFrame {
                    pose,
                    intrinsics: *k,
                    depth,
                    point_map,
                    flow: None,
                }
            })
            .collect()
    }
}
