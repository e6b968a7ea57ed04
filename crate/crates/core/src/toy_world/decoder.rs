//! Fixed latent-to-geometry decoder.
//!
//! Latent layout (16 coordinates):
//!
//! | range    | effect                                                   |
//! |----------|----------------------------------------------------------|
//! | `0..6`   | offsets of the two inner cubic Bézier control points     |
//! | `6..12`  | translational jitter on two high-frequency frame patterns |
//! | `12..14` | rotational jitter (yaw, pitch) on the same patterns      |
//! | `14..16` | per-view depth bias (uniform and alternating)            |
//!
//! The world is a sparse lattice of points. Each view z-buffers the lattice
//! into its pixel grid; the point map stores the winning lattice point, so
//! with no depth bias and no moving points every view is exactly consistent
//! with every other.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, so3_exp, so3_log, CameraPose, Intrinsics, Rotation};
use crate::rewards::GeometryFrame;

pub const LATENT_DIM: usize = 16;
pub const COND_DIM: usize = 4;
pub const PATH_COORDS: std::ops::Range<usize> = 0..6;
pub const JITTER_COORDS: std::ops::Range<usize> = 6..12;
pub const ROT_JITTER_COORDS: std::ops::Range<usize> = 12..14;
pub const DEPTH_KNOB_COORDS: std::ops::Range<usize> = 14..16;

const Z_NEAR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    StaticIndoor,
    DynamicObject,
    FastPan,
    Orbit,
}

impl ScenePreset {
    pub const ALL: [ScenePreset; 4] = [
        ScenePreset::StaticIndoor,
        ScenePreset::DynamicObject,
        ScenePreset::FastPan,
        ScenePreset::Orbit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// One-hot condition vector.
    pub fn condition(self) -> Vec<f64> {
        let mut c = vec![0.0; COND_DIM];
        c[self.index()] = 1.0;
        c
    }

    /// Preset selected by the largest entry of a condition vector.
    pub fn from_condition(cond: &[f64]) -> Result<Self> {
        if cond.len() != COND_DIM {
            return Err(Error::ShapeMismatch {
                expected: COND_DIM,
                got: cond.len(),
            });
        }
        let best = (0..COND_DIM)
            .max_by(|a, b| cond[*a].total_cmp(&cond[*b]).then(b.cmp(a)))
            .expect("nonempty");
        Ok(Self::ALL[best])
    }

    fn path(self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            ScenePreset::StaticIndoor => (Vector3::new(-1.5, -0.6, -6.5), Vector3::new(1.5, -0.3, -6.0)),
            ScenePreset::DynamicObject => (Vector3::new(-1.2, -0.8, -6.5), Vector3::new(1.5, -0.6, -6.5)),
            ScenePreset::FastPan => (Vector3::new(-3.0, -0.5, -6.5), Vector3::new(3.0, -0.5, -6.0)),
            ScenePreset::Orbit => (Vector3::new(-3.5, -1.0, -4.5), Vector3::new(3.5, -1.2, -5.5)),
        }
    }
}

/// Per-frame world velocity applied to a subset of lattice points.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicPoints {
    pub start: Vec<Vector3<f64>>,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    pub preset: ScenePreset,
    pub frame_count: usize,
    pub intrinsics: Intrinsics,
    pub lattice: Vec<Vector3<f64>>,
    pub dynamic: Option<DynamicPoints>,
    pub path_offset_scale: f64,
    pub jitter_scale: f64,
    pub rot_jitter_scale: f64,
    pub depth_bias_scale: f64,
}

fn static_lattice() -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    let steps = |lo: f64, n: usize| (0..n).map(move |i| lo + 0.5 * i as f64);
    // Back wall and floor.
    for x in steps(-3.0, 13) {
        for y in steps(-2.0, 8) {
            pts.push(Vector3::new(x, y, 2.0));
        }
        for z in steps(-2.0, 8) {
            pts.push(Vector3::new(x, 1.5, z));
        }
    }
    // A box standing on the floor.
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                pts.push(Vector3::new(-0.8 + 0.3 * i as f64, 0.9 + 0.3 * j as f64, -0.3 + 0.3 * k as f64));
            }
        }
    }
    pts
}

fn moving_cluster() -> DynamicPoints {
    let mut start = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            start.push(Vector3::new(-1.6 + 0.25 * i as f64, -2.9 + 0.25 * j as f64, 0.0));
        }
    }
    DynamicPoints {
        start,
        velocity: Vector3::new(0.6, 0.0, 0.0),
    }
}

/// `+1, −1, +1, …`
fn alternating(i: usize) -> f64 {
    if i.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// `0, +1, 0, −1, …`
fn quarter_wave(i: usize) -> f64 {
    match i % 4 {
        1 => 1.0,
        3 => -1.0,
        _ => 0.0,
    }
}

/// World-to-camera rotation looking from `center` toward `target`, image
/// rows pointing along world +y.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Rotation {
    let forward = (target - center).normalize();
    let right = Vector3::y().cross(&forward).normalize();
    let down = forward.cross(&right);
    Rotation::from_matrix_unchecked(Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]))
}

impl ToyDecoder {
    pub fn new(preset: ScenePreset) -> Self {
        Self {
            preset,
            frame_count: 8,
            intrinsics: Intrinsics::new(14.0, 14.0, 7.5, 7.5, 16, 16).expect("valid intrinsics"),
            lattice: static_lattice(),
            dynamic: (preset == ScenePreset::DynamicObject).then(moving_cluster),
            path_offset_scale: 0.5,
            jitter_scale: 0.1,
            rot_jitter_scale: 0.02,
            depth_bias_scale: 0.2,
        }
    }

    /// Same preset without moving points.
    pub fn static_only(mut self) -> Self {
        self.dynamic = None;
        self
    }

    pub fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.lattice.iter().sum::<Vector3<f64>>() / self.lattice.len() as f64
    }

    /// Camera centers along the latent-controlled cubic path plus jitter.
    pub fn camera_centers(&self, z: &[f64]) -> Vec<Vector3<f64>> {
        let (start, end) = self.preset.path();
        let span = end - start;
        let o1 = Vector3::new(z[0], z[1], z[2]) * self.path_offset_scale;
        let o2 = Vector3::new(z[3], z[4], z[5]) * self.path_offset_scale;
        let ctrl = [start, start + span / 3.0 + o1, start + span * (2.0 / 3.0) + o2, end];
        let ja = Vector3::new(z[6], z[7], z[8]) * self.jitter_scale;
        let jb = Vector3::new(z[9], z[10], z[11]) * self.jitter_scale;
        (0..self.frame_count)
            .map(|i| {
                let s = i as f64 / (self.frame_count - 1) as f64;
                let u = 1.0 - s;
                let bezier = ctrl[0] * (u * u * u)
                    + ctrl[1] * (3.0 * u * u * s)
                    + ctrl[2] * (3.0 * u * s * s)
                    + ctrl[3] * (s * s * s);
                bezier + ja * alternating(i) + jb * quarter_wave(i)
            })
            .collect()
    }

    /// Constant-rate rotation between the look-at orientations at the path
    /// endpoints, plus rotational jitter in the camera frame.
    pub fn camera_rotations(&self, z: &[f64], centers: &[Vector3<f64>]) -> Result<Vec<Rotation>> {
        let target = self.centroid();
        let first = look_at(&centers[0], &target);
        let last = look_at(&centers[centers.len() - 1], &target);
        let sweep = so3_log(&crate::geometry::relative_rotation(&first, &last))?;
        let (yaw, pitch) = (z[12] * self.rot_jitter_scale, z[13] * self.rot_jitter_scale);
        Ok((0..self.frame_count)
            .map(|i| {
                let s = i as f64 / (self.frame_count - 1) as f64;
                let base = first.compose(&so3_exp(&(sweep * s)));
                let wobble = Vector3::new(pitch * quarter_wave(i), yaw * alternating(i), 0.0);
                so3_exp(&wobble).compose(&base)
            })
            .collect())
    }

    /// Depth offset added to view `i` (point maps are left untouched).
    pub fn depth_bias(&self, z: &[f64], i: usize) -> f64 {
        self.depth_bias_scale * (z[14] + z[15] * alternating(i))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<GeometryFrame>> {
        if z.len() != LATENT_DIM {
            return Err(Error::ShapeMismatch {
                expected: LATENT_DIM,
                got: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        let centers = self.camera_centers(z);
        let rotations = self.camera_rotations(z, &centers)?;
        let k = self.intrinsics;
        let n_pix = k.width * k.height;
        let statics = self.lattice.len();
        let mut frames = Vec::with_capacity(self.frame_count);
        for (i, (c, r)) in centers.iter().zip(&rotations).enumerate() {
            let pose = CameraPose::from_center(*r, c);
            let mut points = self.lattice.clone();
            let mut flows = vec![Vector3::zeros(); statics];
            if let Some(dy) = &self.dynamic {
                for p in &dy.start {
                    points.push(p + dy.velocity * i as f64);
                    flows.push(dy.velocity);
                }
            }
            let mut best: Vec<Option<(f64, usize)>> = vec![None; n_pix];
            for (idx, p) in points.iter().enumerate() {
                if pose.to_camera(p).z <= Z_NEAR {
                    continue;
                }
                let Some(proj) = project(p, &pose, &k) else {
                    continue;
                };
                let Some((col, row)) = k.pixel_index(&proj.pixel) else {
                    continue;
                };
                let slot = &mut best[row * k.width + col];
                if slot.is_none_or(|(d, _)| proj.depth < d) {
                    *slot = Some((proj.depth, idx));
                }
            }
            let bias = self.depth_bias(z, i);
            let mut depth = vec![f64::NAN; n_pix];
            let mut point_map = vec![Vector3::zeros(); n_pix];
            let mut flow = vec![Vector3::zeros(); n_pix];
            for (pix, hit) in best.iter().enumerate() {
                if let Some((d, idx)) = hit {
                    let biased = d + bias;
                    depth[pix] = if biased > 0.0 { biased } else { f64::NAN };
                    point_map[pix] = points[*idx];
                    flow[pix] = flows[*idx];
                }
            }
            frames.push(GeometryFrame {
                pose,
                intrinsics: k,
                depth,
                point_map,
                flow: self.dynamic.is_some().then_some(flow),
            });
        }
        Ok(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{reprojection_error_per_view, reward_bundle, RewardConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_latent_is_perfectly_smooth_and_consistent() {
        let cfg = RewardConfig::default();
        for preset in ScenePreset::ALL {
            let dec = ToyDecoder::new(preset);
            let frames = dec.decode(&[0.0; LATENT_DIM]).unwrap();
            assert_eq!(frames.len(), 8);
            for f in &frames {
                f.validate().unwrap();
                assert!(f.depth.iter().filter(|d| d.is_finite()).count() > 40, "{preset:?} too sparse");
            }
            let b = reward_bundle(&frames, &cfg).unwrap();
            assert_abs_diff_eq!(b.r_motion, 1.0, epsilon = 1e-9);
            if preset != ScenePreset::DynamicObject {
                assert!(b.per_view_errors.iter().all(|e| *e <= 1e-9), "{preset:?}: {:?}", b.per_view_errors);
            }
        }
    }

    #[test]
    fn static_variant_of_dynamic_preset_is_consistent() {
        let dec = ToyDecoder::new(ScenePreset::DynamicObject).static_only();
        let z: Vec<f64> = (0..LATENT_DIM).map(|i| if i < 14 { 0.3 * (i as f64).sin() } else { 0.0 }).collect();
        let report = reprojection_error_per_view(&dec.decode(&z).unwrap(), &RewardConfig::default()).unwrap();
        assert!(report.errors.iter().all(|e| *e <= 1e-9));
    }

    #[test]
    fn dynamic_points_are_filtered() {
        let dec = ToyDecoder::new(ScenePreset::DynamicObject);
        let frames = dec.decode(&[0.0; LATENT_DIM]).unwrap();
        let moving = frames[0].flow.as_ref().unwrap().iter().filter(|f| f.norm() > 0.0).count();
        assert!(moving > 0);
        let report = reprojection_error_per_view(&frames, &RewardConfig::default()).unwrap();
        assert!(report.errors.iter().all(|e| *e <= 1e-9), "{:?}", report.errors);
    }

    #[test]
    fn jitter_raises_translational_error() {
        let dec = ToyDecoder::new(ScenePreset::StaticIndoor);
        let mut z = [0.0; LATENT_DIM];
        z[6] = 1.0;
        z[10] = -1.0;
        let b = reward_bundle(&dec.decode(&z).unwrap(), &RewardConfig::default()).unwrap();
        assert!(b.e_trans > 0.1);
        assert!(b.r_motion < 0.95);
    }

    #[test]
    fn depth_knob_sets_view_errors() {
        let dec = ToyDecoder::new(ScenePreset::FastPan);
        let mut z = [0.0; LATENT_DIM];
        z[14] = 0.5;
        z[15] = 0.25;
        let b = reward_bundle(&dec.decode(&z).unwrap(), &RewardConfig::default()).unwrap();
        for (i, e) in b.per_view_errors.iter().enumerate() {
            assert_abs_diff_eq!(*e, dec.depth_bias(&z, i).abs(), epsilon = 1e-9);
        }
        assert_abs_diff_eq!(b.r_geo, -0.2 * 0.75, epsilon = 1e-9);
    }

    #[test]
    fn decode_is_deterministic_and_checks_dimension() {
        let dec = ToyDecoder::new(ScenePreset::Orbit);
        let z: Vec<f64> = (0..LATENT_DIM).map(|i| 0.1 * i as f64 - 0.5).collect();
        let a = dec.decode(&z).unwrap();
        let b = dec.decode(&z).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert!(matches!(dec.decode(&z[..3]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn condition_round_trip() {
        for p in ScenePreset::ALL {
            assert_eq!(ScenePreset::from_condition(&p.condition()).unwrap(), p);
        }
    }
}
