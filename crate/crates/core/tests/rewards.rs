use geoalign_core::geometry::{camera_center, so3_exp, CameraPose, Intrinsics, Rotation};
use geoalign_core::rewards::synthetic::fronto_parallel_scene;
use geoalign_core::rewards::{build_static_cloud, geometry_reward, motion_reward, GeometryFrame, RewardConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn k() -> Intrinsics {
    Intrinsics::new(12.0, 12.0, 7.5, 7.5, 16, 16).unwrap()
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

/// A trajectory of six poses with random centers and orientations.
fn trajectory() -> impl Strategy<Value = Vec<GeometryFrame>> {
    prop::collection::vec((vec3(1.0), vec3(0.3)), 6).prop_map(|steps| {
        let centers: Vec<Vector3<f64>> = steps.iter().map(|(c, _)| *c).collect();
        let mut frames = fronto_parallel_scene(&centers, 5.0, &k());
        for (f, (c, w)) in frames.iter_mut().zip(&steps) {
            f.pose = CameraPose::from_center(so3_exp(w), c);
        }
        frames
    })
}

fn with_poses(frames: &[GeometryFrame], poses: impl Fn(&CameraPose) -> CameraPose) -> Vec<GeometryFrame> {
    frames
        .iter()
        .map(|f| GeometryFrame {
            pose: poses(&f.pose),
            ..f.clone()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn motion_reward_in_unit_interval(frames in trajectory()) {
        let r = motion_reward(&frames, &RewardConfig::default()).unwrap();
        prop_assert!(r > 0.0 && r <= 1.0);
    }

    #[test]
    fn motion_reward_invariant_to_rigid_motion_and_scale(
        frames in trajectory(), w in vec3(3.0), shift in vec3(5.0), scale in 0.1..10.0f64,
    ) {
        let cfg = RewardConfig::default();
        let base = motion_reward(&frames, &cfg).unwrap();
        let q = so3_exp(&w);
        // x' = Qx + s: R' = RQᵀ, c' = Qc + s.
        let moved = with_poses(&frames, |p| {
            CameraPose::from_center(p.rotation.compose(&q.transpose()), &(q.rotate(&camera_center(p)) + shift))
        });
        let scaled = with_poses(&frames, |p| CameraPose::from_center(p.rotation, &(camera_center(p) * scale)));
        prop_assert!((motion_reward(&moved, &cfg).unwrap() - base).abs() <= 1e-9);
        prop_assert!((motion_reward(&scaled, &cfg).unwrap() - base).abs() <= 1e-9);
    }

    #[test]
    fn geometry_reward_is_non_positive_and_decreasing(
        offsets in prop::collection::vec(vec3(0.1), 4), view in 0usize..4, shift in 0.05..0.5f64,
    ) {
        let cfg = RewardConfig::default();
        let frames = fronto_parallel_scene(&offsets, 4.0, &k());
        prop_assert!(geometry_reward(&frames, &cfg).unwrap().abs() <= 1e-9);
        let shifted = |delta: f64| {
            let mut f = frames.clone();
            f[view].depth.iter_mut().for_each(|d| *d += delta);
            geometry_reward(&f, &cfg).unwrap()
        };
        let (small, large) = (shifted(shift), shifted(2.0 * shift));
        prop_assert!(small <= 0.0);
        prop_assert!(large < small);
    }

    #[test]
    fn static_cloud_ignores_frame_order(offsets in prop::collection::vec(vec3(0.3), 5), seed in any::<u64>()) {
        let cfg = RewardConfig::default();
        let frames = fronto_parallel_scene(&offsets, 4.0, &k());
        let mut shuffled = frames.clone();
        shuffled.rotate_left((seed % 5) as usize);
        shuffled.swap(0, (seed as usize / 5) % 5);
        prop_assert_eq!(build_static_cloud(&frames, &cfg).unwrap(), build_static_cloud(&shuffled, &cfg).unwrap());
    }
}

#[test]
fn identity_rotations_keep_rotational_term_zero() {
    let centers: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(0.2 * i as f64, 0.0, 0.0)).collect();
    let frames = fronto_parallel_scene(&centers, 4.0, &k());
    assert!(frames.iter().all(|f| f.pose.rotation == Rotation::identity()));
    assert!((motion_reward(&frames, &RewardConfig::default()).unwrap() - 1.0).abs() <= 1e-12);
}
