#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoalign_core::formats::SceneTrajectory;
use geoalign_core::geometry::project;
use geoalign_core::rewards::is_valid_depth;

pub const COMMANDS: [&str; 7] = ["pretrain", "align", "eval-rewards", "stitch", "guide", "perturb", "metrics"];

/// Small settings so every command finishes in seconds.
pub const QUICK_CONFIG: &str = r#"
seed = 5

[pretrain]
steps = 150

[grpo]
iterations = 3
group_size = 4
eval_rollouts = 2
optimizer = "adam"
learning_rate = 0.003

[guide]
seeds = 3
presets = ["static_indoor", "orbit"]

[stitching]
epochs = 40
calibration_size = 32

[perturb]
seeds = 3
inputs = 8
alphas = [0.0, 0.1]

[eval_rewards]
sample_scenes = 2
scenes = ["scene.json"]

[metrics]
pred = "scene.json"
gt = "scene.json"
matches = "matches.csv"
taus = [5.0, 15.0]
"#;

pub fn scratch(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("geoalign-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(&p).unwrap();
    p
}

pub fn geoalign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoalign"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_command(command: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    geoalign(&args, config.parent().unwrap())
}

/// All files below `root` except the timing metadata, keyed by relative path.
pub fn payload(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "metadata.json" {
                let key = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Exact correspondences between views 0 and 1 from the scene's own point
/// map, written as a matches CSV.
pub fn write_matches(scene: &SceneTrajectory, path: &Path) {
    let f0 = &scene.frames[0];
    let f1 = &scene.frames[1];
    let k = f0.intrinsics;
    let mut text = String::from("view_i,view_j,x_i,y_i,x_j,y_j\n");
    for (idx, p) in f0.point_map.iter().enumerate().step_by(7) {
        if !is_valid_depth(f0.depth[idx]) {
            continue;
        }
        let (Some(a), Some(b)) = (project(p, &f0.pose, &k), project(p, &f1.pose, &k)) else {
            continue;
        };
        text.push_str(&format!("0,1,{:?},{:?},{:?},{:?}\n", a.pixel.x, a.pixel.y, b.pixel.x, b.pixel.y));
    }
    fs::write(path, text).unwrap();
}

/// Scratch directory holding the quick config, a decoded toy scene and
/// its matches.
pub fn quick_workspace(name: &str) -> PathBuf {
    use geoalign_core::toy_world::{ScenePreset, ToyDecoder};
    let dir = scratch(name);
    fs::write(dir.join("config.toml"), QUICK_CONFIG).unwrap();
    let mut latent = vec![0.0; geoalign_core::toy_world::LATENT_DIM];
    latent[0] = 0.3;
    latent[7] = 0.2;
    let scene = SceneTrajectory::new(ToyDecoder::new(ScenePreset::Orbit).decode(&latent).unwrap()).unwrap();
    fs::write(dir.join("scene.json"), scene.to_json().unwrap()).unwrap();
    write_matches(&scene, &dir.join("matches.csv"));
    dir
}
