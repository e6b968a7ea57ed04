//! On-disk formats: scene trajectories and parameter checkpoints (JSON).

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Rotation};
use crate::rewards::GeometryFrame;
use crate::stitching::{Activation, AffineLayer, GeometryHeads, HeadLayout, StitchedModel};
use crate::toy_world::{Architecture, PolicyNetwork};

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn parse_error(e: serde_json::Error) -> Error {
    Error::Format(format!("line {}, column {}: {e}", e.line(), e.column()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    rotation: Vec<f64>,
    translation: Vec<f64>,
    /// `null` marks invalid depth.
    depth: Vec<Option<f64>>,
    point_map: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flow: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    format_version: u32,
    frame_count: usize,
    height: usize,
    width: usize,
    intrinsics: IntrinsicsRecord,
    frames: Vec<FrameRecord>,
}

fn flatten3(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn finite(values: &[f64], what: &str, frame: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("frame {frame}: non-finite value in {what}")));
    }
    Ok(())
}

fn expect_len(got: usize, expected: usize, what: &str, frame: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Format(format!("frame {frame}: {what} has {got} values, expected {expected}")));
    }
    Ok(())
}

/// A sequence of geometry frames sharing one intrinsics block.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTrajectory {
    pub frames: Vec<GeometryFrame>,
}

impl SceneTrajectory {
    pub fn new(frames: Vec<GeometryFrame>) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("scene frames"))?;
        for f in &frames {
            if f.intrinsics != first.intrinsics {
                return Err(Error::Format("frames must share intrinsics".into()));
            }
            f.validate()?;
        }
        Ok(Self { frames })
    }

    pub fn to_json(&self) -> Result<String> {
        let k = self.frames[0].intrinsics;
        let n = k.width * k.height;
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let point_map = flatten3(&f.point_map);
            finite(&point_map, "point_map", i)?;
            let flow = f.flow.as_deref().map(flatten3);
            if let Some(fl) = &flow {
                finite(fl, "flow", i)?;
            }
            let rotation = f.pose.rotation.to_row_major().to_vec();
            let translation = vec![f.pose.translation.x, f.pose.translation.y, f.pose.translation.z];
            finite(&translation, "translation", i)?;
            expect_len(f.depth.len(), n, "depth", i)?;
            frames.push(FrameRecord {
                rotation,
                translation,
                depth: f.depth.iter().map(|d| d.is_finite().then_some(*d)).collect(),
                point_map,
                flow,
            });
        }
        let record = SceneRecord {
            format_version: SCENE_FORMAT_VERSION,
            frame_count: self.frames.len(),
            height: k.height,
            width: k.width,
            intrinsics: IntrinsicsRecord {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
            },
            frames,
        };
        serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: SceneRecord = serde_json::from_str(text).map_err(parse_error)?;
        if record.format_version != SCENE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", record.format_version)));
        }
        if record.frames.len() != record.frame_count {
            return Err(Error::Format(format!(
                "frame_count is {} but {} frames are present",
                record.frame_count,
                record.frames.len()
            )));
        }
        let ik = record.intrinsics;
        let k = Intrinsics::new(ik.fx, ik.fy, ik.cx, ik.cy, record.width, record.height)?;
        let n = record.width * record.height;
        let unflatten = |v: &[f64]| v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let mut frames = Vec::with_capacity(record.frames.len());
        for (i, f) in record.frames.iter().enumerate() {
            expect_len(f.rotation.len(), 9, "rotation", i)?;
            expect_len(f.translation.len(), 3, "translation", i)?;
            expect_len(f.depth.len(), n, "depth", i)?;
            expect_len(f.point_map.len(), 3 * n, "point_map", i)?;
            let rot: [f64; 9] = f.rotation.as_slice().try_into().expect("length checked");
            let rotation = Rotation::from_row_major(&rot).map_err(|e| Error::Format(format!("frame {i}: {e}")))?;
            let pose = CameraPose::new(rotation, Vector3::new(f.translation[0], f.translation[1], f.translation[2]))
                .map_err(|e| Error::Format(format!("frame {i}: {e}")))?;
            let flow = match &f.flow {
                Some(fl) => {
                    expect_len(fl.len(), 3 * n, "flow", i)?;
                    Some(unflatten(fl))
                }
                None => None,
            };
            frames.push(GeometryFrame {
                pose,
                intrinsics: k,
                depth: f.depth.iter().map(|d| d.unwrap_or(f64::NAN)).collect(),
                point_map: unflatten(&f.point_map),
                flow,
            });
        }
        Self::new(frames)
    }
}

/// Formats a float with 17 significant digits.
fn exact_number(v: f64) -> Result<Box<RawValue>> {
    if !v.is_finite() {
        return Err(Error::NonFinite("checkpoint parameter"));
    }
    RawValue::from_string(format!("{v:.16e}")).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn of(l: &AffineLayer) -> Self {
        Self {
            input: l.input_dim(),
            output: l.output_dim(),
            activation: l.activation,
        }
    }

    fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }

    fn build(&self, params: &[f64]) -> AffineLayer {
        let nw = self.input * self.output;
        AffineLayer {
            weight: DMatrix::from_column_slice(self.output, self.input, &params[..nw]),
            bias: DVector::from_column_slice(&params[nw..nw + self.output]),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadLayoutRecord {
    pub frames: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// What the flat parameter array describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelDescriptor {
    Policy {
        architecture: Architecture,
    },
    Stitched {
        stitch_layer: usize,
        connector: Vec<LayerShape>,
        downstream: Vec<LayerShape>,
        heads: Vec<LayerShape>,
        layout: HeadLayoutRecord,
    },
}

impl ModelDescriptor {
    pub fn param_count(&self) -> usize {
        match self {
            ModelDescriptor::Policy { architecture } => architecture.param_count(),
            ModelDescriptor::Stitched {
                connector,
                downstream,
                heads,
                ..
            } => connector.iter().chain(downstream).chain(heads).map(LayerShape::param_count).sum(),
        }
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    model: &'a ModelDescriptor,
    iteration: usize,
    seed: u64,
    config: &'a serde_json::Value,
    parameters: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format_version: u32,
    model: ModelDescriptor,
    iteration: usize,
    seed: u64,
    config: serde_json::Value,
    parameters: Vec<f64>,
}

/// Flat parameters plus everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelDescriptor,
    pub iteration: usize,
    pub seed: u64,
    pub config: serde_json::Value,
    pub parameters: Vec<f64>,
}

impl Checkpoint {
    pub fn for_policy(policy: &PolicyNetwork, iteration: usize, seed: u64, config: serde_json::Value) -> Self {
        Self {
            model: ModelDescriptor::Policy {
                architecture: policy.architecture(),
            },
            iteration,
            seed,
            config,
            parameters: policy.params().to_vec(),
        }
    }

    pub fn for_stitched(model: &StitchedModel, seed: u64, config: serde_json::Value) -> Self {
        let k = model.heads.layout.intrinsics;
        Self {
            model: ModelDescriptor::Stitched {
                stitch_layer: model.stitch_layer,
                connector: model.connector.iter().map(LayerShape::of).collect(),
                downstream: model.downstream.iter().map(LayerShape::of).collect(),
                heads: model.heads.heads.iter().map(LayerShape::of).collect(),
                layout: HeadLayoutRecord {
                    frames: model.heads.layout.frames,
                    fx: k.fx,
                    fy: k.fy,
                    cx: k.cx,
                    cy: k.cy,
                    width: k.width,
                    height: k.height,
                },
            },
            iteration: 0,
            seed,
            config,
            parameters: model.params(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let parameters = self.parameters.iter().map(|v| exact_number(*v)).collect::<Result<Vec<_>>>()?;
        let out = CheckpointOut {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: &self.model,
            iteration: self.iteration,
            seed: self.seed,
            config: &self.config,
            parameters,
        };
        serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: CheckpointIn = serde_json::from_str(text).map_err(parse_error)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", c.format_version)));
        }
        if c.parameters.len() != c.model.param_count() {
            return Err(Error::Format(format!(
                "{} parameters for a model with {}",
                c.parameters.len(),
                c.model.param_count()
            )));
        }
        Ok(Self {
            model: c.model,
            iteration: c.iteration,
            seed: c.seed,
            config: c.config,
            parameters: c.parameters,
        })
    }

    pub fn policy(&self) -> Result<PolicyNetwork> {
        match &self.model {
            ModelDescriptor::Policy { architecture } => PolicyNetwork::from_params(*architecture, self.parameters.clone()),
            _ => Err(Error::Format("checkpoint does not hold a policy".into())),
        }
    }

    pub fn stitched(&self) -> Result<StitchedModel> {
        let ModelDescriptor::Stitched {
            stitch_layer,
            connector,
            downstream,
            heads,
            layout,
        } = &self.model
        else {
            return Err(Error::Format("checkpoint does not hold a stitched model".into()));
        };
        let mut at = 0;
        let mut take = |shape: &LayerShape| {
            let l = shape.build(&self.parameters[at..]);
            at += shape.param_count();
            l
        };
        let connector: Vec<AffineLayer> = connector.iter().map(&mut take).collect();
        let downstream: Vec<AffineLayer> = downstream.iter().map(&mut take).collect();
        let head_layers: Vec<AffineLayer> = heads.iter().map(&mut take).collect();
        let head_layers: [AffineLayer; 4] = head_layers
            .try_into()
            .map_err(|_| Error::Format("stitched checkpoint needs exactly four heads".into()))?;
        let intrinsics = Intrinsics::new(layout.fx, layout.fy, layout.cx, layout.cy, layout.width, layout.height)?;
        let heads = GeometryHeads::new(
            HeadLayout {
                frames: layout.frames,
                intrinsics,
            },
            head_layers,
        )?;
        Ok(StitchedModel {
            connector,
            stitch_layer: *stitch_layer,
            downstream,
            heads,
        })
    }
}

/// Serializes each record as one compact JSON line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
