//! Layer stitching: replacing the front of a layered geometry network with
//! a trained connector that reads encoder latents.
//!
//! A [`LayeredGeometryNet`] is a stack of affine layers `T(u) = W·act(u) + b`
//! followed by four linear heads (pose, depth, points, flow).
//! [`stitch_search`] fits a connector from latents to every candidate layer's
//! features and keeps the best layer. [`align_finetune`] then trains the
//! connector, downstream layers and heads against the reference network's
//! predictions with a weighted L1 loss.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Rotation};
use crate::metrics::{auc_from_pairs, pair_errors, rotation_accuracy_from_pairs, translation_accuracy_from_pairs, PairError};
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};
use crate::rewards::GeometryFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Identity => u.clone(),
            Activation::Tanh => u.map(f64::tanh),
        }
    }
}

/// `T(u) = W·act(u) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::ShapeMismatch {
                expected: weight.nrows(),
                got: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Gaussian weights with standard deviation `gain/√in`, zero bias.
    pub fn random(input: usize, output: usize, activation: Activation, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain / (input.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: DMatrix::from_fn(output, input, |_, _| normal.sample(rng)),
            bias: DVector::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        Ok(&self.weight * self.activation.apply(u) + &self.bias)
    }

    fn zeros_like(&self) -> LayerGrad {
        LayerGrad {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }

    /// Adds parameter gradients for one sample and returns the gradient
    /// with respect to the layer input.
    fn backward(&self, u: &DVector<f64>, grad_out: &DVector<f64>, acc: &mut LayerGrad) -> DVector<f64> {
        let a = self.activation.apply(u);
        acc.weight += grad_out * a.transpose();
        acc.bias += grad_out;
        let ga = self.weight.transpose() * grad_out;
        match self.activation {
            Activation::Identity => ga,
            Activation::Tanh => ga.zip_map(&a, |g, ai| g * (1.0 - ai * ai)),
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(self.bias.as_slice());
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.len();
        self.weight.as_mut_slice().copy_from_slice(&src[..nw]);
        let nb = self.bias.len();
        self.bias.as_mut_slice().copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

#[derive(Debug, Clone)]
struct LayerGrad {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl LayerGrad {
    fn write(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(self.bias.as_slice());
    }

    fn add(&mut self, other: &LayerGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// Runs `layers` in order, returning every intermediate including the input.
fn chain_forward(layers: &[&AffineLayer], x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.clone());
    for layer in layers {
        let next = layer.forward(acts.last().expect("non-empty"))?;
        acts.push(next);
    }
    Ok(acts)
}

fn chain_backward(layers: &[&AffineLayer], acts: &[DVector<f64>], grad_out: DVector<f64>, grads: &mut [LayerGrad]) -> DVector<f64> {
    let mut g = grad_out;
    for k in (0..layers.len()).rev() {
        g = layers[k].backward(&acts[k], &g, &mut grads[k]);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Pose,
    Depth,
    Point,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Pose, Modality::Depth, Modality::Point, Modality::Flow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Pose => "pose",
            Modality::Depth => "depth",
            Modality::Point => "point",
            Modality::Flow => "flow",
        }
    }
}

/// Frame count and per-frame grid of the head outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLayout {
    pub frames: usize,
    pub intrinsics: Intrinsics,
}

impl HeadLayout {
    pub fn pixels(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }

    /// Output width of each head: 12 pose values (row-major 3×3 then
    /// translation) per frame, one depth, three point and three flow values
    /// per pixel.
    pub fn head_dim(&self, m: Modality) -> usize {
        let p = self.pixels();
        self.frames
            * match m {
                Modality::Pose => 12,
                Modality::Depth => p,
                Modality::Point | Modality::Flow => 3 * p,
            }
    }
}

/// Raw head outputs; depth is already passed through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub values: [DVector<f64>; 4],
}

impl HeadOutputs {
    pub fn get(&self, m: Modality) -> &DVector<f64> {
        &self.values[m.index()]
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pose, depth, point and flow heads reading the final trunk features.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryHeads {
    pub layout: HeadLayout,
    pub heads: [AffineLayer; 4],
}

impl GeometryHeads {
    pub fn new(layout: HeadLayout, heads: [AffineLayer; 4]) -> Result<Self> {
        let input = heads[0].input_dim();
        for m in Modality::ALL {
            let h = &heads[m.index()];
            if h.output_dim() != layout.head_dim(m) {
                return Err(Error::ShapeMismatch {
                    expected: layout.head_dim(m),
                    got: h.output_dim(),
                });
            }
            if h.input_dim() != input {
                return Err(Error::ShapeMismatch {
                    expected: input,
                    got: h.input_dim(),
                });
            }
        }
        Ok(Self { layout, heads })
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].input_dim()
    }

    pub fn forward(&self, features: &DVector<f64>) -> Result<HeadOutputs> {
        let mut values: [DVector<f64>; 4] = Default::default();
        for m in Modality::ALL {
            let mut out = self.heads[m.index()].forward(features)?;
            if m == Modality::Depth {
                out.apply(|v| *v = softplus(*v));
            }
            values[m.index()] = out;
        }
        Ok(HeadOutputs { values })
    }

    /// Backpropagates `d loss / d output` of every head; returns the
    /// gradient with respect to the features.
    fn backward(&self, features: &DVector<f64>, grad_outputs: &[DVector<f64>; 4], grads: &mut [LayerGrad]) -> DVector<f64> {
        let mut g_feat = DVector::zeros(features.len());
        for m in Modality::ALL {
            let head = &self.heads[m.index()];
            let mut g = grad_outputs[m.index()].clone();
            if m == Modality::Depth {
                let pre = &head.weight * head.activation.apply(features) + &head.bias;
                g.zip_apply(&pre, |gi, p| *gi *= sigmoid(p));
            }
            g_feat += head.backward(features, &g, &mut grads[m.index()]);
        }
        g_feat
    }

    /// Converts head outputs into per-frame geometry; the raw pose block is
    /// projected onto SO(3).
    pub fn to_frames(&self, out: &HeadOutputs) -> Result<Vec<GeometryFrame>> {
        let l = &self.layout;
        let p = l.pixels();
        let pose = out.get(Modality::Pose);
        let depth = out.get(Modality::Depth);
        let point = out.get(Modality::Point);
        let flow = out.get(Modality::Flow);
        let vec3 = |v: &DVector<f64>, i: usize| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
        (0..l.frames)
            .map(|f| {
                let b = 12 * f;
                let m = Matrix3::from_fn(|r, c| pose[b + 3 * r + c]);
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("pose head"));
                }
                let rotation = Rotation::project_to_so3(&m);
                let translation = Vector3::new(pose[b + 9], pose[b + 10], pose[b + 11]);
                let frame = GeometryFrame {
                    pose: CameraPose::new(rotation, translation)?,
                    intrinsics: l.intrinsics,
                    depth: depth.as_slice()[f * p..(f + 1) * p].to_vec(),
                    point_map: (f * p..(f + 1) * p).map(|i| vec3(point, i)).collect(),
                    flow: Some((f * p..(f + 1) * p).map(|i| vec3(flow, i)).collect()),
                };
                frame.validate()?;
                Ok(frame)
            })
            .collect()
    }

    pub fn poses(&self, out: &HeadOutputs) -> Result<Vec<CameraPose>> {
        Ok(self.to_frames(out)?.into_iter().map(|f| f.pose).collect())
    }
}

/// `Φ = T_L ∘ … ∘ T_1` followed by the geometry heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredGeometryNet {
    pub layers: Vec<AffineLayer>,
    pub heads: GeometryHeads,
}

impl LayeredGeometryNet {
    pub fn new(layers: Vec<AffineLayer>, heads: GeometryHeads) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layers"));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    expected: w[0].output_dim(),
                    got: w[1].input_dim(),
                });
            }
        }
        let last = layers.last().expect("non-empty").output_dim();
        if last != heads.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: last,
                got: heads.input_dim(),
            });
        }
        Ok(Self { layers, heads })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Feature width after layer `l` (1-based).
    pub fn feature_dim(&self, l: usize) -> usize {
        self.layers[l - 1].output_dim()
    }

    /// `Φ_{i:j}(u)` for `1 ≤ i ≤ j ≤ L`.
    pub fn sub_network(&self, i: usize, j: usize, u: &DVector<f64>) -> Result<DVector<f64>> {
        if i == 0 || i > j || j > self.depth() {
            return Err(Error::Config(format!("invalid layer range {i}..={j} for depth {}", self.depth())));
        }
        let mut h = u.clone();
        for layer in &self.layers[i - 1..j] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn prefix(&self, l: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.sub_network(1, l, x)
    }

    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.sub_network(1, self.depth(), x)
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<HeadOutputs> {
        self.heads.forward(&self.features(x)?)
    }
}

/// Stand-in for the generator's latent encoder: `E(x) = act(W·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Encoder {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
            activation: Activation::Identity,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.weight.ncols() {
            return Err(Error::ShapeMismatch {
                expected: self.weight.ncols(),
                got: x.len(),
            });
        }
        Ok(self.activation.apply(&(&self.weight * x + &self.bias)))
    }
}

/// Maps latents back to observations through a minimum-norm inverse and a
/// uniform quantizer, so the reference pipeline sees slightly corrupted
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossyDecoder {
    pseudo_inverse: DMatrix<f64>,
    bias: DVector<f64>,
    activation: Activation,
    pub quantization_step: f64,
}

impl LossyDecoder {
    pub fn new(encoder: &Encoder, quantization_step: f64) -> Result<Self> {
        let pseudo_inverse = encoder
            .weight
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("encoder pseudo-inverse: {e}")))?;
        Ok(Self {
            pseudo_inverse,
            bias: encoder.bias.clone(),
            activation: encoder.activation,
            quantization_step,
        })
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        let pre = match self.activation {
            Activation::Identity => z.clone(),
            Activation::Tanh => z.map(|v| v.clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh()),
        };
        let x = &self.pseudo_inverse * (pre - &self.bias);
        if self.quantization_step > 0.0 {
            let q = self.quantization_step;
            x.map(|v| (v / q).round() * q)
        } else {
            x
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConnectorKind {
    /// `S(z) = P·z + q`, fitted in closed form.
    Affine,
    /// `S(z) = P₂·tanh(P₁·z + q₁) + q₂`, fitted by gradient descent.
    Hidden { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityWeights {
    pub pose: f64,
    pub depth: f64,
    pub point: f64,
    pub flow: f64,
}

impl Default for ModalityWeights {
    fn default() -> Self {
        Self {
            pose: 1.0,
            depth: 1.0,
            point: 1.0,
            flow: 1.0,
        }
    }
}

impl ModalityWeights {
    pub fn only(m: Modality) -> Self {
        let mut w = [0.0; 4];
        w[m.index()] = 1.0;
        Self::from_array(w)
    }

    pub fn from_array(w: [f64; 4]) -> Self {
        Self {
            pose: w[0],
            depth: w[1],
            point: w[2],
            flow: w[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pose, self.depth, self.point, self.flow]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub weights: ModalityWeights,
    pub calibration_size: usize,
    pub connector: ConnectorKind,
    pub search_learning_rate: f64,
    pub search_epochs: usize,
    pub finetune_learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            weights: ModalityWeights::default(),
            calibration_size: 64,
            connector: ConnectorKind::Affine,
            search_learning_rate: 1e-2,
            search_epochs: 500,
            finetune_learning_rate: 3e-3,
            epochs: 1500,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights.as_array();
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("modality weights must be finite and non-negative".into()));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one modality weight must be positive".into()));
        }
        if self.calibration_size == 0 {
            return Err(Error::Config("calibration_size must be positive".into()));
        }
        if let ConnectorKind::Hidden { width: 0 } = self.connector {
            return Err(Error::Config("hidden connector width must be positive".into()));
        }
        Ok(())
    }
}

/// Connector, stitch index and the reference network's remaining layers
/// and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedModel {
    pub connector: Vec<AffineLayer>,
    /// 1-based index of the last replaced reference layer.
    pub stitch_layer: usize,
    pub downstream: Vec<AffineLayer>,
    pub heads: GeometryHeads,
}

impl StitchedModel {
    pub fn from_reference(reference: &LayeredGeometryNet, stitch_layer: usize, connector: Vec<AffineLayer>) -> Result<Self> {
        if stitch_layer == 0 || stitch_layer > reference.depth() {
            return Err(Error::Config(format!("stitch layer {stitch_layer} outside 1..={}", reference.depth())));
        }
        let out = connector.last().ok_or(Error::Empty("connector"))?.output_dim();
        if out != reference.feature_dim(stitch_layer) {
            return Err(Error::ShapeMismatch {
                expected: reference.feature_dim(stitch_layer),
                got: out,
            });
        }
        Ok(Self {
            connector,
            stitch_layer,
            downstream: reference.layers[stitch_layer..].to_vec(),
            heads: reference.heads.clone(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.connector[0].input_dim()
    }

    fn trunk(&self) -> Vec<&AffineLayer> {
        self.connector.iter().chain(&self.downstream).collect()
    }

    pub fn predict(&self, z: &DVector<f64>) -> Result<HeadOutputs> {
        let mut h = z.clone();
        for layer in self.trunk() {
            h = layer.forward(&h)?;
        }
        self.heads.forward(&h)
    }

    pub fn param_count(&self) -> usize {
        self.trunk().iter().map(|l| l.param_count()).sum::<usize>() + self.heads.heads.iter().map(|h| h.param_count()).sum::<usize>()
    }

    /// Trainable parameters: connector, downstream layers, then heads in
    /// modality order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.trunk() {
            l.write_params(&mut out);
        }
        for h in &self.heads.heads {
            h.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in self.connector.iter_mut().chain(self.downstream.iter_mut()) {
            off += l.read_params(&params[off..]);
        }
        for h in self.heads.heads.iter_mut() {
            off += h.read_params(&params[off..]);
        }
        Ok(())
    }

    /// Adds Gaussian noise of standard deviation `scale` to every connector
    /// parameter.
    pub fn perturb_connector(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.connector {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += scale * n;
            }
        }
    }
}

/// Alignment error of one candidate stitch layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: usize,
    pub error: f64,
    /// The latent design matrix was rank deficient.
    pub low_rank: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchSearch {
    pub layer: usize,
    pub connector: Vec<AffineLayer>,
    pub table: Vec<LayerError>,
    pub low_rank: bool,
}

fn mean_squared_residual(pred: &[DVector<f64>], target: &[DVector<f64>]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).norm_squared()).sum::<f64>() / pred.len() as f64
}

/// Least-squares affine map `z ↦ P·z + q` onto `targets`, via the SVD
/// pseudo-inverse of `[Z 1]`.
fn fit_affine(latents: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<(AffineLayer, bool)> {
    let m = latents.len();
    let dz = latents[0].len();
    let dy = targets[0].len();
    let design = DMatrix::from_fn(m, dz + 1, |r, c| if c < dz { latents[r][c] } else { 1.0 });
    let y = DMatrix::from_fn(m, dy, |r, c| targets[r][c]);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (m.max(dz + 1) as f64);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let solution = svd.solve(&y, tol).map_err(|e| Error::Config(format!("least squares: {e}")))?;
    let weight = solution.rows(0, dz).transpose();
    let bias = solution.row(dz).transpose();
    Ok((AffineLayer::new(weight, bias, Activation::Identity)?, rank < dz + 1))
}

fn fit_hidden(latents: &[DVector<f64>], targets: &[DVector<f64>], width: usize, cfg: &AlignConfig, seed: u64) -> Result<Vec<AffineLayer>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dz = latents[0].len();
    let dy = targets[0].len();
    let mut layers = vec![
        AffineLayer::random(dz, width, Activation::Identity, 1.0, &mut rng),
        AffineLayer::random(width, dy, Activation::Tanh, 1.0, &mut rng),
    ];
    let n_params: usize = layers.iter().map(|l| l.param_count()).sum();
    let mut opt = Optimizer::new(OptimizerKind::Adam, n_params, cfg.search_learning_rate, 0.0);
    let m = latents.len() as f64;
    for epoch in 0..cfg.search_epochs {
        let refs: Vec<&AffineLayer> = layers.iter().collect();
        let mut grads: Vec<LayerGrad> = layers.iter().map(|l| l.zeros_like()).collect();
        for (z, y) in latents.iter().zip(targets) {
            let acts = chain_forward(&refs, z)?;
            let g = (acts.last().expect("output") - y) * (2.0 / m);
            chain_backward(&refs, &acts, g, &mut grads);
        }
        let mut flat = Vec::with_capacity(n_params);
        grads.iter().for_each(|g| g.write(&mut flat));
        let mut params = Vec::with_capacity(n_params);
        layers.iter().for_each(|l| l.write_params(&mut params));
        opt.set_lr(cosine_lr(cfg.search_learning_rate, epoch, cfg.search_epochs));
        opt.descend(&mut params, &flat);
        let mut off = 0;
        for l in &mut layers {
            off += l.read_params(&params[off..]);
        }
    }
    Ok(layers)
}

/// Fits a fresh connector to every candidate layer and returns the layer
/// with the smallest mean squared alignment error. Exact ties go to the
/// smaller layer.
pub fn stitch_search(encoder: &Encoder, net: &LayeredGeometryNet, calib: &[DVector<f64>], cfg: &AlignConfig) -> Result<StitchSearch> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let latents = calib.iter().map(|x| encoder.encode(x)).collect::<Result<Vec<_>>>()?;
    let candidates: Vec<Result<(LayerError, Vec<AffineLayer>)>> = (1..=net.depth())
        .into_par_iter()
        .map(|l| {
            let targets = calib.iter().map(|x| net.prefix(l, x)).collect::<Result<Vec<_>>>()?;
            let (connector, low_rank) = match cfg.connector {
                ConnectorKind::Affine => {
                    let (layer, low_rank) = fit_affine(&latents, &targets)?;
                    (vec![layer], low_rank)
                }
                ConnectorKind::Hidden { width } => (fit_hidden(&latents, &targets, width, cfg, cfg.seed.wrapping_add(l as u64))?, false),
            };
            let refs: Vec<&AffineLayer> = connector.iter().collect();
            let pred = latents
                .iter()
                .map(|z| chain_forward(&refs, z).map(|mut a| a.pop().expect("output")))
                .collect::<Result<Vec<_>>>()?;
            let error = mean_squared_residual(&pred, &targets);
            Ok((LayerError { layer: l, error, low_rank }, connector))
        })
        .collect();
    let mut table = Vec::with_capacity(net.depth());
    let mut best: Option<(usize, f64, Vec<AffineLayer>)> = None;
    for c in candidates {
        let (row, connector) = c?;
        if !row.error.is_finite() {
            return Err(Error::NonFinite("alignment error"));
        }
        if best.as_ref().is_none_or(|(_, e, _)| row.error < *e) {
            best = Some((row.layer, row.error, connector));
        }
        table.push(row);
    }
    let (layer, _, connector) = best.expect("at least one layer");
    let low_rank = table.iter().any(|r| r.low_rank);
    if low_rank {
        log::warn!("stitch search: latent design matrix is rank deficient");
    }
    Ok(StitchSearch {
        layer,
        connector,
        table,
        low_rank,
    })
}

/// Per-modality mean absolute error and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLoss {
    pub per_modality: [f64; 4],
    pub weighted: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn loss_and_grad(
    model: &StitchedModel,
    latents: &[DVector<f64>],
    targets: &[HeadOutputs],
    weights: &ModalityWeights,
    want_grad: bool,
) -> Result<(AlignmentLoss, Vec<f64>)> {
    let w = weights.as_array();
    let trunk = model.trunk();
    let n_trunk = trunk.len();
    let m = latents.len() as f64;
    let per_sample: Vec<Result<([f64; 4], Vec<LayerGrad>)>> = latents
        .par_iter()
        .zip(targets.par_iter())
        .map(|(z, target)| {
            let acts = chain_forward(&trunk, z)?;
            let feat = acts.last().expect("features");
            let out = model.heads.forward(feat)?;
            let mut sums = [0.0; 4];
            let mut g_out: [DVector<f64>; 4] = Default::default();
            for md in Modality::ALL {
                let i = md.index();
                let diff = out.values[i].clone() - &target.values[i];
                let n = diff.len() as f64;
                sums[i] = diff.iter().map(|d| d.abs()).sum::<f64>() / (n * m);
                g_out[i] = diff.map(|d| w[i] * sign(d) / (n * m));
            }
            let mut grads: Vec<LayerGrad> = trunk.iter().map(|l| l.zeros_like()).collect();
            if want_grad {
                grads.extend(model.heads.heads.iter().map(|h| h.zeros_like()));
                let g_feat = model.heads.backward(feat, &g_out, &mut grads[n_trunk..]);
                chain_backward(&trunk, &acts, g_feat, &mut grads[..n_trunk]);
            }
            Ok((sums, grads))
        })
        .collect();
    let mut per_modality = [0.0; 4];
    let mut total: Option<Vec<LayerGrad>> = None;
    for r in per_sample {
        let (sums, grads) = r?;
        for i in 0..4 {
            per_modality[i] += sums[i];
        }
        if want_grad {
            match &mut total {
                None => total = Some(grads),
                Some(t) => t.iter_mut().zip(&grads).for_each(|(a, b)| a.add(b)),
            }
        }
    }
    let weighted = per_modality.iter().zip(&w).map(|(l, wi)| l * wi).sum();
    let mut flat = Vec::new();
    if let Some(t) = total {
        flat.reserve(model.param_count());
        t.iter().for_each(|g| g.write(&mut flat));
    }
    Ok((AlignmentLoss { per_modality, weighted }, flat))
}

fn reference_targets(reference: &LayeredGeometryNet, encoder: &Encoder, data: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, Vec<HeadOutputs>)> {
    let latents = data.iter().map(|x| encoder.encode(x)).collect::<Result<Vec<_>>>()?;
    let targets = data.iter().map(|x| reference.predict(x)).collect::<Result<Vec<_>>>()?;
    Ok((latents, targets))
}

fn check_heads(stitched: &StitchedModel, reference: &LayeredGeometryNet) -> Result<()> {
    for m in Modality::ALL {
        let (a, b) = (stitched.heads.layout.head_dim(m), reference.heads.layout.head_dim(m));
        if a != b {
            return Err(Error::ShapeMismatch { expected: b, got: a });
        }
    }
    Ok(())
}

/// Weighted L1 between stitched predictions on `E(x)` and reference
/// predictions on `x`.
pub fn alignment_loss(
    stitched: &StitchedModel,
    reference: &LayeredGeometryNet,
    encoder: &Encoder,
    data: &[DVector<f64>],
    weights: &ModalityWeights,
) -> Result<AlignmentLoss> {
    check_heads(stitched, reference)?;
    if data.is_empty() {
        return Err(Error::Empty("alignment data"));
    }
    let (latents, targets) = reference_targets(reference, encoder, data)?;
    loss_and_grad(stitched, &latents, &targets, weights, false).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Weighted loss before each epoch's update, then the final loss.
    pub losses: Vec<f64>,
}

impl FinetuneLog {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Full-batch Adam with cosine decay on the weighted L1 alignment loss over
/// the connector, downstream layers and heads.
pub fn align_finetune(
    stitched: &StitchedModel,
    reference: &LayeredGeometryNet,
    encoder: &Encoder,
    data: &[DVector<f64>],
    cfg: &AlignConfig,
) -> Result<(StitchedModel, FinetuneLog)> {
    cfg.validate()?;
    check_heads(stitched, reference)?;
    if data.is_empty() {
        return Err(Error::Empty("alignment data"));
    }
    let (latents, targets) = reference_targets(reference, encoder, data)?;
    let mut model = stitched.clone();
    let mut params = model.params();
    let mut opt = Optimizer::new(OptimizerKind::Adam, params.len(), cfg.finetune_learning_rate, 0.0);
    let mut log = FinetuneLog::default();
    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_grad(&model, &latents, &targets, &cfg.weights, true)?;
        if !loss.weighted.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("alignment loss"));
        }
        log.losses.push(loss.weighted);
        opt.set_lr(cosine_lr(cfg.finetune_learning_rate, epoch, cfg.epochs));
        opt.descend(&mut params, &grad);
        model.set_params(&params)?;
    }
    let (loss, _) = loss_and_grad(&model, &latents, &targets, &cfg.weights, false)?;
    log.losses.push(loss.weighted);
    Ok((model, log))
}

/// Connector, downstream layers and heads applied to one latent.
pub fn stitched_predict(stitched: &StitchedModel, latent: &DVector<f64>) -> Result<Vec<GeometryFrame>> {
    if latent.len() != stitched.latent_dim() {
        return Err(Error::ShapeMismatch {
            expected: stitched.latent_dim(),
            got: latent.len(),
        });
    }
    stitched.heads.to_frames(&stitched.predict(latent)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Stitched model reading perturbed latents directly.
    Stitched,
    /// Reference network reading observations decoded from perturbed latents.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub alpha: f64,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub racc: f64,
    pub tacc: f64,
    pub auc: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    /// One row per `(alpha, pipeline, seed)`.
    pub per_seed: Vec<RobustnessRow>,
}

impl RobustnessTable {
    /// Seed-averaged rows, one per `(alpha, pipeline)`; `seed` holds the
    /// number of seeds averaged.
    pub fn summary(&self) -> Vec<RobustnessRow> {
        let mut out: Vec<RobustnessRow> = Vec::new();
        for r in &self.per_seed {
            match out.iter_mut().find(|o| o.alpha == r.alpha && o.pipeline == r.pipeline) {
                Some(o) => {
                    o.racc += r.racc;
                    o.tacc += r.tacc;
                    o.auc += r.auc;
                    o.n_pairs += r.n_pairs;
                    o.seed += 1;
                }
                None => out.push(RobustnessRow { seed: 1, ..*r }),
            }
        }
        for o in &mut out {
            let n = o.seed as f64;
            o.racc /= n;
            o.tacc /= n;
            o.auc /= n;
        }
        out
    }
}

fn metric_row(alpha: f64, pipeline: Pipeline, seed: u64, pairs: &[PairError], tau: f64) -> Result<RobustnessRow> {
    Ok(RobustnessRow {
        alpha,
        pipeline,
        seed,
        racc: rotation_accuracy_from_pairs(pairs, tau)?,
        tacc: translation_accuracy_from_pairs(pairs, tau)?,
        auc: auc_from_pairs(pairs, tau)?,
        n_pairs: pairs.len(),
    })
}

/// Threshold in degrees used by [`perturbation_study`].
pub const ROBUSTNESS_TAU_DEG: f64 = 5.0;

/// Perturbs latents as `z′ = z + α‖z‖ε` and scores both pipelines against
/// reference poses on clean inputs. For a given seed, `ε` is shared across
/// all `α`.
pub fn perturbation_study(
    stitched: &StitchedModel,
    reference: &LayeredGeometryNet,
    encoder: &Encoder,
    decoder: &LossyDecoder,
    inputs: &[DVector<f64>],
    alphas: &[f64],
    seeds: &[u64],
) -> Result<RobustnessTable> {
    if alphas.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Config("alphas must be non-negative".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("perturbation inputs"));
    }
    let latents = inputs.iter().map(|x| encoder.encode(x)).collect::<Result<Vec<_>>>()?;
    let truth = inputs
        .iter()
        .map(|x| reference.heads.poses(&reference.predict(x)?))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Result<Vec<RobustnessRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<DVector<f64>> = latents
                .iter()
                .map(|z| DVector::from_fn(z.len(), |_, _| StandardNormal.sample(&mut rng)))
                .collect();
            let mut rows = Vec::with_capacity(2 * alphas.len());
            for &alpha in alphas {
                let mut stitched_pairs = Vec::new();
                let mut reference_pairs = Vec::new();
                for ((z, eps), gt) in latents.iter().zip(&noise).zip(&truth) {
                    let zp = z + eps * (alpha * z.norm());
                    let s = stitched.heads.poses(&stitched.predict(&zp)?)?;
                    stitched_pairs.extend(pair_errors(&s, gt)?);
                    let r = reference.heads.poses(&reference.predict(&decoder.decode(&zp))?)?;
                    reference_pairs.extend(pair_errors(&r, gt)?);
                }
                rows.push(metric_row(alpha, Pipeline::Stitched, seed, &stitched_pairs, ROBUSTNESS_TAU_DEG)?);
                rows.push(metric_row(alpha, Pipeline::Reference, seed, &reference_pairs, ROBUSTNESS_TAU_DEG)?);
            }
            Ok(rows)
        })
        .collect();
    let mut per_seed = Vec::new();
    for r in rows {
        per_seed.extend(r?);
    }
    Ok(RobustnessTable { per_seed })
}

/// A reference network whose second-layer features are an exact affine
/// function of the encoder latent, with nonlinear neighbours on both sides.
pub mod planted {
    use super::*;

    pub const INPUT_DIM: usize = 12;
    pub const LATENT_DIM: usize = 8;
    pub const FEATURE_DIM: usize = 16;
    pub const PLANTED_LAYER: usize = 2;

    #[derive(Debug, Clone, PartialEq)]
    pub struct PlantedProblem {
        pub encoder: Encoder,
        pub net: LayeredGeometryNet,
        /// Affine map from latents to layer-2 features.
        pub true_connector: AffineLayer,
    }

    pub fn layout() -> HeadLayout {
        HeadLayout {
            frames: 4,
            intrinsics: Intrinsics::new(4.0, 4.0, 1.5, 1.5, 4, 4).expect("valid intrinsics"),
        }
    }

    fn heads(rng: &mut ChaCha8Rng) -> GeometryHeads {
        let layout = layout();
        let mut heads: [AffineLayer; 4] =
            Modality::ALL.map(|m| AffineLayer::random(FEATURE_DIM, layout.head_dim(m), Activation::Tanh, 0.5, rng));
        // Pose biases: identity rotation and frames spread along x.
        let pose = &mut heads[Modality::Pose.index()];
        for f in 0..layout.frames {
            for d in 0..3 {
                pose.bias[12 * f + 4 * d] = 1.0;
            }
            pose.bias[12 * f + 9] = f as f64;
            pose.bias[12 * f + 11] = 2.0;
        }
        heads[Modality::Depth.index()].bias.fill(1.0);
        GeometryHeads::new(layout, heads).expect("consistent head shapes")
    }

    impl PlantedProblem {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first = AffineLayer::random(INPUT_DIM, LATENT_DIM, Activation::Identity, 1.5, &mut rng);
            let encoder = Encoder {
                weight: first.weight.clone(),
                bias: first.bias.clone(),
                activation: Activation::Tanh,
            };
            let mut second = AffineLayer::random(LATENT_DIM, FEATURE_DIM, Activation::Tanh, 1.5, &mut rng);
            second.bias = DVector::from_fn(FEATURE_DIM, |_, _| rng.gen_range(-0.5..0.5));
            let third = AffineLayer::random(FEATURE_DIM, FEATURE_DIM, Activation::Tanh, 1.5, &mut rng);
            let fourth = AffineLayer::random(FEATURE_DIM, FEATURE_DIM, Activation::Tanh, 1.5, &mut rng);
            let true_connector = AffineLayer::new(second.weight.clone(), second.bias.clone(), Activation::Identity).expect("shapes");
            let net = LayeredGeometryNet::new(vec![first, second, third, fourth], heads(&mut rng)).expect("consistent shapes");
            Self {
                encoder,
                net,
                true_connector,
            }
        }

        /// Standard-normal observations.
        pub fn inputs(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| DVector::from_fn(INPUT_DIM, |_, _| StandardNormal.sample(&mut rng)))
                .collect()
        }

        /// Stitched model built from the exact connector.
        pub fn perfect_stitch(&self) -> StitchedModel {
            StitchedModel::from_reference(&self.net, PLANTED_LAYER, vec![self.true_connector.clone()]).expect("planted shapes")
        }
    }
}
