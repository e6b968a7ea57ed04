//! Two-hidden-layer tanh network used as the velocity field `v(x, t, c)`.
//!
//! Parameters live in one flat vector so optimizers, checkpoints and
//! finite-difference checks can treat them uniformly. Layout, per layer:
//! row-major weight matrix (`out × in`) followed by the bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden: [usize; 2],
}

impl Architecture {
    /// Toy-world policy: 16-dim latent, 4-dim condition, 32 units per layer.
    pub fn toy() -> Self {
        Self {
            latent_dim: super::decoder::LATENT_DIM,
            cond_dim: super::decoder::COND_DIM,
            hidden: [32, 32],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + 1 + self.cond_dim
    }

    fn layer_dims(&self) -> [(usize, usize); 3] {
        [
            (self.input_dim(), self.hidden[0]),
            (self.hidden[0], self.hidden[1]),
            (self.hidden[1], self.latent_dim),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of (weights, bias) for each layer in the flat vector.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        let mut at = 0;
        for (slot, (i, o)) in out.iter_mut().zip(self.layer_dims()) {
            *slot = (at, at + i * o);
            at += i * o + o;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    arch: Architecture,
    params: Vec<f64>,
}

/// Activations recorded by [`PolicyNetwork::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_in = x.len();
    for (row, bias) in w.chunks_exact(n_in).zip(b) {
        out.push(row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias);
    }
}

impl PolicyNetwork {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            params: vec![0.0; arch.param_count()],
            arch,
        }
    }

    /// Scaled-normal initialization (std `1/√fan_in`), biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(arch);
        for ((w0, b0), (n_in, _)) in arch.offsets().into_iter().zip(arch.layer_dims()) {
            let normal = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).expect("positive std");
            for p in &mut net.params[w0..b0] {
                *p = normal.sample(&mut rng);
            }
        }
        net
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_inputs(&self, x: &[f64], cond: &[f64]) -> Result<()> {
        if x.len() != self.arch.latent_dim {
            return Err(Error::ShapeMismatch {
                expected: self.arch.latent_dim,
                got: x.len(),
            });
        }
        if cond.len() != self.arch.cond_dim {
            return Err(Error::ShapeMismatch {
                expected: self.arch.cond_dim,
                got: cond.len(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_inputs(x, cond)?;
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x);
        input.push(t);
        input.extend_from_slice(cond);

        let [(w1, b1), (w2, b2), (w3, b3)] = self.arch.offsets();
        let [_, _, (_, out_dim)] = self.arch.layer_dims();
        let p = &self.params;
        let mut h1 = Vec::new();
        affine(&p[w1..b1], &p[b1..w2], &input, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = Vec::new();
        affine(&p[w2..b2], &p[b2..w3], &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = Vec::new();
        affine(&p[w3..b3], &p[b3..b3 + out_dim], &h2, &mut out);
        Ok((
            out,
            ForwardCache {
                input,
                hidden1: h1,
                hidden2: h2,
            },
        ))
    }

    pub fn forward(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.forward_cached(x, t, cond).map(|(v, _)| v)
    }

    /// Reverse-mode gradient of `⟨adjoint, v⟩` with respect to the flat
    /// parameters, accumulated into `grad`.
    pub fn accumulate_grad(&self, cache: &ForwardCache, adjoint: &[f64], grad: &mut [f64]) -> Result<()> {
        let dims = self.arch.layer_dims();
        if cache.input.len() != dims[0].0
            || cache.hidden1.len() != dims[1].0
            || cache.hidden2.len() != dims[2].0
        {
            return Err(Error::MissingCache);
        }
        if adjoint.len() != dims[2].1 {
            return Err(Error::ShapeMismatch {
                expected: dims[2].1,
                got: adjoint.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let offsets = self.arch.offsets();
        let layers: [(&[f64], Option<&[f64]>); 3] = [
            (&cache.input, None),
            (&cache.hidden1, Some(&cache.hidden1)),
            (&cache.hidden2, Some(&cache.hidden2)),
        ];
        let mut delta = adjoint.to_vec();
        for layer in (0..3).rev() {
            let (w0, b0) = offsets[layer];
            let (n_in, n_out) = dims[layer];
            let x = layers[layer].0;
            for o in 0..n_out {
                let d = delta[o];
                grad[b0 + o] += d;
                if d != 0.0 {
                    let row = &mut grad[w0 + o * n_in..w0 + (o + 1) * n_in];
                    row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                }
            }
            if layer == 0 {
                break;
            }
            // Back through the weights, then through tanh of the layer input.
            let w = &self.params[w0..b0];
            let mut prev = vec![0.0; n_in];
            for (o, row) in w.chunks_exact(n_in).enumerate() {
                let d = delta[o];
                if d != 0.0 {
                    prev.iter_mut().zip(row).for_each(|(p, wi)| *p += d * wi);
                }
            }
            let act = layers[layer].1.expect("hidden activation");
            prev.iter_mut().zip(act).for_each(|(p, a)| *p *= 1.0 - a * a);
            delta = prev;
        }
        Ok(())
    }

    pub fn grad(&self, cache: &ForwardCache, adjoint: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_grad(cache, adjoint, &mut g)?;
        Ok(g)
    }
}

impl VelocityField for PolicyNetwork {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, t, cond)
    }
}
