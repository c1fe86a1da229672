//! A small PointNet-style network with hand-written reverse mode.
//!
//! Every point goes through a shared encoder MLP and a global layer whose
//! outputs are max-pooled over the cloud. The dense head decodes one
//! 3-vector per point from `[point feature, pooled feature]` (or from the
//! pooled feature alone when skip connections are off); the direct head
//! decodes a single action vector from the pooled feature.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::SegPointCloud;
use crate::error::{Error, Result};
use crate::geom::{RotationKind, RotationRepr, Rotation3, Vec3};

/// Output head of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// One flow vector per point.
    Dense,
    /// One action vector: translation followed by a rotation parameterization.
    Direct(RotationKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-point feature width: 3 + number of classes.
    pub input_width: usize,
    /// Positions are multiplied by this before the first layer; class
    /// indicators are passed through.
    pub input_scale: f64,
    pub encoder: Vec<usize>,
    pub global: usize,
    pub decoder: Vec<usize>,
    pub use_skip: bool,
    pub head: Head,
}

impl Architecture {
    pub fn dense(input_width: usize) -> Self {
        Architecture {
            input_width,
            input_scale: 1.0,
            encoder: vec![64, 128],
            global: 256,
            decoder: vec![128, 128],
            use_skip: true,
            head: Head::Dense,
        }
    }

    pub fn direct(input_width: usize, rot: RotationKind) -> Self {
        Architecture {
            head: Head::Direct(rot),
            ..Self::dense(input_width)
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            Head::Dense => 3,
            Head::Direct(kind) => 3 + kind.dim(),
        }
    }

    fn encoder_out(&self) -> usize {
        self.encoder.last().copied().unwrap_or(self.input_width)
    }

    fn validate(&self) -> Result<()> {
        let widths = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .chain(std::iter::once(&self.global));
        if self.input_width == 0 || widths.into_iter().any(|&w| w == 0) {
            return Err(Error::BadConfig(format!("zero-width layer in {self:?}")));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::BadConfig(format!("input scale {} must be positive", self.input_scale)));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let mut dims = Vec::new();
        let mut width = self.input_width;
        for &w in &self.encoder {
            dims.push((width, w));
            width = w;
        }
        dims.push((width, self.global));
        width = match (self.head, self.use_skip) {
            (Head::Dense, true) => self.encoder_out() + self.global,
            _ => self.global,
        };
        for &w in &self.decoder {
            dims.push((width, w));
            width = w;
        }
        dims.push((width, self.out_dim()));

        let mut offset = 0;
        dims.into_iter()
            .map(|(input, output)| {
                let layer = Layer {
                    input,
                    output,
                    weight: offset,
                    bias: offset + input * output,
                };
                offset += input * output + output;
                layer
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.input * l.output + l.output).sum()
    }
}

/// Location of one affine layer inside the flat parameter vector. Weights
/// are stored input-major (`input × output`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    input: usize,
    output: usize,
    weight: usize,
    bias: usize,
}

impl Layer {
    fn range(&self) -> std::ops::Range<usize> {
        self.weight..self.bias + self.output
    }
}

/// `y = x·W + b` for `rows` rows of `x`.
fn affine(x: &[f64], rows: usize, l: &Layer, params: &[f64]) -> Vec<f64> {
    let w = &params[l.weight..l.bias];
    let b = &params[l.bias..l.bias + l.output];
    let mut y = Vec::with_capacity(rows * l.output);
    for r in 0..rows {
        y.extend_from_slice(b);
        let yr = &mut y[r * l.output..];
        for (k, &xk) in x[r * l.input..(r + 1) * l.input].iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wk = &w[k * l.output..(k + 1) * l.output];
            for (yo, wo) in yr[..l.output].iter_mut().zip(wk) {
                *yo += xk * wo;
            }
        }
    }
    y
}

fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Accumulates `∂W += xᵀ·dy`, `∂b += Σ dy` and returns `dx = dy·Wᵀ` when
/// requested. Rows of `dy` that are entirely zero are skipped.
fn affine_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    l: &Layer,
    params: &[f64],
    grad: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let w = &params[l.weight..l.bias];
    let mut dx = if want_dx { vec![0.0; rows * l.input] } else { Vec::new() };
    let (gw, gb) = grad[l.weight..l.bias + l.output].split_at_mut(l.input * l.output);
    for r in 0..rows {
        let dyr = &dy[r * l.output..(r + 1) * l.output];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (g, d) in gb.iter_mut().zip(dyr) {
            *g += d;
        }
        let xr = &x[r * l.input..(r + 1) * l.input];
        for k in 0..l.input {
            let xk = xr[k];
            let wk = &w[k * l.output..(k + 1) * l.output];
            if xk != 0.0 {
                let gk = &mut gw[k * l.output..(k + 1) * l.output];
                for (g, d) in gk.iter_mut().zip(dyr) {
                    *g += xk * d;
                }
            }
            if want_dx {
                dx[r * l.input + k] = wk.iter().zip(dyr).map(|(a, b)| a * b).sum();
            }
        }
    }
    dx
}

/// Zeroes `grad` where the post-ReLU activation is not positive.
fn relu_mask(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Activations saved by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    rows: usize,
    /// Input features followed by every encoder activation.
    encoder: Vec<Vec<f64>>,
    /// Per-point global-layer activations, `rows × global`.
    global: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    /// Some pooled channel had two points sharing a positive maximum.
    pub pool_tie: bool,
    /// Decoder input followed by every decoder activation (pre-head).
    decoder: Vec<Vec<f64>>,
    decoder_rows: usize,
    /// Skip path: pooled contribution of the first decoder layer is shared.
    skip: bool,
}

/// The network: architecture, flat parameters and the seed they came from.
#[derive(Clone, Debug)]
pub struct PointNetLite {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<f64>,
    seed: u64,
    frozen: Vec<bool>,
    generation: u64,
}

impl PointNetLite {
    /// He-initialised weights and zero biases from `seed`. The output layer
    /// starts at zero weights, so the first prediction is the identity action.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let mut params = vec![0.0; arch.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layers.len() - 1;
        for l in &layers[..last] {
            let normal = Normal::new(0.0, (2.0 / l.input as f64).sqrt()).expect("finite std");
            for p in &mut params[l.weight..l.bias] {
                *p = normal.sample(&mut rng);
            }
        }
        let mut net = PointNetLite {
            frozen: vec![false; layers.len()],
            arch,
            layers,
            params,
            seed,
            generation: 0,
        };
        if let Head::Direct(kind) = net.arch.head {
            let out = &net.layers[last];
            let identity = RotationRepr::encode(&Rotation3::identity(), kind);
            net.params[out.bias + 3..out.bias + out.output].copy_from_slice(identity.as_slice());
        }
        Ok(net)
    }

    pub fn from_params(arch: Architecture, seed: u64, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(arch, seed)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                self.params.len()
            )));
        }
        self.generation += 1;
        self.params = params;
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameter index range of layer `i` (weights then bias).
    pub fn layer_range(&self, i: usize) -> std::ops::Range<usize> {
        self.layers[i].range()
    }

    /// Frozen layers receive zero gradient.
    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.frozen[layer] = frozen;
    }

    /// Zeroes the weights and bias of the output layer.
    pub fn zero_output_layer(&mut self) {
        let r = self.layers[self.layers.len() - 1].range();
        self.params_mut()[r].fill(0.0);
    }

    fn check_input(&self, cloud: &SegPointCloud) -> Result<()> {
        if cloud.feature_width() != self.arch.input_width {
            return Err(Error::ShapeMismatch(format!(
                "cloud features are {} wide, network expects {}",
                cloud.feature_width(),
                self.arch.input_width
            )));
        }
        Ok(())
    }

    fn encode(&self, cloud: &SegPointCloud) -> Result<ForwardCache> {
        self.check_input(cloud)?;
        let rows = cloud.len();
        let n_enc = self.arch.encoder.len();
        let mut features = cloud.features();
        if self.arch.input_scale != 1.0 {
            for row in features.chunks_exact_mut(self.arch.input_width) {
                row[..3].iter_mut().for_each(|x| *x *= self.arch.input_scale);
            }
        }
        let mut encoder = vec![features];
        for l in &self.layers[..n_enc] {
            let mut h = affine(encoder.last().unwrap(), rows, l, &self.params);
            relu_in_place(&mut h);
            encoder.push(h);
        }
        let gl = &self.layers[n_enc];
        let mut global = affine(encoder.last().unwrap(), rows, gl, &self.params);
        relu_in_place(&mut global);

        let g = gl.output;
        let mut pooled = global[..g].to_vec();
        let mut argmax = vec![0; g];
        let mut tied = vec![false; g];
        for r in 1..rows {
            for c in 0..g {
                let v = global[r * g + c];
                if v > pooled[c] {
                    pooled[c] = v;
                    argmax[c] = r;
                    tied[c] = false;
                } else if v == pooled[c] && v > 0.0 {
                    tied[c] = true;
                }
            }
        }
        let pool_tie = tied.contains(&true);
        Ok(ForwardCache {
            generation: self.generation,
            rows,
            encoder,
            global,
            pooled,
            argmax,
            pool_tie,
            decoder: Vec::new(),
            decoder_rows: 0,
            skip: false,
        })
    }

    fn decoder_layers(&self) -> &[Layer] {
        &self.layers[self.arch.encoder.len() + 1..]
    }

    /// Runs the decoder stack (hidden layers + output layer) on `input`.
    /// With `shared`, the first layer's input is `[input_row, shared]` and
    /// the shared part is evaluated once.
    fn decode(&self, cache: &mut ForwardCache, input: Vec<f64>, rows: usize, shared: Option<&[f64]>) -> Vec<f64> {
        let layers = self.decoder_layers();
        let mut h = match shared {
            Some(g) => {
                let l = &layers[0];
                let split = l.input - g.len();
                let w = &self.params[l.weight..l.bias];
                let mut base = self.params[l.bias..l.bias + l.output].to_vec();
                for (k, &gk) in g.iter().enumerate() {
                    let wk = &w[(split + k) * l.output..(split + k + 1) * l.output];
                    for (b, wo) in base.iter_mut().zip(wk) {
                        *b += gk * wo;
                    }
                }
                let local = Layer {
                    input: split,
                    output: l.output,
                    weight: l.weight,
                    bias: l.bias,
                };
                let mut y = Vec::with_capacity(rows * l.output);
                for r in 0..rows {
                    y.extend_from_slice(&base);
                    let yr = &mut y[r * l.output..];
                    for k in 0..split {
                        let xk = input[r * split + k];
                        if xk == 0.0 {
                            continue;
                        }
                        let wk = &w[k * local.output..(k + 1) * local.output];
                        for (yo, wo) in yr[..l.output].iter_mut().zip(wk) {
                            *yo += xk * wo;
                        }
                    }
                }
                cache.decoder.push(input);
                if layers.len() > 1 {
                    relu_in_place(&mut y);
                }
                y
            }
            None => {
                let l = &layers[0];
                let mut y = affine(&input, rows, l, &self.params);
                cache.decoder.push(input);
                if layers.len() > 1 {
                    relu_in_place(&mut y);
                }
                y
            }
        };
        for (i, l) in layers.iter().enumerate().skip(1) {
            let mut y = affine(&h, rows, l, &self.params);
            if i + 1 < layers.len() {
                relu_in_place(&mut y);
            }
            cache.decoder.push(h);
            h = y;
        }
        cache.decoder_rows = rows;
        cache.skip = shared.is_some();
        h
    }

    /// One flow vector per input point.
    pub fn forward_dense(&self, cloud: &SegPointCloud) -> Result<(Vec<Vec3>, ForwardCache)> {
        if self.arch.head != Head::Dense {
            return Err(Error::ShapeMismatch("forward_dense on a direct-head network".into()));
        }
        let mut cache = self.encode(cloud)?;
        let rows = cache.rows;
        let out = if self.arch.use_skip {
            let local = cache.encoder.last().unwrap().clone();
            let pooled = cache.pooled.clone();
            self.decode(&mut cache, local, rows, Some(&pooled))
        } else {
            let pooled = cache.pooled.clone();
            let one = self.decode(&mut cache, pooled, 1, None);
            one.repeat(rows)
        };
        let flows = out.chunks_exact(3).map(Vec3::from_column_slice).collect();
        Ok((flows, cache))
    }

    /// A single action vector; invariant to the order of the input points.
    pub fn forward_direct(&self, cloud: &SegPointCloud) -> Result<(Vec<f64>, ForwardCache)> {
        if !matches!(self.arch.head, Head::Direct(_)) {
            return Err(Error::ShapeMismatch("forward_direct on a dense-head network".into()));
        }
        let mut cache = self.encode(cloud)?;
        let pooled = cache.pooled.clone();
        let out = self.decode(&mut cache, pooled, 1, None);
        Ok((out, cache))
    }

    /// Parameter gradient given `∂L/∂output`: `rows × 3` for the dense head
    /// (row-major) or the action vector for the direct head.
    ///
    /// Max-pooling routes gradient to the first point attaining the maximum.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let out_dim = self.arch.out_dim();
        let expected = match self.arch.head {
            Head::Dense => cache.rows * 3,
            Head::Direct(_) => out_dim,
        };
        if upstream.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, expected {expected}",
                upstream.len()
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let g_width = self.arch.global;

        // Collapse to the decoder's row count (one row without skip).
        let mut dy = if cache.decoder_rows == cache.rows || matches!(self.arch.head, Head::Direct(_)) {
            upstream.to_vec()
        } else {
            let mut sum = vec![0.0; out_dim];
            for row in upstream.chunks_exact(out_dim) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            sum
        };

        let layers = self.decoder_layers();
        let rows = cache.decoder_rows;
        let mut d_pooled = vec![0.0; g_width];
        let mut d_local: Option<Vec<f64>> = None;
        for i in (0..layers.len()).rev() {
            let l = &layers[i];
            let x = &cache.decoder[i];
            if i == 0 && cache.skip {
                // x holds only the per-point part; the pooled part is shared.
                let split = l.input - g_width;
                let local = Layer {
                    input: split,
                    output: l.output,
                    weight: l.weight,
                    bias: l.bias,
                };
                let w = &self.params[l.weight..l.bias];
                let mut dx = vec![0.0; rows * split];
                let mut dy_sum = vec![0.0; l.output];
                {
                    let (gw, gb) = grad[l.weight..l.bias + l.output].split_at_mut(l.input * l.output);
                    for r in 0..rows {
                        let dyr = &dy[r * l.output..(r + 1) * l.output];
                        if dyr.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        for ((s, g), d) in dy_sum.iter_mut().zip(gb.iter_mut()).zip(dyr) {
                            *s += d;
                            *g += d;
                        }
                        let xr = &x[r * split..(r + 1) * split];
                        for k in 0..split {
                            let xk = xr[k];
                            if xk != 0.0 {
                                let gk = &mut gw[k * local.output..(k + 1) * local.output];
                                for (g, d) in gk.iter_mut().zip(dyr) {
                                    *g += xk * d;
                                }
                            }
                            let wk = &w[k * l.output..(k + 1) * l.output];
                            dx[r * split + k] = wk.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        }
                    }
                    for (k, &gk) in cache.pooled.iter().enumerate() {
                        let row = (split + k) * l.output;
                        if gk != 0.0 {
                            for (g, d) in gw[row..row + l.output].iter_mut().zip(&dy_sum) {
                                *g += gk * d;
                            }
                        }
                        d_pooled[k] = w[row..row + l.output].iter().zip(&dy_sum).map(|(a, b)| a * b).sum();
                    }
                }
                d_local = Some(dx);
            } else {
                let mut dx = affine_backward(x, &dy, rows, l, &self.params, &mut grad, true);
                if i == 0 {
                    d_pooled = dx;
                } else {
                    relu_mask(&mut dx, x);
                    dy = dx;
                }
            }
        }

        // Max-pool and global layer.
        let n_enc = self.arch.encoder.len();
        let gl = &self.layers[n_enc];
        let mut d_global = vec![0.0; cache.rows * g_width];
        for (c, (&r, &d)) in cache.argmax.iter().zip(&d_pooled).enumerate() {
            if cache.global[r * g_width + c] > 0.0 {
                d_global[r * g_width + c] = d;
            }
        }
        let enc_out = cache.encoder.last().unwrap();
        let mut d_enc = affine_backward(enc_out, &d_global, cache.rows, gl, &self.params, &mut grad, true);
        if let Some(local) = d_local {
            for (a, b) in d_enc.iter_mut().zip(&local) {
                *a += b;
            }
        }

        for i in (0..n_enc).rev() {
            relu_mask(&mut d_enc, &cache.encoder[i + 1]);
            let l = &self.layers[i];
            d_enc = affine_backward(&cache.encoder[i], &d_enc, cache.rows, l, &self.params, &mut grad, i > 0);
        }

        for (layer, frozen) in self.layers.iter().zip(&self.frozen) {
            if *frozen {
                grad[layer.range()].fill(0.0);
            }
        }
        Ok(grad)
    }
}
