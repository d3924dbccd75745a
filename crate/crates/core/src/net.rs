//! Feed-forward network with per-example gradients and low-precision hooks.
//!
//! For a layer inside the active [`QuantPolicy`] every operand of its
//! three matrix products is quantized, and so is each product's result:
//!
//! * forward: `Z = q(q(X) · q(W)ᵀ)`, then the bias is added
//! * weight gradient: `dW = q(q(dZ)ᵀ · q(X))`
//! * input gradient: `dX = q(q(dZ) · q(W))`
//!
//! Convolutions go through im2col so they reduce to the same three
//! products. Rounding is treated as identity for differentiation.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::arch::{parse_architecture, Architecture, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::quant::{quantize_values, QuantGrid};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::DetRng;

/// Set of layer ids whose compute runs in simulated low precision.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuantPolicy {
    layer_ids: BTreeSet<usize>,
}

impl QuantPolicy {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn singleton(id: usize) -> Self {
        Self::from_ids([id])
    }

    pub fn from_ids(ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layer_ids: ids.into_iter().collect(),
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.layer_ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layer_ids.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layer_ids.iter().copied()
    }

    pub fn union(&self, other: &QuantPolicy) -> QuantPolicy {
        Self {
            layer_ids: self.layer_ids.union(&other.layer_ids).copied().collect(),
        }
    }
}

/// Weight and bias of a dense or conv layer.
///
/// Dense weights are `[out, in]`; conv weights are `[out, in·k·k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<Option<LayerParams>>,
}

/// Deep copy of the parameters plus the RNG position at capture time.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    arch: Architecture,
    params: Vec<Option<LayerParams>>,
    rng: DetRng,
}

/// Per-example gradients of the per-example loss, one flattened row per example.
///
/// Row layout follows [`Network::flat_params`]: layers in order, weight then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads {
    batch: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PerExampleGrads {
    pub fn new(batch: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * dim {
            return Err(Error::Shape(format!(
                "{batch} rows of {dim} need {} values, got {}",
                batch * dim,
                data.len()
            )));
        }
        Ok(Self { batch, dim, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Total parameter count P.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column-wise sum over examples, accumulated in row order.
    pub fn sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let b = self.batch as f64;
        self.sum().into_iter().map(|v| v / b).collect()
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear {
        /// Input as used by the product (quantized when the layer is in policy),
        /// `[B, in]` for dense and `[B, in·k·k, oh·ow]` for conv.
        input: Vec<f64>,
        /// Weight as used by the product.
        weight: Vec<f64>,
        quantized: bool,
    },
    Relu {
        mask: Vec<bool>,
    },
    Passive,
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    batch: usize,
    caches: Vec<LayerCache>,
    logits: Tensor,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Quantization context for one pass: `None` is the plain full-precision path.
type QuantCtx<'a> = Option<(&'a QuantGrid, &'a QuantPolicy)>;

fn maybe_quantize(values: Vec<f64>, on: Option<&QuantGrid>, rng: &mut DetRng) -> Result<Vec<f64>> {
    match on {
        Some(grid) => quantize_values(&values, grid, rng),
        None => Ok(values),
    }
}

/// Parses `arch_text` and initializes weights with seeded He fan-in normals;
/// biases start at zero.
pub fn build_network(arch_text: &str, seed: u64) -> Result<Network> {
    let arch = parse_architecture(arch_text)?;
    Ok(Network::init(arch, seed))
}

impl Network {
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = DetRng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .map(|layer| {
                let (rows, fan_in) = match layer.kind {
                    LayerKind::Dense { inputs, outputs } => (outputs, inputs),
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => (out_channels, in_channels * kernel * kernel),
                    _ => return None,
                };
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..rows * fan_in)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect();
                Some(LayerParams {
                    weight: Tensor::new(vec![rows, fan_in], data).expect("weight shape"),
                    bias: Tensor::zeros(vec![rows]),
                })
            })
            .collect();
        Self { arch, params }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_shape.iter().product()
    }

    pub fn n_classes(&self) -> usize {
        self.arch.layers.last().map(|l| l.out_size()).unwrap_or(0)
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Ids of dense and conv layers.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        self.arch
            .layers
            .iter()
            .filter(|l| l.kind.is_quantizable())
            .map(|l| l.id)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// `(offset, len)` of each layer's parameters in the flat layout.
    pub fn param_ranges(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|p| {
                let len = p.as_ref().map_or(0, |p| p.weight.len() + p.bias.len());
                let range = (offset, len);
                offset += len;
                range
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().flatten() {
            for t in [&mut p.weight, &mut p.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// `θ ← θ − step·direction` over the flat layout.
    pub fn apply_update(&mut self, direction: &[f64], step: f64) -> Result<()> {
        if direction.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "update has {} entries for {} parameters",
                direction.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().flatten() {
            for t in [&mut p.weight, &mut p.bias] {
                let n = t.len();
                for (w, d) in t.data_mut().iter_mut().zip(&direction[offset..offset + n]) {
                    *w -= step * d;
                }
                offset += n;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, rng: &DetRng) -> ParamSnapshot {
        ParamSnapshot {
            arch: self.arch.clone(),
            params: self.params.clone(),
            rng: rng.clone(),
        }
    }

    /// Restores parameters and rewinds `rng` to the captured position.
    pub fn restore(&mut self, snapshot: &ParamSnapshot, rng: &mut DetRng) -> Result<()> {
        if snapshot.arch != self.arch {
            return Err(Error::Config(
                "snapshot was taken from a different architecture".into(),
            ));
        }
        self.params.clone_from(&snapshot.params);
        *rng = snapshot.rng.clone();
        Ok(())
    }

    fn check_policy(&self, policy: &QuantPolicy) -> Result<()> {
        for id in policy.ids() {
            match self.arch.layers.get(id) {
                None => return Err(Error::Policy(format!("unknown layer id {id}"))),
                Some(l) if !l.kind.is_quantizable() => {
                    return Err(Error::Policy(format!(
                        "layer {id} ({}) is not quantizable",
                        l.kind.name()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rows() == 0 {
            return Err(Error::Batch("empty batch".into()));
        }
        if batch.row_len() != self.input_size() {
            return Err(Error::Shape(format!(
                "batch rows have {} values, network expects {:?}",
                batch.row_len(),
                self.arch.input_shape
            )));
        }
        batch.check_finite()
    }

    /// Forward pass with the layers in `policy` computed in low precision.
    pub fn forward(
        &self,
        batch: &Tensor,
        policy: &QuantPolicy,
        quantizer: &QuantGrid,
        rng: &mut DetRng,
    ) -> Result<ForwardTrace> {
        self.check_policy(policy)?;
        self.forward_impl(batch, Some((quantizer, policy)), rng)
    }

    /// Full-precision forward pass; touches no randomness.
    pub fn forward_fp(&self, batch: &Tensor) -> Result<ForwardTrace> {
        let mut unused = DetRng::seed_from_u64(0);
        self.forward_impl(batch, None, &mut unused)
    }

    fn forward_impl(&self, batch: &Tensor, ctx: QuantCtx<'_>, rng: &mut DetRng) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let b = batch.rows();
        let mut act = batch.data().to_vec();
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        for (layer, params) in self.arch.layers.iter().zip(&self.params) {
            let grid = ctx.and_then(|(g, p)| p.contains(layer.id).then_some(g));
            let (out, cache) = match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    let p = params.as_ref().expect("dense params");
                    let x = maybe_quantize(act, grid, rng)?;
                    let w = maybe_quantize(p.weight.data().to_vec(), grid, rng)?;
                    let z = maybe_quantize(matmul_bt(&x, &w, b, inputs, outputs), grid, rng)?;
                    let mut y = z;
                    for row in y.chunks_exact_mut(outputs) {
                        for (v, bias) in row.iter_mut().zip(p.bias.data()) {
                            *v += bias;
                        }
                    }
                    let cache = LayerCache::Linear {
                        input: x,
                        weight: w,
                        quantized: grid.is_some(),
                    };
                    (y, cache)
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let p = params.as_ref().expect("conv params");
                    let x = maybe_quantize(act, grid, rng)?;
                    let w = maybe_quantize(p.weight.data().to_vec(), grid, rng)?;
                    let geo = ConvGeometry::new(layer, in_channels, kernel, stride);
                    let cols: Vec<f64> = x
                        .chunks_exact(layer.in_size())
                        .flat_map(|xi| geo.im2col(xi))
                        .collect();
                    let col_len = geo.patch * geo.positions;
                    let mut z = Vec::with_capacity(b * out_channels * geo.positions);
                    for ci in cols.chunks_exact(col_len) {
                        z.extend(matmul(&w, ci, out_channels, geo.patch, geo.positions));
                    }
                    let mut y = maybe_quantize(z, grid, rng)?;
                    for sample in y.chunks_exact_mut(out_channels * geo.positions) {
                        for (ch, plane) in sample.chunks_exact_mut(geo.positions).enumerate() {
                            let bias = p.bias.data()[ch];
                            plane.iter_mut().for_each(|v| *v += bias);
                        }
                    }
                    let cache = LayerCache::Linear {
                        input: cols,
                        weight: w,
                        quantized: grid.is_some(),
                    };
                    (y, cache)
                }
                LayerKind::Relu => {
                    let mask: Vec<bool> = act.iter().map(|&v| v > 0.0).collect();
                    let y = act
                        .iter()
                        .zip(&mask)
                        .map(|(&v, &m)| if m { v } else { 0.0 })
                        .collect();
                    (y, LayerCache::Relu { mask })
                }
                LayerKind::AvgPool { size } => {
                    let y = act
                        .chunks_exact(layer.in_size())
                        .flat_map(|xi| avgpool_forward(xi, &layer.in_shape, size))
                        .collect();
                    (y, LayerCache::Passive)
                }
                LayerKind::Flatten => (act, LayerCache::Passive),
            };
            act = out;
            caches.push(cache);
        }
        let logits = Tensor::new(vec![b, self.n_classes()], act)?;
        logits.check_finite()?;
        Ok(ForwardTrace {
            batch: b,
            caches,
            logits,
        })
    }

    /// Gradients of each example's cross-entropy loss, one backward replay per
    /// example. Each example quantizes with its own RNG substream derived from
    /// a single draw on `rng`, so results do not depend on thread scheduling.
    pub fn backward_per_example(
        &self,
        trace: &ForwardTrace,
        targets: &[usize],
        policy: &QuantPolicy,
        quantizer: &QuantGrid,
        rng: &mut DetRng,
    ) -> Result<PerExampleGrads> {
        self.check_policy(policy)?;
        self.backward_impl(trace, targets, Some((quantizer, policy)), rng)
    }

    /// Full-precision per-example gradients.
    pub fn backward_per_example_fp(
        &self,
        trace: &ForwardTrace,
        targets: &[usize],
    ) -> Result<PerExampleGrads> {
        let mut unused = DetRng::seed_from_u64(0);
        self.backward_impl(trace, targets, None, &mut unused)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        targets: &[usize],
        ctx: QuantCtx<'_>,
        rng: &mut DetRng,
    ) -> Result<PerExampleGrads> {
        if targets.len() != trace.batch {
            return Err(Error::Batch(format!(
                "{} targets for a batch of {}",
                targets.len(),
                trace.batch
            )));
        }
        if trace.caches.len() != self.arch.layers.len() {
            return Err(Error::Batch("trace was produced by a different network".into()));
        }
        let n_classes = self.n_classes();
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
            return Err(Error::Batch(format!("target {bad} outside 0..{n_classes}")));
        }
        let base_seed = match ctx {
            Some(_) => rng.next_u64(),
            None => 0,
        };
        let dim = self.param_count();
        let rows: Vec<Vec<f64>> = (0..trace.batch)
            .into_par_iter()
            .map(|i| {
                let mut sub = DetRng::seed_from_u64(base_seed);
                sub.set_stream(i as u64);
                self.backward_one(trace, i, targets[i], ctx, &mut sub)
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(trace.batch * dim);
        for row in rows {
            data.extend(row);
        }
        PerExampleGrads::new(trace.batch, dim, data)
    }

    fn backward_one(
        &self,
        trace: &ForwardTrace,
        i: usize,
        target: usize,
        ctx: QuantCtx<'_>,
        rng: &mut DetRng,
    ) -> Result<Vec<f64>> {
        let mut grad = softmax(trace.logits.row(i));
        grad[target] -= 1.0;

        let ranges = self.param_ranges();
        let mut out = vec![0.0; self.param_count()];
        let mut upstream = grad;
        for (idx, layer) in self.arch.layers.iter().enumerate().rev() {
            let need_input_grad = idx > 0;
            let cache = &trace.caches[idx];
            let grid = ctx.and_then(|(g, p)| p.contains(layer.id).then_some(g));
            upstream = match (layer.kind, cache) {
                (LayerKind::Dense { inputs, outputs }, LayerCache::Linear { input, weight, quantized }) => {
                    debug_assert_eq!(*quantized, grid.is_some());
                    let (off, _) = ranges[idx];
                    let x = &input[i * inputs..(i + 1) * inputs];
                    let dz = maybe_quantize(upstream.clone(), grid, rng)?;
                    let dw = maybe_quantize(matmul(&dz, x, outputs, 1, inputs), grid, rng)?;
                    out[off..off + dw.len()].copy_from_slice(&dw);
                    out[off + dw.len()..off + dw.len() + outputs].copy_from_slice(&upstream);
                    if need_input_grad {
                        maybe_quantize(matmul(&dz, weight, 1, outputs, inputs), grid, rng)?
                    } else {
                        Vec::new()
                    }
                }
                (
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                    },
                    LayerCache::Linear { input, weight, .. },
                ) => {
                    let geo = ConvGeometry::new(layer, in_channels, kernel, stride);
                    let col_len = geo.patch * geo.positions;
                    let cols = &input[i * col_len..(i + 1) * col_len];
                    let (off, _) = ranges[idx];
                    let db: Vec<f64> = upstream
                        .chunks_exact(geo.positions)
                        .map(|plane| plane.iter().sum())
                        .collect();
                    let dz = maybe_quantize(upstream, grid, rng)?;
                    let dw = maybe_quantize(
                        matmul_bt(&dz, cols, out_channels, geo.positions, geo.patch),
                        grid,
                        rng,
                    )?;
                    out[off..off + dw.len()].copy_from_slice(&dw);
                    out[off + dw.len()..off + dw.len() + out_channels].copy_from_slice(&db);
                    if need_input_grad {
                        let dcols = matmul_at(weight, &dz, out_channels, geo.patch, geo.positions);
                        maybe_quantize(geo.col2im(&dcols), grid, rng)?
                    } else {
                        Vec::new()
                    }
                }
                (LayerKind::Relu, LayerCache::Relu { mask }) => {
                    let n = layer.in_size();
                    upstream
                        .iter()
                        .zip(&mask[i * n..(i + 1) * n])
                        .map(|(&g, &m)| if m { g } else { 0.0 })
                        .collect()
                }
                (LayerKind::AvgPool { size }, _) => avgpool_backward(&upstream, &layer.in_shape, size),
                (LayerKind::Flatten, _) => upstream,
                _ => return Err(Error::Batch("trace does not match network layers".into())),
            };
        }
        Ok(out)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss_batch(
        &self,
        batch: &Tensor,
        targets: &[usize],
        policy: &QuantPolicy,
        quantizer: &QuantGrid,
        rng: &mut DetRng,
    ) -> Result<f64> {
        if batch.rows() == 0 || targets.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        let trace = self.forward(batch, policy, quantizer, rng)?;
        mean_cross_entropy(trace.logits(), targets)
    }

    pub fn loss_batch_fp(&self, batch: &Tensor, targets: &[usize]) -> Result<f64> {
        let trace = self.forward_fp(batch)?;
        mean_cross_entropy(trace.logits(), targets)
    }

    /// Arg-max class per example, full precision.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let trace = self.forward_fp(batch)?;
        let logits = trace.logits();
        Ok((0..logits.rows())
            .map(|i| {
                logits
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one example: `logsumexp(z) − z_target`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn mean_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Batch(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let n_classes = logits.row_len();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= n_classes {
            return Err(Error::Batch(format!("target {t} outside 0..{n_classes}")));
        }
        total += cross_entropy(logits.row(i), t);
    }
    Ok(total / targets.len() as f64)
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    patch: usize,
    positions: usize,
}

impl ConvGeometry {
    fn new(layer: &LayerSpec, channels: usize, kernel: usize, stride: usize) -> Self {
        let (height, width) = (layer.in_shape[1], layer.in_shape[2]);
        let (out_h, out_w) = (layer.out_shape[1], layer.out_shape[2]);
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h,
            out_w,
            patch: channels * kernel * kernel,
            positions: out_h * out_w,
        }
    }

    /// `[C·k·k, oh·ow]` patch matrix of one example.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.patch * self.positions];
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    for oi in 0..self.out_h {
                        let src = (c * self.height + oi * self.stride + ki) * self.width + kj;
                        let dst = row * self.positions + oi * self.out_w;
                        for oj in 0..self.out_w {
                            cols[dst + oj] = x[src + oj * self.stride];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.channels * self.height * self.width];
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    for oi in 0..self.out_h {
                        let dst = (c * self.height + oi * self.stride + ki) * self.width + kj;
                        let src = row * self.positions + oi * self.out_w;
                        for oj in 0..self.out_w {
                            x[dst + oj * self.stride] += cols[src + oj];
                        }
                    }
                }
            }
        }
        x
    }
}

fn avgpool_forward(x: &[f64], in_shape: &[usize], size: usize) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / size, w / size);
    let norm = (size * size) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for di in 0..size {
                    for dj in 0..size {
                        acc += x[(ch * h + oi * size + di) * w + oj * size + dj];
                    }
                }
                out[(ch * oh + oi) * ow + oj] = acc / norm;
            }
        }
    }
    out
}

fn avgpool_backward(dy: &[f64], in_shape: &[usize], size: usize) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / size, w / size);
    let norm = (size * size) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let g = dy[(ch * oh + oi) * ow + oj] / norm;
                for di in 0..size {
                    for dj in 0..size {
                        dx[(ch * h + oi * size + di) * w + oj * size + dj] = g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    const MLP: &str = "dense in=784 out=128\nrelu\ndense in=128 out=10";

    #[test]
    fn parameter_count() {
        let net = build_network(MLP, 7).unwrap();
        assert_eq!(net.param_count(), 784 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(net.param_count(), 101_770);
        assert_eq!(net.quantizable_layers(), vec![0, 2]);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(build_network(MLP, 7).unwrap(), build_network(MLP, 7).unwrap());
        assert_ne!(build_network(MLP, 7).unwrap(), build_network(MLP, 8).unwrap());
        let net = build_network(MLP, 7).unwrap();
        assert!(net.params()[0].as_ref().unwrap().bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn conv_logit_shape() {
        let text = "input shape=1x28x28\nconv2d in=1 out=4 kernel=3 stride=1\nrelu\nflatten\ndense in=2704 out=10";
        let net = build_network(text, 1).unwrap();
        let batch = Tensor::new(vec![3, 1, 28, 28], vec![0.1; 3 * 784]).unwrap();
        let trace = net.forward_fp(&batch).unwrap();
        assert_eq!(trace.logits().shape(), &[3, 10]);
    }

    #[test]
    fn policy_must_name_quantizable_layers() {
        let net = build_network(MLP, 1).unwrap();
        let batch = Tensor::new(vec![1, 784], vec![0.0; 784]).unwrap();
        let mut rng = DetRng::seed_from_u64(0);
        let grid = QuantGrid::fp4();
        assert!(net.forward(&batch, &QuantPolicy::singleton(1), &grid, &mut rng).is_err());
        assert!(net.forward(&batch, &QuantPolicy::singleton(9), &grid, &mut rng).is_err());
        assert!(net.forward(&batch, &QuantPolicy::singleton(2), &grid, &mut rng).is_ok());
    }

    #[test]
    fn grid_inputs_give_exact_products() {
        // x = [1, 0.5], W = [[0.25, 0.5], [0.5, 1]]: every operand and the
        // product Z = [0.5, 1.0] are on the grid, so quantization is exact.
        let mut net = build_network("dense in=2 out=2", 0).unwrap();
        let p = net.params_mut()[0].as_mut().unwrap();
        p.weight = Tensor::new(vec![2, 2], vec![0.25, 0.5, 0.5, 1.0]).unwrap();
        let batch = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let grid = QuantGrid::fp4();
        let mut rng = DetRng::seed_from_u64(3);
        let policy = QuantPolicy::singleton(0);
        let t = net.forward(&batch, &policy, &grid, &mut rng).unwrap();
        assert_eq!(t.logits().data(), &[0.5, 1.0]);
        assert_eq!(net.forward_fp(&batch).unwrap().logits().data(), &[0.5, 1.0]);
    }

    #[test]
    fn off_grid_product_is_unbiased() {
        // Z = [0.625, 0.75]: 0.75 is the scale and stays exact, 0.625 is rounded.
        let mut net = build_network("dense in=2 out=2", 0).unwrap();
        let p = net.params_mut()[0].as_mut().unwrap();
        p.weight = Tensor::new(vec![2, 2], vec![0.5, 0.25, 1.0, -0.5]).unwrap();
        let batch = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let grid = QuantGrid::fp4();
        let mut rng = DetRng::seed_from_u64(3);
        let policy = QuantPolicy::singleton(0);
        let n = 20_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let t = net.forward(&batch, &policy, &grid, &mut rng).unwrap();
            assert_eq!(t.logits().data()[1], 0.75);
            mean += t.logits().data()[0] / n as f64;
        }
        // per-draw std is 0.125, so SE ≈ 0.0009
        assert!((mean - 0.625).abs() < 0.004);
    }

    #[test]
    fn zero_network_gradients() {
        let mut net = build_network("dense in=3 out=4", 0).unwrap();
        for p in net.params_mut().iter_mut().flatten() {
            p.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let batch = Tensor::zeros(vec![1, 3]);
        let trace = net.forward_fp(&batch).unwrap();
        let grads = net.backward_per_example_fp(&trace, &[2]).unwrap();
        let row = grads.row(0);
        assert!(row[..12].iter().all(|&g| g == 0.0));
        assert_eq!(&row[12..], &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn loss_values() {
        let net = build_network("dense in=2 out=10", 0).unwrap();
        let uniform = Tensor::zeros(vec![1, 10]);
        let loss = mean_cross_entropy(&uniform, &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let mut confident = vec![0.0; 10];
        confident[4] = 100.0;
        let l = mean_cross_entropy(&Tensor::new(vec![1, 10], confident).unwrap(), &[4]).unwrap();
        assert!(l < 1e-40);

        let batch = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let both = net.loss_batch_fp(&batch, &[1, 7]).unwrap();
        let a = net.loss_batch_fp(&Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap(), &[1]).unwrap();
        let b = net.loss_batch_fp(&Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap(), &[7]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = build_network("dense in=2 out=3", 0).unwrap();
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(mean_cross_entropy(&logits, &[]).is_err());
        let batch = Tensor::zeros(vec![1, 2]);
        let mut rng = DetRng::seed_from_u64(0);
        assert!(net
            .loss_batch(&batch, &[], &QuantPolicy::empty(), &QuantGrid::fp4(), &mut rng)
            .is_err());
    }

    #[test]
    fn target_count_must_match() {
        let net = build_network("dense in=2 out=3", 0).unwrap();
        let batch = Tensor::zeros(vec![2, 2]);
        let trace = net.forward_fp(&batch).unwrap();
        assert!(net.backward_per_example_fp(&trace, &[0]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut net = build_network(MLP, 3).unwrap();
        let mut rng = DetRng::seed_from_u64(11);
        let original = net.clone();
        let snap = net.snapshot(&rng);
        let noise = vec![0.01; net.param_count()];
        net.apply_update(&noise, 1.0).unwrap();
        rng.next_u64();
        assert_ne!(net, original);
        net.restore(&snap, &mut rng).unwrap();
        assert_eq!(net, original);
        assert_eq!(rng, DetRng::seed_from_u64(11));

        let mut other = build_network("dense in=784 out=10", 3).unwrap();
        assert!(other.restore(&snap, &mut rng).is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = build_network(MLP, 5).unwrap();
        let flat = net.flat_params();
        let mut shifted = flat.clone();
        shifted[0] += 1.0;
        net.set_flat_params(&shifted).unwrap();
        assert_eq!(net.flat_params()[0], flat[0] + 1.0);
        assert!(net.set_flat_params(&flat[1..]).is_err());
    }
}
