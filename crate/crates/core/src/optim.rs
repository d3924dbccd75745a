//! DP-SGD: per-example clipping, Gaussian noise, and the parameter update.
//!
//! The update applied for one logical batch of expected size `B` is
//!
//! ```text
//! w ← w − η · ( Σ_i clip_C(g_i) / B  +  N(0, σ²C²·I) / B )
//! ```
//!
//! Noise is drawn once per logical batch; clipped gradients from any
//! number of physical micro-batches are summed first.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{mean_cross_entropy, Network, PerExampleGrads, QuantPolicy};
use crate::quant::QuantGrid;
use crate::tensor::{norm_l2, Tensor};
use crate::DetRng;

/// Optimizer hyperparameters. Defaults mirror the reference configuration:
/// lr 0.5, clip 1, noise multiplier 1, logical batch 1024, physical batch 128.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSgdConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub logical_batch: usize,
    pub physical_batch: usize,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            logical_batch: 1024,
            physical_batch: 128,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::Config(format!(
                "noise_multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if self.logical_batch == 0 || self.physical_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.physical_batch > self.logical_batch {
            return Err(Error::Config(format!(
                "physical_batch {} exceeds logical_batch {}",
                self.physical_batch, self.logical_batch
            )));
        }
        Ok(())
    }

    /// Standard deviation of the summed-gradient noise, `σ·C`. Zero when σ is zero,
    /// even for an unbounded clip norm.
    pub fn noise_std(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            0.0
        } else {
            self.noise_multiplier * self.clip_norm
        }
    }

    /// Whether σ lies in the range commonly used for DP-SGD, (0.5, 10).
    pub fn sigma_in_typical_range(&self) -> bool {
        self.noise_multiplier > 0.5 && self.noise_multiplier < 10.0
    }
}

/// Scales each row to ℓ2 norm at most `clip_norm`, using the joint norm over
/// all layers. Returns the pre-clip norms.
pub fn clip_per_example(grads: &mut PerExampleGrads, clip_norm: f64) -> Vec<f64> {
    (0..grads.batch())
        .map(|i| {
            let row = grads.row_mut(i);
            let norm = norm_l2(row);
            if norm > clip_norm {
                let factor = clip_norm / norm;
                row.iter_mut().for_each(|v| *v *= factor);
            }
            norm
        })
        .collect()
}

/// `dim` i.i.d. `N(0, scale²)` draws. A zero scale consumes no randomness.
pub fn noise_vector<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Tensor {
    if scale == 0.0 {
        return Tensor::zeros(vec![dim]);
    }
    let data = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::from_vec(data)
}

/// Running sum of clipped per-example gradients for one logical batch.
#[derive(Debug, Clone)]
pub struct ClippedSum {
    sum: Vec<f64>,
    count: usize,
    expected: usize,
}

impl ClippedSum {
    /// `expected` is the number of examples the logical batch holds.
    pub fn new(dim: usize, expected: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            count: 0,
            expected,
        }
    }

    /// Adds already clipped rows, in row order.
    pub fn add(&mut self, clipped: &PerExampleGrads) -> Result<()> {
        if clipped.dim() != self.sum.len() {
            return Err(Error::Shape(format!(
                "gradient rows have {} entries, accumulator has {}",
                clipped.dim(),
                self.sum.len()
            )));
        }
        for row in clipped.rows() {
            for (s, v) in self.sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        self.count += clipped.batch();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }
}

/// What a DP-SGD step applied, for diagnostics.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `Σ clip(g_i) / B`
    pub mean_clipped: Vec<f64>,
    /// Noise as added to the mean, i.e. already divided by `B`.
    pub noise: Vec<f64>,
}

/// Applies one noised update from an accumulated logical batch.
pub fn dp_step<R: Rng + ?Sized>(
    net: &mut Network,
    acc: &ClippedSum,
    cfg: &DpSgdConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    if acc.count != acc.expected {
        return Err(Error::Batch(format!(
            "accumulated {} examples but the logical batch holds {}",
            acc.count, acc.expected
        )));
    }
    if acc.sum.len() != net.param_count() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            acc.sum.len(),
            net.param_count()
        )));
    }
    let b = cfg.logical_batch as f64;
    let mean_clipped: Vec<f64> = acc.sum.iter().map(|s| s / b).collect();
    let std = cfg.noise_std();
    let noise: Vec<f64> = noise_vector(acc.sum.len(), std, rng)
        .into_data()
        .into_iter()
        .map(|n| n / b)
        .collect();
    let direction: Vec<f64> = if std == 0.0 {
        mean_clipped.clone()
    } else {
        mean_clipped.iter().zip(&noise).map(|(g, n)| g + n).collect()
    };
    net.apply_update(&direction, cfg.lr)?;
    Ok(StepOutput {
        mean_clipped,
        noise,
    })
}

/// Clips `grads` and applies a DP-SGD step treating them as the whole logical batch.
pub fn dp_step_batch<R: Rng + ?Sized>(
    net: &mut Network,
    mut grads: PerExampleGrads,
    cfg: &DpSgdConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    clip_per_example(&mut grads, cfg.clip_norm);
    let mut acc = ClippedSum::new(grads.dim(), grads.batch());
    acc.add(&grads)?;
    dp_step(net, &acc, cfg, rng)
}

/// Plain SGD update `w ← w − η·g`.
pub fn sgd_step(net: &mut Network, mean_grad: &[f64], lr: f64) -> Result<()> {
    net.apply_update(mean_grad, lr)
}

/// Which update rule a logical step applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[serde(rename = "dpsgd")]
    DpSgd,
    /// Unclipped, noiseless mean gradient. Normalized by the logical batch
    /// size like DP-SGD, so σ = 0 and C = ∞ reproduce it exactly.
    Sgd,
}

/// Where the randomness of one logical step comes from.
pub struct StepRngs<'a> {
    pub noise: &'a mut DetRng,
    pub quant: &'a mut DetRng,
}

/// Result of one logical step over a set of example indices.
#[derive(Debug, Clone, Default)]
pub struct LogicalStep {
    pub examples: usize,
    /// Sum of per-example training losses as seen by the forward pass.
    pub loss_sum: f64,
    /// `Σ g_i / B` before clipping; only filled when requested.
    pub raw_mean: Option<Vec<f64>>,
    /// Applied update pieces; `None` for an empty batch.
    pub output: Option<StepOutput>,
}

/// Runs forward and per-example backward over `indices` in physical
/// micro-batches, then applies one update. An empty index set leaves the
/// network untouched.
#[allow(clippy::too_many_arguments)]
pub fn logical_step(
    net: &mut Network,
    data: &Dataset,
    indices: &[usize],
    cfg: &DpSgdConfig,
    rule: UpdateRule,
    policy: &QuantPolicy,
    quantizer: &QuantGrid,
    rngs: StepRngs<'_>,
    keep_raw: bool,
) -> Result<LogicalStep> {
    if indices.is_empty() {
        return Ok(LogicalStep::default());
    }
    let dim = net.param_count();
    let clip = match rule {
        UpdateRule::DpSgd => cfg.clip_norm,
        UpdateRule::Sgd => f64::INFINITY,
    };
    let mut acc = ClippedSum::new(dim, indices.len());
    let mut raw = keep_raw.then(|| vec![0.0; dim]);
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(cfg.physical_batch) {
        let (batch, targets) = data.batch(chunk)?;
        let mut grads = if policy.is_empty() {
            let trace = net.forward_fp(&batch)?;
            loss_sum += mean_cross_entropy(trace.logits(), &targets)? * chunk.len() as f64;
            net.backward_per_example_fp(&trace, &targets)?
        } else {
            let trace = net.forward(&batch, policy, quantizer, rngs.quant)?;
            loss_sum += mean_cross_entropy(trace.logits(), &targets)? * chunk.len() as f64;
            net.backward_per_example(&trace, &targets, policy, quantizer, rngs.quant)?
        };
        if let Some(raw) = raw.as_mut() {
            for row in grads.rows() {
                raw.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
        }
        clip_per_example(&mut grads, clip);
        acc.add(&grads)?;
    }
    let output = match rule {
        UpdateRule::DpSgd => dp_step(net, &acc, cfg, rngs.noise)?,
        UpdateRule::Sgd => {
            let b = cfg.logical_batch as f64;
            let mean: Vec<f64> = acc.sum.iter().map(|s| s / b).collect();
            sgd_step(net, &mean, cfg.lr)?;
            StepOutput {
                mean_clipped: mean,
                noise: vec![0.0; dim],
            }
        }
    };
    let b = cfg.logical_batch as f64;
    Ok(LogicalStep {
        examples: indices.len(),
        loss_sum,
        raw_mean: raw.map(|r| r.into_iter().map(|v| v / b).collect()),
        output: Some(output),
    })
}
