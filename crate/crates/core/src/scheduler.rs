//! Loss-aware layer scheduling.
//!
//! Every few epochs the scheduler replays a short DP-SGD run once in full
//! precision and once per single-layer policy, privatizes the vector of loss
//! differences as a sampled Gaussian mechanism, and folds it into an EMA.
//! Each epoch it then samples `k` layers with probability decreasing in
//! their smoothed impact.

use std::fmt;

use rand::Rng;
use serde::Deserialize;

use crate::accountant::{EventTag, PrivacyLedger, SgmEvent};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Network, QuantPolicy};
use crate::optim::{logical_step, noise_vector, DpSgdConfig, StepRngs, UpdateRule};
use crate::quant::QuantGrid;
use crate::tensor::norm_l2;
use crate::{substream, DetRng};

/// Which layers a run computes in low precision, epoch by epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Nothing is quantized.
    BaselineFp,
    /// `k` layers drawn uniformly once, kept for the whole run.
    StaticRandomK,
    /// `k` layers drawn uniformly every epoch; no measurement.
    PlsOnly,
    /// Measured impacts bias the per-epoch draw.
    FullScheduler,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::BaselineFp => "baseline_fp",
            Mode::StaticRandomK => "static_random_k",
            Mode::PlsOnly => "pls_only",
            Mode::FullScheduler => "full_scheduler",
        }
    }

    pub fn measures(&self) -> bool {
        matches!(self, Mode::FullScheduler)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Layers quantized per epoch. Takes precedence over `fraction`.
    pub k: Option<usize>,
    /// Share of quantizable layers, rounded to the nearest count.
    pub fraction: Option<f64>,
    pub temperature: f64,
    /// Poisson batches per measurement replay.
    pub n_sample: usize,
    /// Epochs between measurements.
    pub n_interval: usize,
    pub repetitions: usize,
    pub sigma_measure: f64,
    pub clip_measure: f64,
    pub ema_decay: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            k: None,
            fraction: Some(0.5),
            temperature: 5.0,
            n_sample: 1,
            n_interval: 2,
            repetitions: 2,
            sigma_measure: 0.5,
            clip_measure: 0.01,
            ema_decay: 0.5,
        }
    }
}

/// `round(fraction · n)`, at least one layer.
pub fn k_for_fraction(fraction: f64, n_quantizable: usize) -> usize {
    ((fraction * n_quantizable as f64).round() as usize).max(1)
}

impl SchedulerConfig {
    /// Number of layers to quantize for a network with `n_quantizable` candidates.
    pub fn layers_to_quantize(&self, n_quantizable: usize) -> Result<usize> {
        let k = match (self.k, self.fraction) {
            (Some(k), _) => k,
            (None, Some(f)) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
                }
                k_for_fraction(f, n_quantizable)
            }
            (None, None) => return Err(Error::Config("scheduler needs `k` or `fraction`".into())),
        };
        if k == 0 || k > n_quantizable {
            return Err(Error::Config(format!(
                "k = {k} outside 1..={n_quantizable} quantizable layers"
            )));
        }
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.n_interval == 0 {
            return bad("n_interval must be >= 1".into());
        }
        if self.n_sample == 0 {
            return bad("n_sample must be >= 1".into());
        }
        if !(self.sigma_measure >= 0.0) || !self.sigma_measure.is_finite() {
            return bad(format!("sigma_measure must be >= 0, got {}", self.sigma_measure));
        }
        if !(self.clip_measure > 0.0) {
            return bad(format!("clip_measure must be > 0, got {}", self.clip_measure));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return bad(format!("ema_decay must lie in (0, 1], got {}", self.ema_decay));
        }
        Ok(())
    }

    /// Whether a measurement round precedes training in `epoch` (0-based).
    pub fn measures_at(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.n_interval)
    }

    /// Sample rate of the measurement mechanism: an example takes part if it
    /// lands in any of the `n_sample` batches drawn at `batch_rate`.
    pub fn measurement_rate(&self, batch_rate: f64) -> f64 {
        1.0 - (1.0 - batch_rate).powi(self.n_sample as i32)
    }

    pub fn measurement_event(&self, batch_rate: f64) -> Result<SgmEvent> {
        SgmEvent::new(
            EventTag::Measure,
            self.measurement_rate(batch_rate),
            self.sigma_measure,
            1,
        )
    }
}

/// EMA of privatized loss differences, one entry per policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactTable {
    policies: Vec<QuantPolicy>,
    values: Vec<f64>,
    ema_decay: f64,
    rounds: usize,
}

impl ImpactTable {
    pub fn new(policies: Vec<QuantPolicy>, ema_decay: f64) -> Result<Self> {
        if policies.is_empty() {
            return Err(Error::Policy("empty policy set".into()));
        }
        let n = policies.len();
        Ok(Self {
            policies,
            values: vec![0.0; n],
            ema_decay,
            rounds: 0,
        })
    }

    /// One singleton policy per quantizable layer of `net`.
    pub fn singletons(net: &Network, ema_decay: f64) -> Result<Self> {
        let policies = net
            .quantizable_layers()
            .into_iter()
            .map(QuantPolicy::singleton)
            .collect();
        Self::new(policies, ema_decay)
    }

    pub fn policies(&self) -> &[QuantPolicy] {
        &self.policies
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Completed measurement rounds.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// `L ← (1 − α)·L + α·R̂`
    pub fn update(&mut self, privatized: &[f64]) -> Result<()> {
        if privatized.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "{} impacts for {} policies",
                privatized.len(),
                self.values.len()
            )));
        }
        crate::tensor::check_finite(privatized)?;
        let a = self.ema_decay;
        for (l, r) in self.values.iter_mut().zip(privatized) {
            *l = (1.0 - a) * *l + a * r;
        }
        self.rounds += 1;
        Ok(())
    }
}

/// `π = softmax(−s·v)` over min-max normalized impacts; uniform when all
/// impacts coincide.
pub fn layer_probabilities(impacts: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if impacts.len() < 2 {
        return Err(Error::Policy(format!(
            "need at least two policies, got {}",
            impacts.len()
        )));
    }
    crate::tensor::check_finite(impacts)?;
    let lo = impacts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = impacts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = impacts.len();
    if hi == lo {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let logits: Vec<f64> = impacts
        .iter()
        .map(|&v| -temperature * (v - lo) / (hi - lo))
        .collect();
    Ok(crate::net::softmax(&logits))
}

/// Draws `m` distinct indices one after another, each with probability
/// proportional to its weight among those not yet drawn.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m > weights.len() {
        return Err(Error::Policy(format!(
            "cannot draw {m} of {} policies",
            weights.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let mass: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pos = if mass > 0.0 {
            let u = rng.random::<f64>() * mass;
            let mut acc = 0.0;
            remaining
                .iter()
                .position(|&i| {
                    acc += weights[i];
                    u < acc
                })
                .unwrap_or(remaining.len() - 1)
        } else {
            rng.random_range(0..remaining.len())
        };
        picked.push(remaining.remove(pos));
    }
    Ok(picked)
}

/// Samples `m` policies from the table and returns the union of their layers.
pub fn select_targets<R: Rng + ?Sized>(
    table: &ImpactTable,
    temperature: f64,
    m: usize,
    rng: &mut R,
) -> Result<QuantPolicy> {
    if m > table.len() {
        return Err(Error::Policy(format!("cannot select {m} of {} policies", table.len())));
    }
    if m == table.len() {
        return Ok(table
            .policies
            .iter()
            .fold(QuantPolicy::empty(), |acc, p| acc.union(p)));
    }
    let pi = layer_probabilities(&table.values, temperature)?;
    let picked = sample_without_replacement(&pi, m, rng)?;
    Ok(picked
        .into_iter()
        .fold(QuantPolicy::empty(), |acc, i| acc.union(&table.policies[i])))
}

/// `k` layers chosen uniformly, as used before any measurement.
pub fn uniform_targets<R: Rng + ?Sized>(
    candidates: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<QuantPolicy> {
    let w = vec![1.0; candidates.len()];
    let picked = sample_without_replacement(&w, k, rng)?;
    Ok(QuantPolicy::from_ids(picked.into_iter().map(|i| candidates[i])))
}

/// What one measurement round saw and released.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactRound {
    pub baseline_loss: f64,
    pub policy_losses: Vec<f64>,
    /// `ℓ[p] − ℓ_baseline`, averaged over repetitions.
    pub raw: Vec<f64>,
    pub privatized: Vec<f64>,
    /// Table values after the EMA update.
    pub ema: Vec<f64>,
}

/// Training context the measurement replays run in.
pub struct MeasureEnv<'a> {
    pub data: &'a Dataset,
    pub dp: &'a DpSgdConfig,
    pub quantizer: &'a QuantGrid,
    /// Poisson rate the batches were drawn at, `|B|/|D|`.
    pub batch_rate: f64,
}

/// Clips `raw` to ℓ2 norm `clip` and adds `N(0, σ²·clip²)` per entry.
pub fn privatize<R: Rng + ?Sized>(raw: &[f64], clip: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    let norm = norm_l2(raw);
    let factor = if norm > clip { clip / norm } else { 1.0 };
    let noise = noise_vector(raw.len(), sigma * clip, rng);
    raw.iter()
        .zip(noise.data())
        .map(|(r, n)| r * factor + n)
        .collect()
}

fn replay(
    net: &mut Network,
    env: &MeasureEnv<'_>,
    batches: &[Vec<usize>],
    policy: &QuantPolicy,
    seed: u64,
    repetition: u64,
) -> Result<f64> {
    let mut noise = substream(seed, 2 * repetition);
    let mut quant = substream(seed, 2 * repetition + 1);
    for batch in batches {
        logical_step(
            net,
            env.data,
            batch,
            env.dp,
            UpdateRule::DpSgd,
            policy,
            env.quantizer,
            StepRngs {
                noise: &mut noise,
                quant: &mut quant,
            },
            false,
        )?;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        let (x, y) = env.data.batch(batch)?;
        total += net.loss_batch_fp(&x, &y)? * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// One measurement round. Leaves `net` as found, records one SGM event on
/// `ledger` and updates `table`.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss_impact(
    net: &mut Network,
    env: &MeasureEnv<'_>,
    batches: &[Vec<usize>],
    cfg: &SchedulerConfig,
    table: &mut ImpactTable,
    ledger: &mut PrivacyLedger,
    rng: &mut DetRng,
) -> Result<ImpactRound> {
    if table.is_empty() {
        return Err(Error::Policy("empty policy set".into()));
    }
    if batches.iter().all(|b| b.is_empty()) {
        return Err(Error::Batch("measurement batches are empty".into()));
    }
    let event = cfg.measurement_event(env.batch_rate)?;
    // Baseline and policy replays of the same repetition share noise draws.
    let seed: u64 = rng.random();
    let mut scratch = rng.clone();
    let snap = net.snapshot(&scratch);
    let reps = cfg.repetitions as u64;

    let mut baseline = 0.0;
    for r in 0..reps {
        net.restore(&snap, &mut scratch)?;
        baseline += replay(net, env, batches, &QuantPolicy::empty(), seed, r)?;
    }
    let mut policy_losses = Vec::with_capacity(table.len());
    for policy in table.policies() {
        let mut l = 0.0;
        for r in 0..reps {
            net.restore(&snap, &mut scratch)?;
            l += replay(net, env, batches, policy, seed, r)?;
        }
        policy_losses.push(l);
    }
    net.restore(&snap, &mut scratch)?;

    let rf = cfg.repetitions as f64;
    let raw: Vec<f64> = policy_losses.iter().map(|l| l / rf - baseline / rf).collect();
    let privatized = privatize(&raw, cfg.clip_measure, cfg.sigma_measure, rng);
    ledger.record(event)?;
    table.update(&privatized)?;
    Ok(ImpactRound {
        baseline_loss: baseline / rf,
        policy_losses: policy_losses.iter().map(|l| l / rf).collect(),
        raw,
        privatized,
        ema: table.values().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{poisson_sample, synth_dataset};
    use crate::{build_network, quant::QuantGrid};
    use rand::SeedableRng;

    #[test]
    fn probabilities_reference_values() {
        let pi = layer_probabilities(&[0.0, 0.5, 1.0], 1.0).unwrap();
        for (p, e) in pi.iter().zip([0.50648, 0.30719, 0.18632]) {
            assert!((p - e).abs() < 1e-5, "{pi:?}");
        }
        assert_eq!(layer_probabilities(&[2.0, 2.0, 2.0], 7.0).unwrap(), vec![1.0 / 3.0; 3]);
        let flat = layer_probabilities(&[0.3, -1.0, 4.0], 0.0).unwrap();
        assert!(flat.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(layer_probabilities(&[1.0], 1.0).is_err());
    }

    #[test]
    fn shift_invariance() {
        let a = layer_probabilities(&[0.1, 0.4, 0.2, 0.9], 3.0).unwrap();
        let b = layer_probabilities(&[10.1, 10.4, 10.2, 10.9], 3.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_update() {
        let mut t = ImpactTable::new(vec![QuantPolicy::singleton(0)], 0.5).unwrap();
        t.update(&[1.0]).unwrap();
        assert_eq!(t.values(), &[0.5]);
        assert!(t.update(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn privatize_clips_then_noises() {
        let raw = [0.012, 0.016];
        let mut rng = DetRng::seed_from_u64(0);
        let out = privatize(&raw, 0.01, 0.0, &mut rng);
        assert!((out[0] - 0.006).abs() < 1e-15 && (out[1] - 0.008).abs() < 1e-15);
        let small = privatize(&[0.001, 0.0], 0.01, 0.0, &mut rng);
        assert_eq!(small, vec![0.001, 0.0]);
    }

    #[test]
    fn select_all_and_sharp_temperature() {
        let mut t = ImpactTable::new((0..4).map(QuantPolicy::singleton).collect(), 1.0).unwrap();
        let mut rng = DetRng::seed_from_u64(3);
        let all = select_targets(&t, 1.0, 4, &mut rng).unwrap();
        assert_eq!(all.len(), 4);
        assert!(select_targets(&t, 1.0, 5, &mut rng).is_err());
        t.update(&[0.4, 0.1, 0.9, 0.0]).unwrap();
        for _ in 0..50 {
            let s = select_targets(&t, 1e3, 2, &mut rng).unwrap();
            assert_eq!(s, QuantPolicy::from_ids([1, 3]));
        }
    }

    #[test]
    fn cadence() {
        let cfg = SchedulerConfig::default();
        assert!(cfg.measures_at(0));
        assert!(!cfg.measures_at(1));
        assert!(cfg.measures_at(2));
    }

    #[test]
    fn k_from_fraction() {
        let cfg = SchedulerConfig {
            fraction: Some(0.9),
            ..SchedulerConfig::default()
        };
        assert_eq!(cfg.layers_to_quantize(8).unwrap(), 7);
        assert_eq!(k_for_fraction(0.5, 8), 4);
        let cfg = SchedulerConfig {
            k: Some(9),
            ..SchedulerConfig::default()
        };
        assert!(cfg.layers_to_quantize(8).is_err());
    }

    fn tiny_setup() -> (Network, Dataset) {
        let net = build_network(
            "input shape=1x4x4\nconv2d in=1 out=2 kernel=3\nrelu\nflatten\ndense in=8 out=6\nrelu\ndense in=6 out=3",
            5,
        )
        .unwrap();
        let data = synth_dataset(3, 40, &[1, 4, 4], 3.0, 1).unwrap();
        (net, data)
    }

    #[test]
    fn identity_quantizer_gives_zero_impact() {
        let (mut net, data) = tiny_setup();
        let before = net.clone();
        let dp = DpSgdConfig {
            logical_batch: 16,
            physical_batch: 8,
            ..DpSgdConfig::default()
        };
        let grid = QuantGrid::identity();
        let q = 16.0 / data.len() as f64;
        let mut rng = DetRng::seed_from_u64(2);
        let batches = vec![poisson_sample(data.len(), q, &mut rng)];
        let env = MeasureEnv {
            data: &data,
            dp: &dp,
            quantizer: &grid,
            batch_rate: q,
        };
        let cfg = SchedulerConfig {
            sigma_measure: 0.0,
            ..SchedulerConfig::default()
        };
        let mut table = ImpactTable::singletons(&net, 0.5).unwrap();
        let mut ledger = PrivacyLedger::new(1e-5);
        let round =
            compute_loss_impact(&mut net, &env, &batches, &cfg, &mut table, &mut ledger, &mut rng).unwrap();
        assert!(round.privatized.iter().all(|&v| v == 0.0), "{round:?}");
        assert_eq!(net, before);
        assert_eq!(ledger.events().len(), 1);
        assert_eq!(ledger.events()[0].sigma, 0.0);
    }

    #[test]
    fn fp4_measurement_restores_model() {
        let (mut net, data) = tiny_setup();
        let before = net.clone();
        let dp = DpSgdConfig {
            logical_batch: 16,
            physical_batch: 16,
            ..DpSgdConfig::default()
        };
        let grid = QuantGrid::fp4();
        let q = 16.0 / data.len() as f64;
        let mut rng = DetRng::seed_from_u64(4);
        let batches = vec![poisson_sample(data.len(), q, &mut rng)];
        let env = MeasureEnv {
            data: &data,
            dp: &dp,
            quantizer: &grid,
            batch_rate: q,
        };
        let cfg = SchedulerConfig::default();
        let mut table = ImpactTable::singletons(&net, 0.5).unwrap();
        let mut ledger = PrivacyLedger::new(1e-5);
        let round =
            compute_loss_impact(&mut net, &env, &batches, &cfg, &mut table, &mut ledger, &mut rng).unwrap();
        assert_eq!(net, before);
        assert_eq!(round.raw.len(), 3);
        assert_eq!(table.rounds(), 1);
        assert!(compute_loss_impact(&mut net, &env, &[vec![]], &cfg, &mut table, &mut ledger, &mut rng).is_err());
    }
}
