//! Gradient-versus-noise statistics and the linear speedup cost model.

use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::net::QuantPolicy;
use crate::tensor::{norm_inf, norm_l2};

/// Unit-width bins of `log₂|ḡ_i / n_i|` on `[low, high)` plus two tail buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Log2Histogram {
    pub low: i32,
    pub high: i32,
    pub counts: Vec<u64>,
    /// Below `low`, including `ḡ_i = 0`.
    pub underflow: u64,
    /// At or above `high`, including `n_i = 0`.
    pub overflow: u64,
}

impl Log2Histogram {
    pub fn new(low: i32, high: i32) -> Self {
        assert!(low < high, "empty histogram range");
        Self {
            low,
            high,
            counts: vec![0; (high - low) as usize],
            underflow: 0,
            overflow: 0,
        }
    }

    pub fn add(&mut self, v: f64) {
        if v.is_nan() || v < self.low as f64 {
            self.underflow += 1;
        } else if v >= self.high as f64 {
            self.overflow += 1;
        } else {
            self.counts[(v.floor() as i32 - self.low) as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn merge(&mut self, other: &Log2Histogram) -> Result<()> {
        if (self.low, self.high) != (other.low, other.high) {
            return Err(Error::Shape("histograms cover different ranges".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        Ok(())
    }

    /// `(bin_low, bin_high, count)` rows, tails first and last with infinite edges.
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let mut rows = vec![(f64::NEG_INFINITY, self.low as f64, self.underflow)];
        for (i, &c) in self.counts.iter().enumerate() {
            let lo = (self.low + i as i32) as f64;
            rows.push((lo, lo + 1.0, c));
        }
        rows.push((self.high as f64, f64::INFINITY, self.overflow));
        rows
    }
}

pub const HIST_LOW: i32 = -24;
pub const HIST_HIGH: i32 = 8;

/// One training step's view of gradient and noise magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    /// Norms of `Σ g_i / B` before clipping.
    pub norm_inf_raw: f64,
    pub norm_2_raw: f64,
    /// `‖Σ clip(g_i) / B‖∞`
    pub norm_inf_clip: f64,
    /// `‖noise / B‖∞`
    pub norm_inf_noise: f64,
    pub median_log2_ratio: f64,
    pub histogram: Log2Histogram,
}

/// `log₂|g / n|` with `n = 0` mapped to `+∞` and `g = 0` to `−∞`.
pub fn log2_ratio(g: f64, n: f64) -> f64 {
    if n == 0.0 {
        f64::INFINITY
    } else if g == 0.0 {
        f64::NEG_INFINITY
    } else {
        (g / n).abs().log2()
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len();
    let mid = n / 2;
    values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = values[mid];
    if n % 2 == 1 {
        return upper;
    }
    let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lower == upper {
        upper
    } else {
        0.5 * (lower + upper)
    }
}

pub fn record_step_stats(
    step: usize,
    epoch: usize,
    raw_mean: &[f64],
    clipped_mean: &[f64],
    noise: &[f64],
) -> Result<StepStats> {
    if raw_mean.len() != clipped_mean.len() || clipped_mean.len() != noise.len() {
        return Err(Error::Shape(format!(
            "stats inputs have {}, {} and {} entries",
            raw_mean.len(),
            clipped_mean.len(),
            noise.len()
        )));
    }
    let mut hist = Log2Histogram::new(HIST_LOW, HIST_HIGH);
    let mut ratios: Vec<f64> = clipped_mean
        .iter()
        .zip(noise)
        .map(|(&g, &n)| log2_ratio(g, n))
        .collect();
    ratios.iter().for_each(|&r| hist.add(r));
    Ok(StepStats {
        step,
        epoch,
        norm_inf_raw: norm_inf(raw_mean),
        norm_2_raw: norm_l2(raw_mean),
        norm_inf_clip: norm_inf(clipped_mean),
        norm_inf_noise: norm_inf(noise),
        median_log2_ratio: median(&mut ratios),
        histogram: hist,
    })
}

/// DP-SGD over SGD raw-gradient norms.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationReport {
    pub mean_ratio: f64,
    pub max_ratio: f64,
    /// `(epoch, ratio of per-epoch means)`
    pub epoch_ratios: Vec<(usize, f64)>,
}

fn epoch_means(stats: &[StepStats]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for s in stats {
        match out.last_mut() {
            Some((e, sum, n)) if *e == s.epoch => {
                *sum += s.norm_inf_raw;
                *n += 1;
            }
            _ => out.push((s.epoch, s.norm_inf_raw, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Compares `‖g_raw‖∞` along matched SGD and DP-SGD trajectories.
pub fn norm_amplification_report(sgd: &[StepStats], dpsgd: &[StepStats]) -> Result<AmplificationReport> {
    if sgd.len() != dpsgd.len() || sgd.is_empty() {
        return Err(Error::Shape(format!(
            "runs have {} and {} steps",
            sgd.len(),
            dpsgd.len()
        )));
    }
    let mean = |s: &[StepStats]| s.iter().map(|x| x.norm_inf_raw).sum::<f64>() / s.len() as f64;
    let max = |s: &[StepStats]| s.iter().map(|x| x.norm_inf_raw).fold(0.0, f64::max);
    let (es, ed) = (epoch_means(sgd), epoch_means(dpsgd));
    if es.iter().map(|e| e.0).ne(ed.iter().map(|e| e.0)) {
        return Err(Error::Shape("runs cover different epochs".into()));
    }
    Ok(AmplificationReport {
        mean_ratio: mean(dpsgd) / mean(sgd),
        max_ratio: max(dpsgd) / max(sgd),
        epoch_ratios: es.iter().zip(&ed).map(|(a, b)| (a.0, b.1 / a.1)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModelInput {
    pub t_train: f64,
    pub t_overhead: f64,
    pub t_analysis: f64,
    /// Share of accelerable compute run in low precision.
    pub p: f64,
    pub speedup_factor: f64,
}

impl CostModelInput {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_train >= 0.0
            && self.t_overhead >= 0.0
            && self.t_analysis >= 0.0
            && self.t_overhead <= self.t_train
            && (0.0..=1.0).contains(&self.p)
            && self.speedup_factor >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cost model input {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupEstimate {
    pub t_ours: f64,
    pub speedup: f64,
}

/// `T = T_analysis + (1 − p + p/f)(T_train − T_overhead) + T_overhead`.
pub fn speedup_estimate(input: &CostModelInput) -> Result<SpeedupEstimate> {
    input.validate()?;
    let scale = 1.0 - input.p + input.p / input.speedup_factor;
    let t_ours = input.t_analysis + scale * (input.t_train - input.t_overhead) + input.t_overhead;
    Ok(SpeedupEstimate {
        t_ours,
        speedup: input.t_train / t_ours,
    })
}

/// Profiled share of runtime that low precision cannot accelerate, in percent.
pub const PROFILED_OVERHEAD_PERCENT: [(&str, f64); 8] = [
    ("densenet121-cifar10", 4.55),
    ("densenet121-gtsrb", 6.23),
    ("resnet18-cifar10", 9.20),
    ("resnet18-emnist", 19.81),
    ("resnet18-gtsrb", 5.99),
    ("resnet50-cifar10", 5.92),
    ("resnet50-emnist", 13.22),
    ("resnet50-gtsrb", 7.10),
];

/// MAC-weighted share of linear-layer compute covered by `policy`.
pub fn quantized_compute_fraction(arch: &Architecture, policy: &QuantPolicy) -> f64 {
    let total: usize = arch.layers.iter().map(|l| l.forward_macs()).sum();
    if total == 0 {
        return 0.0;
    }
    let quantized: usize = arch
        .layers
        .iter()
        .filter(|l| policy.contains(l.id))
        .map(|l| l.forward_macs())
        .sum();
    quantized as f64 / total as f64
}

/// Expected MAC share when `k` of the quantizable layers are drawn uniformly.
pub fn expected_compute_fraction(arch: &Architecture, k: usize) -> f64 {
    let n = arch.layers.iter().filter(|l| l.kind.is_quantizable()).count();
    if n == 0 {
        return 0.0;
    }
    // Each layer is included with probability k/n.
    k.min(n) as f64 / n as f64
}
