//! Report generators behind the command-line verbs. Each reads a
//! [`RunConfig`] and writes line-delimited records into an output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::accountant::{EventTag, PrivacyLedger, SgmEvent};
use crate::config::RunConfig;
use crate::data::poisson_sample;
use crate::diagnostics::{
    expected_compute_fraction, speedup_estimate, CostModelInput, SpeedupEstimate, PROFILED_OVERHEAD_PERCENT,
};
use crate::error::{Error, Result};
use crate::net::build_network;
use crate::quant::{build_grid, empirical_moments};
use crate::records::impacts_text;
use crate::scheduler::{compute_loss_impact, layer_probabilities, ImpactTable, MeasureEnv};
use crate::tensor::Tensor;
use crate::train::load_data;
use crate::{substream, DetRng};

fn write(out_dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Runs one measurement round on the freshly initialized network and writes
/// the impacts, the resulting layer probabilities and the ledger.
pub fn measure_impact(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let (train, _) = load_data(cfg)?;
    let mut net = build_network(&cfg.architecture_text()?, cfg.seed)?;
    let q = cfg.dpsgd.logical_batch as f64 / train.len() as f64;
    let grid = build_grid(&cfg.quantizer);
    let mut rng = substream(cfg.seed, 5);
    let batches: Vec<Vec<usize>> = (0..cfg.scheduler.n_sample)
        .map(|_| poisson_sample(train.len(), q, &mut rng))
        .collect();
    let env = MeasureEnv {
        data: &train,
        dp: &cfg.dpsgd,
        quantizer: &grid,
        batch_rate: q,
    };
    let mut table = ImpactTable::singletons(&net, cfg.scheduler.ema_decay)?;
    let mut ledger = PrivacyLedger::new(cfg.delta);
    let round = compute_loss_impact(&mut net, &env, &batches, &cfg.scheduler, &mut table, &mut ledger, &mut rng)?;
    let layers: Vec<usize> = table.policies().iter().flat_map(|p| p.ids()).collect();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    ledger.save(&out_dir.join("ledger.txt"))?;

    let mut text = impacts_text(&[(0, layers.clone(), round)]);
    if table.len() >= 2 {
        let pi = layer_probabilities(table.values(), cfg.scheduler.temperature)?;
        text.push_str("# layer_id probability\n");
        for (l, p) in layers.iter().zip(pi) {
            let _ = writeln!(text, "# {l} {p:.6}");
        }
    }
    write(out_dir, "impacts.txt", &text)
}

/// One row of the planned privacy trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyPlanRow {
    pub epoch: usize,
    pub eps_total: f64,
    pub eps_train: f64,
    pub eps_measure: f64,
    pub measure_fraction: f64,
}

/// Privacy spent per epoch if the configured run goes to completion, ignoring
/// the budget.
pub fn privacy_plan(cfg: &RunConfig, n_train: usize) -> Result<Vec<PrivacyPlanRow>> {
    let q = cfg.dpsgd.logical_batch as f64 / n_train as f64;
    let steps = n_train.div_ceil(cfg.dpsgd.logical_batch) as u64;
    let mut ledger = PrivacyLedger::new(cfg.delta);
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.mode.measures() && cfg.scheduler.measures_at(epoch) {
            ledger.record(cfg.scheduler.measurement_event(q)?)?;
        }
        ledger.record(SgmEvent::new(EventTag::Train, q, cfg.dpsgd.noise_multiplier, steps)?)?;
        rows.push(PrivacyPlanRow {
            epoch,
            eps_total: ledger.epsilon()?,
            eps_train: ledger.epsilon_for(EventTag::Train)?,
            eps_measure: ledger.epsilon_for(EventTag::Measure)?,
            measure_fraction: ledger.analysis_fraction()?,
        });
    }
    Ok(rows)
}

pub fn accountant_report(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let (train, _) = load_data(cfg)?;
    let rows = privacy_plan(cfg, train.len())?;
    let mut text = format!(
        "# delta {} target {}\n# epoch eps_total eps_train eps_measure measure_fraction within_budget\n",
        cfg.delta, cfg.epsilon_target
    );
    for r in rows {
        let _ = writeln!(
            text,
            "{} {:.6} {:.6} {:.6} {:.6} {}",
            r.epoch,
            r.eps_total,
            r.eps_train,
            r.eps_measure,
            r.measure_fraction,
            r.eps_total <= cfg.epsilon_target
        );
    }
    write(out_dir, "accountant.txt", &text)
}

/// The configured cost-model estimate. `p` defaults to the expected MAC share
/// of `k` uniformly drawn layers.
pub fn configured_speedup(cfg: &RunConfig) -> Result<(CostModelInput, SpeedupEstimate)> {
    let s = &cfg.speedup;
    let p = match s.p {
        Some(p) => p,
        None => {
            let arch = crate::arch::parse_architecture(&cfg.architecture_text()?)?;
            let n = arch.layers.iter().filter(|l| l.kind.is_quantizable()).count();
            expected_compute_fraction(&arch, cfg.scheduler.layers_to_quantize(n)?)
        }
    };
    let input = CostModelInput {
        t_train: s.t_train,
        t_overhead: s.t_train * s.overhead_percent / 100.0,
        t_analysis: s.t_train * s.analysis_percent / 100.0,
        p,
        speedup_factor: s.speedup_factor,
    };
    Ok((input, speedup_estimate(&input)?))
}

pub fn speedup_report(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let (input, est) = configured_speedup(cfg)?;
    let mut text = String::from("# config overhead_pct analysis_pct p t_ours speedup\n");
    let _ = writeln!(
        text,
        "configured {:.2} {:.2} {:.4} {:.4} {:.4}",
        100.0 * input.t_overhead / input.t_train,
        100.0 * input.t_analysis / input.t_train,
        input.p,
        est.t_ours,
        est.speedup
    );
    for (name, overhead) in PROFILED_OVERHEAD_PERCENT {
        for analysis in [0.0, 5.0, 10.0, 15.0] {
            let row = CostModelInput {
                t_overhead: input.t_train * overhead / 100.0,
                t_analysis: input.t_train * analysis / 100.0,
                ..input
            };
            let e = speedup_estimate(&row)?;
            let _ = writeln!(
                text,
                "{name} {overhead:.2} {analysis:.2} {:.4} {:.4} {:.4}",
                row.p, e.t_ours, e.speedup
            );
        }
    }
    write(out_dir, "speedup.txt", &text)
}

/// Bias and variance of the configured quantizer on one Gaussian tensor
/// rescaled over several octaves.
pub fn quantizer_report(cfg: &RunConfig, out_dir: &Path, trials: usize) -> Result<PathBuf> {
    let grid = build_grid(&cfg.quantizer);
    let mut rng = DetRng::seed_from_u64(cfg.seed);
    let base: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut text = String::from("# lambda max_abs_z var_total var_over_norm_inf_sq\n");
    for e in -4..=4 {
        let lambda = (e as f64).exp2();
        let x = Tensor::from_vec(base.iter().map(|v| v * lambda).collect());
        let m = empirical_moments(&x, &grid, trials, &mut rng)?;
        let max_z = x
            .data()
            .iter()
            .zip(m.mean.data())
            .zip(&m.per_element_variance)
            .map(|((xi, mi), vi)| {
                let se = (vi / trials as f64).sqrt();
                if se == 0.0 { 0.0 } else { (mi - xi).abs() / se }
            })
            .fold(0.0, f64::max);
        let n = x.norm_inf();
        let _ = writeln!(
            text,
            "{lambda} {max_z:.4} {:.6e} {:.6}",
            m.total_variance,
            m.total_variance / (n * n)
        );
    }
    write(out_dir, "quantizer_stats.txt", &text)
}
