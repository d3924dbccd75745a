//! The end-to-end training loop: measure, select, train, account, record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::accountant::{EventTag, PrivacyLedger, SgmEvent};
use crate::config::{DataSource, RunConfig};
use crate::data::{load_idx_dataset, poisson_sample, synth_dataset, Dataset};
use crate::diagnostics::{record_step_stats, Log2Histogram, StepStats, HIST_HIGH, HIST_LOW};
use crate::error::{Error, Result};
use crate::net::{build_network, Network, QuantPolicy};
use crate::optim::{logical_step, StepRngs, UpdateRule};
use crate::quant::{build_grid, QuantGrid};
use crate::records::{self, MetricsRecord, MetricsWriter};
use crate::scheduler::{
    compute_loss_impact, select_targets, uniform_targets, ImpactRound, ImpactTable, MeasureEnv, Mode,
};
use crate::substream;

const STREAM_SAMPLING: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_QUANT: u64 = 3;
const STREAM_SCHEDULE: u64 = 4;
const STREAM_MEASURE: u64 = 5;

/// Loads or generates the configured dataset and splits off the validation set.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let full = match d.source {
        DataSource::Synthetic => {
            synth_dataset(d.n_classes, d.n_per_class, &d.example_shape()?, d.separation, d.seed)?
        }
        DataSource::Idx => load_idx_dataset(
            d.images.as_deref().expect("validated"),
            d.labels.as_deref().expect("validated"),
            d.n_classes,
        )?,
    };
    full.split(d.holdout, d.seed)
}

/// Fraction of `data` classified correctly in full precision.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(512) {
        let (x, y) = data.batch(chunk)?;
        let pred = net.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub ledger: PrivacyLedger,
    /// `(epoch, layer ids, round)` per measurement.
    pub impacts: Vec<(usize, Vec<usize>, ImpactRound)>,
    pub step_stats: Vec<StepStats>,
    pub histogram: Log2Histogram,
    pub network: Network,
    /// Training stopped early to stay within the budget.
    pub truncated: bool,
    pub empty_batches: usize,
    /// Epochs whose measurement would have exceeded the budget.
    pub skipped_measurements: Vec<usize>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_accuracy)
    }
}

/// Trains per `cfg` on already loaded data. Records are appended to `sink`
/// as epochs complete.
pub fn train_model(
    cfg: &RunConfig,
    arch_text: &str,
    train: &Dataset,
    val: &Dataset,
    mut sink: Option<&mut MetricsWriter>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut net = build_network(arch_text, cfg.seed)?;
    if net.input_size() != train.example_size() || net.n_classes() != train.n_classes() {
        return Err(Error::Config(format!(
            "network maps {} inputs to {} classes, data has {} inputs and {} classes",
            net.input_size(),
            net.n_classes(),
            train.example_size(),
            train.n_classes()
        )));
    }
    let dp = cfg.dpsgd;
    let q = dp.logical_batch as f64 / train.len() as f64;
    if q > 1.0 {
        return Err(Error::Config(format!(
            "logical batch {} exceeds {} training examples",
            dp.logical_batch,
            train.len()
        )));
    }
    let steps_per_epoch = train.len().div_ceil(dp.logical_batch);
    let private = cfg.optimizer == UpdateRule::DpSgd && dp.noise_multiplier > 0.0;
    let grid: QuantGrid = build_grid(&cfg.quantizer);
    let sched = &cfg.scheduler;

    let candidates = net.quantizable_layers();
    let k = match cfg.mode {
        Mode::BaselineFp => 0,
        _ => sched.layers_to_quantize(candidates.len())?,
    };
    let mut table = ImpactTable::singletons(&net, sched.ema_decay)?;
    let table_layers: Vec<usize> = table.policies().iter().flat_map(|p| p.ids()).collect();

    let mut sampling = substream(cfg.seed, STREAM_SAMPLING);
    let mut noise = substream(cfg.seed, STREAM_NOISE);
    let mut quant = substream(cfg.seed, STREAM_QUANT);
    let mut schedule = substream(cfg.seed, STREAM_SCHEDULE);
    let mut measure = substream(cfg.seed, STREAM_MEASURE);

    let static_policy = match cfg.mode {
        Mode::StaticRandomK => Some(uniform_targets(&candidates, k, &mut schedule)?),
        _ => None,
    };

    let mut ledger = PrivacyLedger::new(cfg.delta);
    let mut out = RunOutcome {
        records: Vec::new(),
        ledger: PrivacyLedger::new(cfg.delta),
        impacts: Vec::new(),
        step_stats: Vec::new(),
        histogram: Log2Histogram::new(HIST_LOW, HIST_HIGH),
        network: net.clone(),
        truncated: false,
        empty_batches: 0,
        skipped_measurements: Vec::new(),
    };
    let train_event = |steps: u64| SgmEvent::new(EventTag::Train, q, dp.noise_multiplier, steps);
    let start = Instant::now();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let epoch_result: Result<(QuantPolicy, usize, f64, usize)> = (|| {
            if cfg.mode.measures() && sched.measures_at(epoch) {
                let event = sched.measurement_event(q)?;
                if !private || ledger.epsilon_with(&[event])? <= cfg.epsilon_target {
                    let batches: Vec<Vec<usize>> = (0..sched.n_sample)
                        .map(|_| poisson_sample(train.len(), q, &mut measure))
                        .collect();
                    let env = MeasureEnv {
                        data: train,
                        dp: &dp,
                        quantizer: &grid,
                        batch_rate: q,
                    };
                    let round = compute_loss_impact(
                        &mut net,
                        &env,
                        &batches,
                        sched,
                        &mut table,
                        &mut ledger,
                        &mut measure,
                    )?;
                    out.impacts.push((epoch, table_layers.clone(), round));
                } else {
                    out.skipped_measurements.push(epoch);
                }
            }

            let policy = match cfg.mode {
                Mode::BaselineFp => QuantPolicy::empty(),
                Mode::StaticRandomK => static_policy.clone().expect("static policy"),
                Mode::PlsOnly => uniform_targets(&candidates, k, &mut schedule)?,
                Mode::FullScheduler if table.rounds() == 0 => {
                    uniform_targets(&candidates, k, &mut schedule)?
                }
                Mode::FullScheduler => select_targets(&table, sched.temperature, k, &mut schedule)?,
            };

            let mut steps = 0usize;
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for _ in 0..steps_per_epoch {
                if private && ledger.epsilon_with(&[train_event(steps as u64 + 1)?])? > cfg.epsilon_target {
                    out.truncated = true;
                    break;
                }
                let indices = poisson_sample(train.len(), q, &mut sampling);
                let step = logical_step(
                    &mut net,
                    train,
                    &indices,
                    &dp,
                    cfg.optimizer,
                    &policy,
                    &grid,
                    StepRngs {
                        noise: &mut noise,
                        quant: &mut quant,
                    },
                    cfg.step_stats,
                )?;
                steps += 1;
                if step.examples == 0 {
                    out.empty_batches += 1;
                } else {
                    loss_sum += step.loss_sum;
                    seen += step.examples;
                    if let (Some(raw), Some(applied)) = (&step.raw_mean, &step.output) {
                        let st = record_step_stats(
                            global_step,
                            epoch,
                            raw,
                            &applied.mean_clipped,
                            &applied.noise,
                        )?;
                        out.histogram.merge(&st.histogram)?;
                        out.step_stats.push(st);
                    }
                }
                global_step += 1;
            }
            if private && steps > 0 {
                ledger.record(train_event(steps as u64)?)?;
            }
            Ok((policy, steps, loss_sum, seen))
        })();
        let (policy, steps, loss_sum, seen) = epoch_result.map_err(|e| e.at_epoch(epoch))?;

        if epoch == 0 && steps == 0 && out.truncated {
            return Err(Error::BudgetExhausted {
                spent: ledger.epsilon()?,
                target: cfg.epsilon_target,
            });
        }
        let (eps_total, eps_measure) = if private {
            (ledger.epsilon()?, ledger.epsilon_for(EventTag::Measure)?)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        let record = MetricsRecord {
            epoch,
            steps,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_accuracy: accuracy(&net, val).map_err(|e| e.at_epoch(epoch))?,
            eps_total,
            eps_measure,
            layers: MetricsRecord::policy_layers(&policy),
            wall_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = sink.as_deref_mut() {
            w.append(&record)?;
        }
        out.records.push(record);
        if out.truncated {
            break;
        }
    }
    out.ledger = ledger;
    out.network = net;
    Ok(out)
}

/// Output file names inside a run directory.
pub const METRICS_FILE: &str = "metrics.txt";
pub const LEDGER_FILE: &str = "ledger.txt";
pub const IMPACTS_FILE: &str = "impacts.txt";
pub const STATS_FILE: &str = "step_stats.txt";
pub const HISTOGRAM_FILE: &str = "histogram.txt";

/// Loads data, trains, and writes all record files into `out_dir`.
/// Returns the metrics file path.
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train, val) = load_data(cfg)?;
    let arch = cfg.architecture_text()?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let outcome = train_model(cfg, &arch, &train, &val, Some(&mut writer))?;
    outcome.ledger.save(&out_dir.join(LEDGER_FILE))?;
    if !outcome.impacts.is_empty() {
        records::write_impacts(&out_dir.join(IMPACTS_FILE), &outcome.impacts)?;
    }
    if cfg.step_stats {
        records::write_step_stats(&out_dir.join(STATS_FILE), &outcome.step_stats)?;
        records::write_histogram(&out_dir.join(HISTOGRAM_FILE), &outcome.histogram)?;
    }
    Ok(metrics_path)
}
