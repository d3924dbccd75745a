//! Line-delimited output records.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::diagnostics::{Log2Histogram, StepStats};
use crate::error::{Error, Result};
use crate::net::QuantPolicy;
use crate::scheduler::ImpactRound;

pub const METRICS_HEADER: &str =
    "# dpquant-metrics v1: epoch steps train_loss val_accuracy eps_total eps_measure layers wall_s";

/// One line of the metrics file, emitted after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Logical steps taken in the epoch; short when the budget ran out.
    pub steps: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub eps_total: f64,
    pub eps_measure: f64,
    pub layers: Vec<usize>,
    pub wall_s: f64,
}

fn fmt_layers(layers: &[usize]) -> String {
    if layers.is_empty() {
        "-".into()
    } else {
        layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl MetricsRecord {
    pub fn policy_layers(policy: &QuantPolicy) -> Vec<usize> {
        policy.ids().collect()
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {:.6} {:.6} {:.6} {:.6} {} {:.3}",
            self.epoch,
            self.steps,
            self.train_loss,
            self.val_accuracy,
            self.eps_total,
            self.eps_measure,
            fmt_layers(&self.layers),
            self.wall_s
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics line `{line}`"));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let layers = if f[6] == "-" {
            Vec::new()
        } else {
            f[6].split(',')
                .map(|v| v.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            steps: f[1].parse().map_err(|_| bad())?,
            train_loss: num(f[2])?,
            val_accuracy: num(f[3])?,
            eps_total: num(f[4])?,
            eps_measure: num(f[5])?,
            layers,
            wall_s: num(f[7])?,
        })
    }
}

/// Appends metrics lines to a file that starts with the versioned header.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write_line(METRICS_HEADER)?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        self.write_line(&record.to_line())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "missing metrics header".into(),
        });
    }
    lines.map(MetricsRecord::parse_line).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `epoch layer_id raw_impact privatized_impact ema`, one line per policy per round.
pub fn impacts_text(rounds: &[(usize, Vec<usize>, ImpactRound)]) -> String {
    let mut s = String::from("# epoch layer_id raw_impact privatized_impact ema\n");
    for (epoch, layers, round) in rounds {
        for (i, layer) in layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{epoch} {layer} {:.9e} {:.9e} {:.9e}",
                round.raw[i], round.privatized[i], round.ema[i]
            );
        }
    }
    s
}

pub fn write_impacts(path: &Path, rounds: &[(usize, Vec<usize>, ImpactRound)]) -> Result<()> {
    write_text(path, &impacts_text(rounds))
}

/// `step norm_inf_raw norm_2_raw norm_inf_clip norm_inf_noise`
pub fn step_stats_text(stats: &[StepStats]) -> String {
    let mut s = String::from("# step norm_inf_raw norm_2_raw norm_inf_clip norm_inf_noise median_log2_ratio\n");
    for st in stats {
        let _ = writeln!(
            s,
            "{} {:.9e} {:.9e} {:.9e} {:.9e} {:.6}",
            st.step, st.norm_inf_raw, st.norm_2_raw, st.norm_inf_clip, st.norm_inf_noise, st.median_log2_ratio
        );
    }
    s
}

pub fn write_step_stats(path: &Path, stats: &[StepStats]) -> Result<()> {
    write_text(path, &step_stats_text(stats))
}

/// `bin_low bin_high count`
pub fn histogram_text(hist: &Log2Histogram) -> String {
    let mut s = String::from("# bin_low bin_high count\n");
    for (lo, hi, c) in hist.rows() {
        let _ = writeln!(s, "{lo} {hi} {c}");
    }
    s
}

pub fn write_histogram(path: &Path, hist: &Log2Histogram) -> Result<()> {
    write_text(path, &histogram_text(hist))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, eps: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            steps: 35,
            train_loss: 1.25,
            val_accuracy: 0.5,
            eps_total: eps,
            eps_measure: 0.0,
            layers: vec![0, 2],
            wall_s: 1.5,
        }
    }

    #[test]
    fn header_once_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.append(&rec(0, 1.0)).unwrap();
        w.append(&rec(1, 2.0)).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(METRICS_HEADER).count(), 1);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, vec![rec(0, 1.0), rec(1, 2.0)]);
    }

    #[test]
    fn unwritable_path() {
        assert!(MetricsWriter::create(Path::new("/nonexistent-dir/m.txt")).is_err());
    }

    #[test]
    fn empty_policy_renders_dash() {
        let mut r = rec(0, 0.0);
        r.layers.clear();
        let back = MetricsRecord::parse_line(&r.to_line()).unwrap();
        assert!(back.layers.is_empty());
    }
}
