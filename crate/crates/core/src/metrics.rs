//! Run metrics: accuracy over time, final accuracy, timing and resource accounting.
//!
//! RAM and disk figures are an accounting model (exact byte counts of replay
//! buffer, parameters, resident data and on-disk artifacts), so they are
//! deterministic for a given configuration. An optional OS probe records the
//! process resident set size alongside, when enabled.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Review,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Review => "review",
        }
    }
}

/// One row of `metrics.csv`: validation accuracy after a stream batch (or after review).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub t: usize,
    pub phase: Phase,
    pub val_acc: f64,
    /// Mean training loss over the batch's SGD passes.
    pub loss: f64,
    /// Milliseconds since the start of the run.
    pub elapsed_ms: f64,
    pub ram_bytes: u64,
    pub disk_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub train_ms: f64,
    pub review_ms: f64,
    pub test_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<BatchRecord>,
    /// RAM accounting sample taken at every SGD pass.
    pub ram_samples: Vec<u64>,
    /// Bytes on disk after each checkpoint (checkpoint plus memory snapshot).
    pub disk_sizes: Vec<u64>,
    pub memory_snapshot_bytes: u64,
    pub checkpoint_bytes: u64,
    pub timing: PhaseTiming,
    pub final_test_acc: Option<f64>,
    /// Peak OS resident set size, when the probe is enabled.
    pub os_rss_peak_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub ram_peak_bytes: u64,
    pub ram_mean_bytes: f64,
    pub disk_bytes: u64,
    pub train_ms: f64,
    pub review_ms: f64,
    pub test_ms: f64,
    pub total_ms: f64,
}

impl MetricsLog {
    pub fn stream_records(&self) -> impl Iterator<Item = &BatchRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Train)
    }

    /// Mean validation accuracy over the stream batches; the post-review entry
    /// is not part of the average.
    pub fn avg_val_acc(&self) -> Result<f64> {
        let accs: Vec<f64> = self.stream_records().map(|r| r.val_acc).collect();
        if accs.is_empty() {
            return Err(Error::Empty("no per-batch validation accuracies"));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Validation accuracy of the final parameters (the review entry when present).
    pub fn final_val_acc(&self) -> Result<f64> {
        self.records
            .last()
            .map(|r| r.val_acc)
            .ok_or(Error::Empty("no validation accuracies"))
    }

    pub fn final_acc(&self) -> Result<f64> {
        self.final_test_acc
            .ok_or(Error::Empty("final test accuracy not computed"))
    }

    pub fn resource_report(&self) -> ResourceReport {
        let peak = self.ram_samples.iter().copied().max().unwrap_or(0);
        let mean = if self.ram_samples.is_empty() {
            0.0
        } else {
            self.ram_samples.iter().map(|&v| v as f64).sum::<f64>() / self.ram_samples.len() as f64
        };
        ResourceReport {
            ram_peak_bytes: peak,
            ram_mean_bytes: mean,
            disk_bytes: self.checkpoint_bytes + self.memory_snapshot_bytes,
            train_ms: self.timing.train_ms,
            review_ms: self.timing.review_ms,
            test_ms: self.timing.test_ms,
            total_ms: self.timing.total_ms,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,phase,val_acc,elapsed_ms,ram_bytes,disk_bytes\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.3},{},{}",
                r.t,
                r.phase.as_str(),
                r.val_acc,
                r.elapsed_ms,
                r.ram_bytes,
                r.disk_bytes
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The five challenge metrics plus the accuracy curve, as written to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub final_test_acc: f64,
    pub final_val_acc: f64,
    pub avg_val_acc: f64,
    pub val_acc_per_batch: Vec<f64>,
    pub ram_peak_bytes: u64,
    pub ram_mean_bytes: f64,
    pub disk_bytes: u64,
    pub warnings: Vec<String>,
    /// Wall-clock figures; excluded from reproducibility comparisons.
    pub timing: PhaseTiming,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub os_rss_peak_bytes: Option<u64>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        format!(
            "method          {}\nscenario        {}\nseed            {}\n\
             final test acc  {:.4}\n\
             avg val acc     {:.4}  (final val {:.4})\n\
             train / test    {:.1} ms / {:.1} ms  (review {:.1} ms, total {:.1} ms)\n\
             RAM (accounted) peak {} B, mean {:.0} B\n\
             disk            {} B\n",
            self.method,
            self.scenario,
            self.seed,
            self.final_test_acc,
            self.avg_val_acc,
            self.final_val_acc,
            self.timing.train_ms,
            self.timing.test_ms,
            self.timing.review_ms,
            self.timing.total_ms,
            self.ram_peak_bytes,
            self.ram_mean_bytes,
            self.disk_bytes
        )
    }
}

/// Resident set size of this process from `/proc/self/status`, if available.
pub fn os_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, phase: Phase, acc: f64) -> BatchRecord {
        BatchRecord {
            t,
            phase,
            val_acc: acc,
            loss: 0.0,
            elapsed_ms: t as f64,
            ram_bytes: 10 * t as u64,
            disk_bytes: 0,
        }
    }

    #[test]
    fn average_excludes_review() {
        let mut log = MetricsLog {
            records: vec![
                rec(1, Phase::Train, 0.5),
                rec(2, Phase::Train, 0.7),
                rec(3, Phase::Train, 0.9),
            ],
            ..Default::default()
        };
        assert!((log.avg_val_acc().unwrap() - 0.7).abs() < 1e-15);
        log.records.push(rec(3, Phase::Review, 0.95));
        assert!((log.avg_val_acc().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(log.final_val_acc().unwrap(), 0.95);
    }

    #[test]
    fn single_batch_average_equals_final() {
        let log = MetricsLog {
            records: vec![rec(1, Phase::Train, 0.42)],
            ..Default::default()
        };
        assert_eq!(log.avg_val_acc().unwrap(), log.final_val_acc().unwrap());
        assert!(MetricsLog::default().avg_val_acc().is_err());
        assert!(log.final_acc().is_err());
    }

    #[test]
    fn disk_without_checkpoints_is_snapshot_only() {
        let log = MetricsLog {
            memory_snapshot_bytes: 1234,
            ram_samples: vec![10, 30, 20],
            ..Default::default()
        };
        let r = log.resource_report();
        assert_eq!(r.disk_bytes, 1234);
        assert_eq!(r.ram_peak_bytes, 30);
        assert_eq!(r.ram_mean_bytes, 20.0);
    }

    #[test]
    fn csv_layout() {
        let log = MetricsLog {
            records: vec![rec(1, Phase::Train, 0.25), rec(1, Phase::Review, 0.5)],
            ..Default::default()
        };
        let csv = log.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,phase,val_acc,elapsed_ms,ram_bytes,disk_bytes");
        assert_eq!(lines[1], "1,train,0.25,1.000,10,0");
        assert_eq!(lines[2], "1,review,0.5,1.000,10,0");
    }
}
