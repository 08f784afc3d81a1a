//! Per-epoch metrics rows and their CSV form.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,split,lr,loss,top1,top5";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl MetricsRow {
    pub fn new(epoch: usize, split: &str, lr: f64, loss: f64, top1: f64, top5: f64) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            lr,
            loss,
            top1,
            top5,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.lr, self.loss, self.top1, self.top5
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Appends rows to `path`, writing the header first if the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = f.metadata()?.len() == 0;
    let mut s = String::new();
    if fresh {
        s.push_str(METRICS_HEADER);
        s.push('\n');
    }
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    f.write_all(s.as_bytes())?;
    Ok(())
}
