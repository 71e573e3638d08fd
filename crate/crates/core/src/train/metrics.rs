use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "fold,view,variant,epoch,class,dice_mean,dice_std,loss";

/// One CSV measurement. Training rows carry `epoch` and `loss`; evaluation
/// rows carry `class`, `dice_mean` and `dice_std`. Unused fields stay empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub fold: usize,
    pub view: String,
    pub variant: String,
    pub epoch: Option<usize>,
    pub class: Option<usize>,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub loss: Option<f64>,
}

fn opt<V: std::fmt::Display>(v: &Option<V>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.fold,
            self.view,
            self.variant,
            opt(&self.epoch),
            opt(&self.class),
            opt(&self.dice_mean),
            opt(&self.dice_std),
            opt(&self.loss)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv()).expect("writing to a String");
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = [
            MetricsRow {
                fold: 0,
                view: "sagittal".into(),
                variant: "mda".into(),
                epoch: Some(3),
                class: None,
                dice_mean: None,
                dice_std: None,
                loss: Some(0.25),
            },
            MetricsRow {
                fold: 1,
                view: "axial".into(),
                variant: "plain".into(),
                epoch: None,
                class: Some(2),
                dice_mean: Some(0.9),
                dice_std: Some(0.0),
                loss: None,
            },
        ];
        assert_eq!(
            metrics_csv(&rows),
            "fold,view,variant,epoch,class,dice_mean,dice_std,loss\n0,sagittal,mda,3,,,,0.25\n1,axial,plain,,2,0.9,0,\n"
        );
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}
