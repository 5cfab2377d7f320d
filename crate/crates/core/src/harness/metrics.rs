//! Evaluation and the metrics CSV.
//!
//! CSV columns, in order:
//! `round,train_loss,test_accuracy,cumulative_uplink_bits,active_count,dropped_count`
//! plus a trailing `wall_seconds` when timing output is requested.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learner::{grad, loss, predict, ModelSpec, ParamVector};

pub const METRICS_HEADER: &str =
    "round,train_loss,test_accuracy,cumulative_uplink_bits,active_count,dropped_count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    /// Global objective over all client data.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub cumulative_uplink_bits: u64,
    /// Clients that ran local updates this round.
    pub active_count: usize,
    /// Sampled clients whose update did not reach the server.
    pub dropped_count: usize,
    pub wall_seconds: f64,
}

/// `(accuracy, mean loss)` on `test`.
pub fn evaluate(spec: &ModelSpec, theta: &[f64], test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if theta.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_params(),
            actual: theta.len(),
        });
    }
    let correct = (0..test.len())
        .filter(|&i| predict(spec, theta, test.features(i)) == test.label(i))
        .count();
    let l = loss(spec, theta, test, &test.all_indices())?;
    Ok((correct as f64 / test.len() as f64, l))
}

pub fn metrics_csv(rows: &[MetricsRow], timing: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    if timing {
        out.push_str(",wall_seconds");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.round, r.train_loss, r.test_accuracy, r.cumulative_uplink_bits, r.active_count, r.dropped_count
        ));
        if timing {
            out.push_str(&format!(",{}", r.wall_seconds));
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_metrics_csv_opts(rows, path, false)
}

pub fn write_metrics_csv_opts(rows: &[MetricsRow], path: &Path, timing: bool) -> Result<()> {
    fs::write(path, metrics_csv(rows, timing)).map_err(|e| Error::io(path, e))
}

/// Full-batch gradient descent on the pooled training set; returns the
/// trained parameters. Serves as the centralized reference model.
pub fn train_centralized(
    spec: &ModelSpec,
    theta0: &[f64],
    train: &Dataset,
    pool: &[usize],
    steps: usize,
    lr: f64,
) -> Result<ParamVector> {
    let mut theta = ParamVector::from_vec(theta0.to_vec());
    for _ in 0..steps {
        let g = grad(spec, &theta, train, pool)?;
        theta.axpy(-lr, &g);
    }
    theta
        .check_finite()
        .map_err(|_| Error::Divergence("centralized training diverged".into()))?;
    Ok(theta)
}
