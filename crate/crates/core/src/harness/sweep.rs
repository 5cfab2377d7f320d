//! Grid sweeps over config fields.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use super::metrics::{write_metrics_csv, MetricsRow};
use super::run::run_experiment;
use crate::error::{Error, Result};

/// A base config and, per dotted field path, the values to try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub grid: BTreeMap<String, Vec<Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub overrides: BTreeMap<String, Value>,
    pub config: ExperimentConfig,
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        // an unset optional section starts from its defaults
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, "does not address a JSON object field"))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::config(path, "empty field path"))
}

/// Expands the cartesian product of the grid (keys in lexicographic order,
/// last key varying fastest). Each point is validated.
pub fn expand(sweep: &SweepConfig) -> Result<Vec<SweepPoint>> {
    let base = serde_json::to_value(&sweep.base)?;
    let keys: Vec<&String> = sweep.grid.keys().collect();
    for k in &keys {
        if sweep.grid[*k].is_empty() {
            return Err(Error::config(k.as_str(), "sweep values are empty"));
        }
    }
    let total: usize = keys.iter().map(|k| sweep.grid[*k].len()).product();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut overrides = BTreeMap::new();
        for k in keys.iter().rev() {
            let vals = &sweep.grid[*k];
            overrides.insert((*k).clone(), vals[rem % vals.len()].clone());
            rem /= vals.len();
        }
        let mut v = base.clone();
        for (k, val) in &overrides {
            set_path(&mut v, k, val.clone())?;
        }
        let config: ExperimentConfig = serde_json::from_value(v)?;
        config.validate()?;
        points.push(SweepPoint {
            index,
            overrides,
            config,
        });
    }
    Ok(points)
}

/// Runs every grid point (in parallel) and writes `run_<index>.csv` plus an
/// `index.json` listing the overrides of each run into `out_dir`.
pub fn sweep(sweep: &SweepConfig, out_dir: &Path) -> Result<Vec<(SweepPoint, Vec<MetricsRow>)>> {
    let points = expand(sweep)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Vec<MetricsRow>> = points
        .par_iter()
        .map(|p| run_experiment(&p.config))
        .collect::<Result<_>>()?;
    for (p, rows) in points.iter().zip(&results) {
        write_metrics_csv(rows, &out_dir.join(format!("run_{:03}.csv", p.index)))?;
    }
    let index_path = out_dir.join("index.json");
    fs::write(&index_path, serde_json::to_string_pretty(&points)?).map_err(|e| Error::io(&index_path, e))?;
    Ok(points.into_iter().zip(results).collect())
}
