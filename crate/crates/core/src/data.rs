//! Datasets, MNIST IDX ingestion, synthetic tasks and label-shard
//! partitioning.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be >= 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: features[index],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the listed rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            file: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = read_u32_be(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic {
            file: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Reads an MNIST-style IDX image/label pair. Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    check_magic(images_path, &images, IDX_IMAGES_MAGIC)?;
    check_magic(labels_path, &labels, IDX_LABELS_MAGIC)?;
    check_len(images_path, &images, 16)?;
    check_len(labels_path, &labels, 8)?;

    let n_images = read_u32_be(&images, 4) as usize;
    let rows = read_u32_be(&images, 8) as usize;
    let cols = read_u32_be(&images, 12) as usize;
    let n_labels = read_u32_be(&labels, 4) as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    check_len(images_path, &images, 16 + n_images * dim)?;
    check_len(labels_path, &labels, 8 + n_labels)?;

    let features = images[16..16 + n_images * dim]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels[8..8 + n_labels].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(features, labels, dim, num_classes)
}

/// Gaussian class clusters: class means are random directions scaled to norm
/// `separation`, samples add unit isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub means: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new<R: Rng + ?Sized>(
        num_classes: usize,
        dim: usize,
        separation: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 || dim == 0 || !(separation >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "synthetic task needs >= 2 classes, dim >= 1, separation >= 0 \
                 (got {num_classes}, {dim}, {separation})"
            )));
        }
        let means = (0..num_classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                dir.iter().map(|v| v * separation / norm).collect()
            })
            .collect();
        Ok(SyntheticTask { means })
    }

    /// Draws `per_class` samples of every class, grouped by class.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<Dataset> {
        let dim = self.means[0].len();
        let mut features = Vec::with_capacity(self.means.len() * per_class * dim);
        let mut labels = Vec::with_capacity(self.means.len() * per_class);
        for (class, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                features.extend(mean.iter().map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + z
                }));
                labels.push(class);
            }
        }
        Dataset::new(features, labels, dim, self.means.len())
    }
}

/// Synthetic Gaussian-cluster dataset; deterministic per seed.
pub fn synth_noniid<R: Rng + ?Sized>(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if samples_per_class == 0 {
        return Err(Error::InvalidArgument("samples_per_class must be >= 1".into()));
    }
    SyntheticTask::new(num_classes, dim, separation, rng)?.sample(samples_per_class, rng)
}

/// Client index lists and their aggregation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    /// Samples left unassigned because shards are cut to equal size.
    #[serde(default)]
    pub dropped_samples: usize,
}

impl Partition {
    pub fn from_assignments(assignments: Vec<Vec<usize>>) -> Result<Self> {
        let weights = client_weights(&assignments)?;
        Ok(Partition {
            assignments,
            weights,
            dropped_samples: 0,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Checks disjointness, index bounds and weight consistency.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for list in &self.assignments {
            for &i in list {
                if i >= dataset_len {
                    return Err(Error::InvalidArgument(format!(
                        "partition index {i} outside dataset of {dataset_len}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} assigned to more than one client"
                    )));
                }
            }
        }
        let expected = client_weights(&self.assignments)?;
        if expected
            .iter()
            .zip(&self.weights)
            .any(|(a, b)| (a - b).abs() > 1e-12)
            || expected.len() != self.weights.len()
        {
            return Err(Error::InvalidArgument(
                "partition weights disagree with client sizes".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `p_i = n_i / sum_j n_j`.
pub fn client_weights(assignments: &[Vec<usize>]) -> Result<Vec<f64>> {
    if assignments.is_empty() {
        return Err(Error::InvalidArgument("partition has no clients".into()));
    }
    if let Some(i) = assignments.iter().position(|a| a.is_empty()) {
        return Err(Error::EmptyClient(i));
    }
    let total: usize = assignments.iter().map(Vec::len).sum();
    Ok(assignments
        .iter()
        .map(|a| a.len() as f64 / total as f64)
        .collect())
}

/// Label-shard partitioning: the data are grouped by label and cut into
/// `num_clients * labels_per_client` shards that never straddle two labels;
/// each client receives `labels_per_client` shards chosen by a seeded
/// permutation, so it sees at most that many distinct labels.
///
/// Shards are apportioned to classes proportionally to class size (every
/// non-empty class gets at least one). Within a class all shards have the
/// same size and the class remainder is dropped.
pub fn shard_partition<R: Rng + ?Sized>(
    ds: &Dataset,
    num_clients: usize,
    labels_per_client: usize,
    rng: &mut R,
) -> Result<Partition> {
    if num_clients == 0 || labels_per_client == 0 {
        return Err(Error::InvalidArgument(
            "num_clients and labels_per_client must be >= 1".into(),
        ));
    }
    let total_shards = num_clients * labels_per_client;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    let nonempty: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if total_shards > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{total_shards} shards requested but only {} samples available",
            ds.len()
        )));
    }

    let counts = apportion_shards(&by_class, &nonempty, total_shards);
    for &c in &nonempty {
        if counts[c] > by_class[c].len() {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, cannot form {} shards",
                by_class[c].len(),
                counts[c]
            )));
        }
    }

    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(total_shards);
    let mut dropped = ds.len();
    for &c in &nonempty {
        if counts[c] == 0 {
            continue;
        }
        let size = by_class[c].len() / counts[c];
        for s in 0..counts[c] {
            shards.push(by_class[c][s * size..(s + 1) * size].to_vec());
            dropped -= size;
        }
    }
    if shards.len() != total_shards {
        return Err(Error::InvalidArgument(format!(
            "could only form {} of {total_shards} shards",
            shards.len()
        )));
    }

    let mut order: Vec<usize> = (0..total_shards).collect();
    order.shuffle(rng);
    let assignments: Vec<Vec<usize>> = order
        .chunks(labels_per_client)
        .map(|ids| {
            let mut idx: Vec<usize> = ids.iter().flat_map(|&s| shards[s].clone()).collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    let weights = client_weights(&assignments)?;
    Ok(Partition {
        assignments,
        weights,
        dropped_samples: dropped,
    })
}

/// Largest-remainder apportionment with a floor of one shard per non-empty
/// class (when there are at least as many shards as classes).
fn apportion_shards(by_class: &[Vec<usize>], nonempty: &[usize], total: usize) -> Vec<usize> {
    let mut counts = vec![0usize; by_class.len()];
    let n: usize = nonempty.iter().map(|&c| by_class[c].len()).sum();
    let mut remaining = total;
    if total >= nonempty.len() {
        for &c in nonempty {
            counts[c] = 1;
        }
        remaining -= nonempty.len();
    }
    let quotas: Vec<(usize, f64)> = nonempty
        .iter()
        .map(|&c| (c, by_class[c].len() as f64 * total as f64 / n as f64))
        .collect();
    // Top up classes whose quota exceeds their floor.
    let mut extra: Vec<(usize, f64)> = quotas
        .iter()
        .map(|&(c, q)| (c, (q - counts[c] as f64).max(0.0)))
        .collect();
    for (c, e) in extra.iter_mut() {
        let whole = (e.floor() as usize).min(remaining);
        counts[*c] += whole;
        remaining -= whole;
        *e -= whole as f64;
    }
    extra.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut k = 0;
    while remaining > 0 {
        counts[extra[k % extra.len()].0] += 1;
        remaining -= 1;
        k += 1;
    }
    counts
}

/// Uniformly shuffled split into `num_clients` near-equal parts.
pub fn iid_partition<R: Rng + ?Sized>(ds: &Dataset, num_clients: usize, rng: &mut R) -> Result<Partition> {
    if num_clients == 0 || num_clients > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples over {num_clients} clients",
            ds.len()
        )));
    }
    let mut idx = ds.all_indices();
    idx.shuffle(rng);
    let base = idx.len() / num_clients;
    let extra = idx.len() % num_clients;
    let mut assignments = Vec::with_capacity(num_clients);
    let mut start = 0;
    for c in 0..num_clients {
        let len = base + usize::from(c < extra);
        let mut part = idx[start..start + len].to_vec();
        part.sort_unstable();
        assignments.push(part);
        start += len;
    }
    Partition::from_assignments(assignments)
}

/// Distinct labels present in each client's shard set.
pub fn labels_per_client(ds: &Dataset, part: &Partition) -> Vec<usize> {
    part.assignments
        .iter()
        .map(|a| a.iter().map(|&i| ds.label(i)).collect::<BTreeSet<_>>().len())
        .collect()
}
