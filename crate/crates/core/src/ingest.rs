//! Spambase loading and random assignment of samples to nodes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::costs::{BinomialDeviance, CostError, CostModel};

/// First three spambase attributes: `word_freq_make`, `word_freq_address`,
/// `word_freq_all`.
pub const DEFAULT_FEATURES: [usize; 3] = [0, 1, 2];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row}: label {label} is not 0 or 1")]
    BadLabel { row: usize, label: f64 },
    #[error("dataset is empty")]
    Empty,
    #[error("number of nodes must be at least 1")]
    NoNodes,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Selected feature columns and +/-1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self, IngestError> {
        if features.len() != labels.len() {
            return Err(IngestError::MalformedRow {
                row: features.len().min(labels.len()),
                reason: "feature and label counts differ".into(),
            });
        }
        for (row, &label) in labels.iter().enumerate() {
            if label != 1.0 && label != -1.0 {
                return Err(IngestError::BadLabel { row, label });
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Column-wise zero mean and unit variance. Constant columns are only
    /// centered.
    pub fn standardized(&self) -> Self {
        let n = self.len().max(1) as f64;
        let width = self.feature_count();
        let mut features = self.features.clone();
        for c in 0..width {
            let mean = self.features.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = self
                .features
                .iter()
                .map(|r| (r[c] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for row in &mut features {
                row[c] = (row[c] - mean) / sd;
            }
        }
        Self {
            features,
            labels: self.labels.clone(),
        }
    }

    /// One regularized logistic-loss model per index set.
    pub fn node_models(
        &self,
        parts: &[Vec<usize>],
        gamma: f64,
    ) -> Result<Vec<CostModel>, IngestError> {
        let width = self.feature_count();
        parts
            .iter()
            .map(|idx| {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&k| self.features[k].clone()).collect();
                let labels: Vec<f64> = idx.iter().map(|&k| self.labels[k]).collect();
                Ok(BinomialDeviance::with_width(&rows, &labels, width, gamma)?.into())
            })
            .collect()
    }
}

/// Parses comma-separated numeric rows whose last column is a 0/1 label.
pub fn parse_spambase(text: &str, feature_columns: &[usize]) -> Result<Dataset, IngestError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| IngestError::MalformedRow {
                row,
                reason: format!("non-numeric cell ({e})"),
            })?;
        let Some((&label, values)) = cells.split_last() else {
            unreachable!("split always yields one cell");
        };
        let selected = feature_columns
            .iter()
            .map(|&c| {
                values.get(c).copied().ok_or_else(|| IngestError::MalformedRow {
                    row,
                    reason: format!("column {c} missing (row has {} features)", values.len()),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let label = if label == 0.0 {
            -1.0
        } else if label == 1.0 {
            1.0
        } else {
            return Err(IngestError::BadLabel { row, label });
        };
        features.push(selected);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(Dataset { features, labels })
}

pub fn load_spambase(
    path: impl AsRef<Path>,
    feature_columns: &[usize],
) -> Result<Dataset, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_spambase(&text, feature_columns)
}

/// Assigns each sample of `d` to a node drawn uniformly at random. Returned
/// index sets are sorted.
pub fn partition_dataset(
    d: &Dataset,
    n_nodes: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, IngestError> {
    random_partition(d.len(), n_nodes, seed)
}

/// [`partition_dataset`] over the indices `0..len`.
pub fn random_partition(
    len: usize,
    n_nodes: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, IngestError> {
    if n_nodes == 0 {
        return Err(IngestError::NoNodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::new(); n_nodes];
    for k in 0..len {
        parts[rng.random_range(0..n_nodes)].push(k);
    }
    Ok(parts)
}

/// Seeded shuffle followed by round-robin dealing; set sizes differ by at
/// most one.
pub fn partition_balanced(
    len: usize,
    n_nodes: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, IngestError> {
    if n_nodes == 0 {
        return Err(IngestError::NoNodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    let mut parts = vec![Vec::new(); n_nodes];
    for (pos, k) in order.into_iter().enumerate() {
        parts[pos % n_nodes].push(k);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}
