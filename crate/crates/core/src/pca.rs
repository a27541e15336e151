//! Unsupervised per-dimension importance weights from principal component
//! loadings.
//!
//! `fit_pca` eigendecomposes the sample covariance of the mean-centred
//! training embeddings. `derive_weights` turns the top-K components into one
//! weight per embedding coordinate:
//!
//! ```text
//! w_j = (1/K) * sum_{k<K} |W[j][k]| * ratio_k
//! ```
//!
//! and `apply_weights` multiplies an embedding by those weights elementwise.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{NormalizedEmbedding, SegmentMap};
use crate::schema::FeatureSchema;

#[derive(Debug, Error, PartialEq)]
pub enum PcaError {
    #[error("degenerate PCA input: {0}")]
    DegenerateInput(String),
    #[error("K = {k} outside 1..={dim}")]
    BadK { k: usize, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major D×D; column k is the k-th eigenvector.
    pub components: Vec<f64>,
    pub dim: usize,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn loading(&self, j: usize, k: usize) -> f64 {
        self.components[j * self.dim + k]
    }

    pub fn components_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.components)
    }

    /// Smallest number of leading components whose ratios sum to `coverage`.
    pub fn components_for_coverage(&self, coverage: f64) -> usize {
        let mut acc = 0.0;
        for (k, r) in self.explained_variance_ratio.iter().enumerate() {
            acc += r;
            if acc >= coverage - 1e-12 {
                return k + 1;
            }
        }
        self.dim
    }
}

/// Sample covariance (divides by N - 1) of the rows.
pub fn sample_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centred.tr_mul(&centred) / (n as f64 - 1.0);
    (mean, cov)
}

pub fn fit_pca(rows: &[Vec<f64>]) -> Result<PcaModel, PcaError> {
    if rows.len() < 2 {
        return Err(PcaError::DegenerateInput(format!("need at least 2 rows, got {}", rows.len())));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(PcaError::DegenerateInput("rows have no columns".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(PcaError::DimensionMismatch { expected: d, got: r.len() });
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(PcaError::DegenerateInput("non-finite entry".into()));
    }
    let (mean, cov) = sample_covariance(rows);
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = vec![0.0; d * d];
    let mut eigenvalues = Vec::with_capacity(d);
    for (k, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[j * d + k] = sign * col[j];
        }
        eigenvalues.push(eig.eigenvalues[src]);
    }
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(PcaError::DegenerateInput("all rows are identical".into()));
    }
    let explained_variance_ratio = eigenvalues.iter().map(|l| l.max(0.0) / total).collect();
    Ok(PcaModel {
        mean,
        components,
        dim: d,
        eigenvalues,
        explained_variance_ratio,
    })
}

/// How many leading components feed the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum ComponentSelection {
    /// Exactly this many, clamped to the embedding dimension.
    Fixed(usize),
    /// Fewest components reaching this cumulative explained-variance ratio.
    Coverage(f64),
}

impl Default for ComponentSelection {
    fn default() -> Self {
        ComponentSelection::Fixed(42)
    }
}

impl ComponentSelection {
    pub fn resolve(&self, model: &PcaModel) -> usize {
        match *self {
            ComponentSelection::Fixed(m) => m.clamp(1, model.dim),
            ComponentSelection::Coverage(c) => model.components_for_coverage(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub k_used: usize,
}

impl WeightVector {
    /// All-ones weights; leaves embeddings unchanged.
    pub fn uniform(dim: usize) -> Self {
        WeightVector {
            weights: vec![1.0; dim],
            k_used: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

pub fn derive_weights(model: &PcaModel, k: usize) -> Result<WeightVector, PcaError> {
    if k == 0 || k > model.dim {
        return Err(PcaError::BadK { k, dim: model.dim });
    }
    let weights = (0..model.dim)
        .map(|j| {
            (0..k)
                .map(|c| model.loading(j, c).abs() * model.explained_variance_ratio[c])
                .sum::<f64>()
                / k as f64
        })
        .collect();
    Ok(WeightVector { weights, k_used: k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEmbedding {
    pub vector: Vec<f64>,
    pub source_case_id: String,
}

pub fn apply_weights(emb: &NormalizedEmbedding, w: &WeightVector) -> Result<WeightedEmbedding, PcaError> {
    if emb.vector.len() != w.dim() {
        return Err(PcaError::DimensionMismatch {
            expected: w.dim(),
            got: emb.vector.len(),
        });
    }
    Ok(WeightedEmbedding {
        vector: emb.vector.iter().zip(&w.weights).map(|(x, w)| x * w).collect(),
        source_case_id: emb.case_id.clone(),
    })
}

/// Sums the weights over each feature's coordinates and ranks features by
/// that score, descending, ties broken by name.
pub fn feature_importance_report(
    w: &WeightVector,
    layout: &SegmentMap,
    schema: &FeatureSchema,
) -> Result<Vec<(String, f64)>, PcaError> {
    if layout.dim() != w.dim() {
        return Err(PcaError::DimensionMismatch {
            expected: layout.dim(),
            got: w.dim(),
        });
    }
    let mut scores: Vec<(String, f64)> = schema
        .features
        .iter()
        .filter_map(|f| layout.features.iter().find(|s| s.name == f.name))
        .map(|s| (s.name.clone(), w.weights[s.offset..s.offset + s.len].iter().sum()))
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scores)
}

pub fn write_importance_csv<W: Write>(report: &[(String, f64)], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature", "score"])?;
    for (name, score) in report {
        w.write_record([name.as_str(), &format!("{score:.10}")])?;
    }
    w.flush()
}
