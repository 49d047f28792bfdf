//! Embedding-space evaluation metrics. Every metric takes embeddings from a
//! caller-chosen encoder, so the formulas are testable without pretrained
//! evaluator networks.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{read_checkpoint, write_checkpoint, CheckpointError, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vectors differ in length: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("empty input")]
    Empty,
    #[error("non-finite embedding value at row {0}")]
    NonFinite(usize),
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("sets are not aligned: {0} vs {1} rows")]
    Unaligned(usize, usize),
    #[error("matrix has eigenvalue {0:e}, below the clamp tolerance")]
    NotPsd(f64),
    #[error("pool of {pool} exceeds the {m} available rows")]
    PoolTooLarge { pool: usize, m: usize },
    #[error("embedding file: {0}")]
    File(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Text,
    Motion,
    Video,
}

impl EmbeddingKind {
    fn tag(self) -> &'static str {
        match self {
            EmbeddingKind::Text => "text",
            EmbeddingKind::Motion => "motion",
            EmbeddingKind::Video => "video",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        [EmbeddingKind::Text, EmbeddingKind::Motion, EmbeddingKind::Video]
            .into_iter()
            .find(|k| k.tag() == s)
    }
}

/// `M × E` row-major embeddings, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub kind: EmbeddingKind,
}

impl EmbeddingSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, kind: EmbeddingKind) -> Result<Self, MetricError> {
        if data.len() != rows * dim {
            return Err(MetricError::DimMismatch(data.len(), rows * dim));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(MetricError::NonFinite(i / dim.max(1)));
        }
        Ok(Self { rows, dim, data, kind })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: EmbeddingKind) -> Result<Self, MetricError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(MetricError::DimMismatch(r.len(), dim));
        }
        Self::new(rows.len(), dim, rows.concat(), kind)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Stored as a one-entry checkpoint named after the kind; values are
    /// written as f32.
    pub fn save(&self, path: &Path) -> Result<(), MetricError> {
        let t = Tensor {
            rows: self.rows,
            cols: self.dim,
            data: self.data.clone(),
        };
        Ok(write_checkpoint(path, &[(self.kind.tag().to_string(), t)])?)
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let mut entries = read_checkpoint(path)?;
        if entries.len() != 1 {
            return Err(MetricError::File(format!("expected 1 tensor, found {}", entries.len())));
        }
        let (name, t) = entries.pop().expect("one entry");
        let kind = EmbeddingKind::from_tag(&name)
            .ok_or_else(|| MetricError::File(format!("unknown embedding kind `{name}`")))?;
        Self::new(t.rows, t.cols, t.data, kind)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// 100 times the cosine similarity of a text and a video embedding.
pub fn mas(text: &[f64], video: &[f64]) -> Result<f64, MetricError> {
    if text.len() != video.len() {
        return Err(MetricError::DimMismatch(text.len(), video.len()));
    }
    if text.is_empty() {
        return Err(MetricError::Empty);
    }
    let (nt, nv) = (norm(text), norm(video));
    if nt == 0.0 || nv == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    let dot: f64 = text.iter().zip(video).map(|(a, b)| a * b).sum();
    Ok((100.0 * dot / (nt * nv)).clamp(-100.0, 100.0))
}

/// Mean of [`mas`] over aligned rows.
pub fn mean_mas(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<f64, MetricError> {
    aligned(text, video)?;
    let total = (0..text.rows).map(|i| mas(text.row(i), video.row(i))).sum::<Result<f64, _>>()?;
    Ok(total / text.rows as f64)
}

fn aligned(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(), MetricError> {
    if a.rows != b.rows {
        return Err(MetricError::Unaligned(a.rows, b.rows));
    }
    if a.dim != b.dim {
        return Err(MetricError::DimMismatch(a.dim, b.dim));
    }
    if a.rows == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Sample mean and unbiased covariance.
fn moments(s: &EmbeddingSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = s.matrix();
    let mu = DVector::from_iterator(s.dim, x.column_iter().map(|c| c.mean()));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (s.rows as f64 - 1.0);
    (mu, cov)
}

/// Eigenvalues below this (relative to the largest magnitude) are an error;
/// smaller negatives are rounding noise and clamp to zero.
const PSD_TOL: f64 = 1e-8;

/// Principal square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOL * scale {
            return Err(MetricError::NotPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two embedding sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^½ S_b S_a^½)^½)`.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, MetricError> {
    if a.dim != b.dim {
        return Err(MetricError::DimMismatch(a.dim, b.dim));
    }
    for s in [a, b] {
        if s.rows < s.dim + 1 {
            return Err(MetricError::TooFewRows {
                need: s.dim + 1,
                got: s.rows,
            });
        }
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let ra = sqrt_psd(&cov_a)?;
    let cross = sqrt_psd(&(&ra * &cov_b * &ra))?;
    let mean_term = (mu_a - mu_b).norm_squared();
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// Top-k retrieval accuracy for each `k` in `ks`: motion `i` is ranked
/// against its own text and `pool - 1` distinct random other texts by
/// Euclidean distance; ties count in favour of the true text.
pub fn r_precision(
    motion: &EmbeddingSet,
    text: &EmbeddingSet,
    pool: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<f64>, MetricError> {
    aligned(motion, text)?;
    let m = motion.rows;
    if pool == 0 || pool > m {
        return Err(MetricError::PoolTooLarge { pool, m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; ks.len()];
    for i in 0..m {
        let q = motion.row(i);
        let own = dist(q, text.row(i));
        // Draw from the m - 1 other rows, skipping `i`.
        let closer = sample(&mut rng, m - 1, pool - 1)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| dist(q, text.row(j)) < own)
            .count();
        let rank = closer + 1;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / m as f64).collect())
}

/// Mean Euclidean distance over aligned pairs.
pub fn mm_dist(motion: &EmbeddingSet, text: &EmbeddingSet) -> Result<f64, MetricError> {
    aligned(motion, text)?;
    Ok((0..motion.rows).map(|i| dist(motion.row(i), text.row(i))).sum::<f64>() / motion.rows as f64)
}

/// Mean pairwise distance within each group of repeated generations,
/// averaged over groups.
pub fn multimodality(groups: &[EmbeddingSet]) -> Result<f64, MetricError> {
    if groups.is_empty() {
        return Err(MetricError::Empty);
    }
    let dim = groups[0].dim;
    let mut total = 0.0;
    for g in groups {
        if g.dim != dim {
            return Err(MetricError::DimMismatch(g.dim, dim));
        }
        if g.rows < 2 {
            return Err(MetricError::TooFewRows { need: 2, got: g.rows });
        }
        let mut sum = 0.0;
        for i in 0..g.rows {
            for j in i + 1..g.rows {
                sum += dist(g.row(i), g.row(j));
            }
        }
        total += sum / (g.rows * (g.rows - 1) / 2) as f64;
    }
    Ok(total / groups.len() as f64)
}
