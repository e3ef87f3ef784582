//! Dense embedding containers and the per-image contrastive bundle.
//!
//! Everything is stored as `f64`, row-major. Matrices may have zero rows (an
//! image whose caption has no nouns), but never a zero embedding dimension.

use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};

/// A single finite embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RcaError::EmptyInput("embedding has no components".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RcaError::NonFinite("embedding".into()));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = RcaError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Fails on zero-norm input, where the angle is undefined.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RcaError::dim(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RcaError::DegenerateEmbedding(
            "cosine similarity needs non-zero vectors".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rectangular stack of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<MatrixRepr> for EmbeddingMatrix {
    type Error = RcaError;

    fn try_from(repr: MatrixRepr) -> Result<Self> {
        EmbeddingMatrix::from_rows_with_dim(repr.dim, &repr.rows)
    }
}

impl From<EmbeddingMatrix> for MatrixRepr {
    fn from(m: EmbeddingMatrix) -> Self {
        MatrixRepr {
            dim: m.dim,
            rows: m.rows().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl EmbeddingMatrix {
    /// Build from a flat row-major buffer.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(RcaError::dim("embedding dimension must be at least 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(RcaError::dim(format!(
                "buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RcaError::NonFinite("embedding matrix".into()));
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be at least 1");
        EmbeddingMatrix {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self::zeros(0, dim)
    }

    /// Build from nested rows; the dimension is taken from the first row.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| RcaError::EmptyInput("cannot infer dimension from zero rows".into()))?;
        Self::from_rows_with_dim(dim, rows)
    }

    pub fn from_rows_with_dim<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(RcaError::dim(format!("row {i} has length {}, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// New matrix holding the listed rows, in order; indices may repeat.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix { dim: self.dim, data }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(RcaError::dim(format!(
                "cannot stack dimension {} onto {}",
                other.dim, self.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(EmbeddingMatrix { dim: self.dim, data })
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(RcaError::dim(format!(
                "row of length {} pushed onto dimension {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(RcaError::NonFinite("pushed row".into()));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain real-valued matrix, used for score and attention grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RcaError::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(RcaError::dim("ragged score matrix".to_string()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One image's contrastive bundle.
///
/// `global_scores[n]` is the image-level relevance `p(t_n)` of positive `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveInstance {
    pub regions: EmbeddingMatrix,
    pub positives: EmbeddingMatrix,
    pub negatives: EmbeddingMatrix,
    pub caption_nouns: EmbeddingMatrix,
    pub global_scores: Vec<f64>,
}

impl ContrastiveInstance {
    pub fn new(
        regions: EmbeddingMatrix,
        positives: EmbeddingMatrix,
        negatives: EmbeddingMatrix,
        caption_nouns: EmbeddingMatrix,
        global_scores: Vec<f64>,
    ) -> Result<Self> {
        let inst = ContrastiveInstance {
            regions,
            positives,
            negatives,
            caption_nouns,
            global_scores,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.regions.dim();
        for (name, m) in [
            ("positives", &self.positives),
            ("negatives", &self.negatives),
            ("caption_nouns", &self.caption_nouns),
        ] {
            if m.dim() != d {
                return Err(RcaError::dim(format!(
                    "{name} have dimension {}, regions have {d}",
                    m.dim()
                )));
            }
        }
        if self.regions.row_count() == 0 {
            return Err(RcaError::EmptyInput("instance has no regions".into()));
        }
        let k = self.positives.row_count();
        if k == 0 {
            return Err(RcaError::EmptyInput("instance has no positive tags".into()));
        }
        if self.negatives.row_count() != k {
            return Err(RcaError::dim(format!(
                "{k} positives but {} negatives",
                self.negatives.row_count()
            )));
        }
        if self.global_scores.len() != k {
            return Err(RcaError::dim(format!(
                "{k} positives but {} global scores",
                self.global_scores.len()
            )));
        }
        if self.global_scores.iter().any(|s| !s.is_finite()) {
            return Err(RcaError::NonFinite("global scores".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.regions.dim()
    }

    /// Number of positives, which equals the number of negatives.
    pub fn k(&self) -> usize {
        self.positives.row_count()
    }
}
