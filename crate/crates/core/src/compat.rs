//! Attention-based compatibility between tags and a context set.
//!
//! A tag queries the context rows (image regions or caption nouns) with a
//! scaled dot product, pools them with softmax weights, and scores itself
//! against the pooled vector:
//!
//! ```text
//! s[j][k] = tags[j] · ctx[k] / sqrt(d)
//! α[j]    = softmax_k(s[j])
//! a[j]    = Σ_k α[j][k] ctx[k]
//! φ[j]    = tags[j] · a[j]
//! ```

use crate::error::{RcaError, Result};
use crate::model::{dot, EmbeddingMatrix, ScoreMatrix};

fn check_pair(tags: &EmbeddingMatrix, contexts: &EmbeddingMatrix) -> Result<()> {
    if tags.dim() != contexts.dim() {
        return Err(RcaError::dim(format!(
            "tags have dimension {}, contexts have {}",
            tags.dim(),
            contexts.dim()
        )));
    }
    if tags.is_empty() {
        return Err(RcaError::EmptyInput("no tag rows".into()));
    }
    if contexts.is_empty() {
        return Err(RcaError::EmptyInput("no context rows".into()));
    }
    Ok(())
}

/// Scaled dot products between every tag and every context row (J×R).
pub fn pairwise_scores(tags: &EmbeddingMatrix, contexts: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    check_pair(tags, contexts)?;
    let scale = (tags.dim() as f64).sqrt().recip();
    let mut data = Vec::with_capacity(tags.row_count() * contexts.row_count());
    for t in tags.rows() {
        data.extend(contexts.rows().map(|c| dot(t, c) * scale));
    }
    ScoreMatrix::new(tags.row_count(), contexts.row_count(), data)
}

/// In-place max-shifted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax over the context axis.
pub fn attention_weights(scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    if scores.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(RcaError::NonFinite("attention scores".into()));
    }
    let mut alpha = scores.clone();
    for r in 0..alpha.rows() {
        softmax_in_place(alpha.row_mut(r));
    }
    Ok(alpha)
}

/// Attention-pooled context vector for each tag row.
///
/// Rows of `alpha` are expected to be probability vectors.
pub fn contextualize(alpha: &ScoreMatrix, contexts: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if alpha.cols() != contexts.row_count() {
        return Err(RcaError::dim(format!(
            "attention has {} columns but there are {} context rows",
            alpha.cols(),
            contexts.row_count()
        )));
    }
    let d = contexts.dim();
    let mut out = EmbeddingMatrix::zeros(alpha.rows(), d);
    for j in 0..alpha.rows() {
        let weights = alpha.row(j);
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let dst = out.row_mut(j);
        for (w, c) in weights.iter().zip(contexts.rows()) {
            for (o, x) in dst.iter_mut().zip(c) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

/// Intermediate values of one compatibility evaluation, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CompatibilityTrace {
    pub alpha: ScoreMatrix,
    pub pooled: EmbeddingMatrix,
    pub phi: Vec<f64>,
}

pub(crate) fn compatibility_traced(tags: &EmbeddingMatrix, contexts: &EmbeddingMatrix) -> Result<CompatibilityTrace> {
    let alpha = attention_weights(&pairwise_scores(tags, contexts)?)?;
    let pooled = contextualize(&alpha, contexts)?;
    let phi = tags.rows().zip(pooled.rows()).map(|(t, a)| dot(t, a)).collect();
    Ok(CompatibilityTrace { alpha, pooled, phi })
}

/// φ(contexts, tags[j]) for every tag row.
///
/// The same function serves region contexts and caption-noun contexts.
pub fn compatibility(tags: &EmbeddingMatrix, contexts: &EmbeddingMatrix) -> Result<Vec<f64>> {
    Ok(compatibility_traced(tags, contexts)?.phi)
}
