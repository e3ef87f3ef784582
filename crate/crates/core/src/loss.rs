//! Relative contrastive objectives.
//!
//! Every positive tag is contrasted against the full negative set, never
//! against the other positives:
//!
//! ```text
//! ℓ_n = −log( e^{φ(X, p_n)} / (e^{φ(X, p_n)} + Σ_l e^{φ(X, n_l)}) )
//! L   = (1/K) Σ_n q_n ℓ_n
//! ```
//!
//! `X` is the region set for the cross-modality loss and the caption-noun set
//! for the inner-modality loss. Unweighted losses use `q_n = 1`.

use serde::{Deserialize, Serialize};

use crate::compat::compatibility;
use crate::error::{RcaError, Result};
use crate::model::{ContrastiveInstance, EmbeddingMatrix};
use crate::uasr::UasrResult;

/// `log(e^p + Σ e^n) − p` without overflow, and without losing the small
/// values a well-separated positive produces.
pub(crate) fn relative_nll(p: f64, negatives: &[f64]) -> f64 {
    let top = negatives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top <= p {
        negatives.iter().map(|n| (n - p).exp()).sum::<f64>().ln_1p()
    } else {
        let sum = (p - top).exp() + negatives.iter().map(|n| (n - top).exp()).sum::<f64>();
        top - p + sum.ln()
    }
}

/// Per-positive negative log-likelihoods given precomputed compatibilities.
pub fn relative_nll_terms(phi_pos: &[f64], phi_neg: &[f64]) -> Vec<f64> {
    phi_pos.iter().map(|&p| relative_nll(p, phi_neg)).collect()
}

fn check_weights(q: &[f64], k: usize) -> Result<()> {
    if q.len() != k {
        return Err(RcaError::dim(format!("{k} positives but {} weights", q.len())));
    }
    for (index, &value) in q.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(RcaError::InvalidWeight { index, value });
        }
    }
    Ok(())
}

fn check_sides(positives: &EmbeddingMatrix, negatives: &EmbeddingMatrix) -> Result<usize> {
    let k = positives.row_count();
    if k == 0 {
        return Err(RcaError::EmptyInput("no positive tags".into()));
    }
    if negatives.row_count() != k {
        return Err(RcaError::dim(format!(
            "{k} positives but {} negatives",
            negatives.row_count()
        )));
    }
    Ok(k)
}

fn relative_loss(
    contexts: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    q: Option<&[f64]>,
) -> Result<f64> {
    let k = check_sides(positives, negatives)?;
    if let Some(q) = q {
        check_weights(q, k)?;
    }
    let phi_pos = compatibility(positives, contexts)?;
    let phi_neg = compatibility(negatives, contexts)?;
    let terms = relative_nll_terms(&phi_pos, &phi_neg);
    let sum: f64 = match q {
        Some(q) => terms.iter().zip(q).map(|(t, w)| t * w).sum(),
        None => terms.iter().sum(),
    };
    Ok(sum / k as f64)
}

/// Regions vs. positive/negative tags.
pub fn cross_modality_loss(
    regions: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
) -> Result<f64> {
    relative_loss(regions, positives, negatives, None)
}

/// Caption nouns vs. positive/negative tags. Fails with `EmptyContext` when
/// the caption has no nouns; callers skip the term in that case.
pub fn inner_modality_loss(
    caption_nouns: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
) -> Result<f64> {
    if caption_nouns.is_empty() {
        return Err(RcaError::EmptyContext("caption has no nouns".into()));
    }
    relative_loss(caption_nouns, positives, negatives, None)
}

pub fn weighted_cross_loss(
    regions: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    q: &[f64],
) -> Result<f64> {
    relative_loss(regions, positives, negatives, Some(q))
}

pub fn weighted_inner_loss(
    caption_nouns: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    q: &[f64],
) -> Result<f64> {
    if caption_nouns.is_empty() {
        return Err(RcaError::EmptyContext("caption has no nouns".into()));
    }
    relative_loss(caption_nouns, positives, negatives, Some(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross: f64,
    pub inner: f64,
    pub total: f64,
    pub lambda_cross: f64,
    pub lambda_inner: f64,
}

/// Mixing weights of the cross- and inner-modality terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub cross: f64,
    pub inner: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { cross: 1.0, inner: 1.0 }
    }
}

impl Lambdas {
    pub fn new(cross: f64, inner: f64) -> Result<Self> {
        for (name, v) in [("lambda_cross", cross), ("lambda_inner", inner)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RcaError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Lambdas { cross, inner })
    }
}

/// Check that a selection result addresses rows of `instance`.
pub(crate) fn check_selection(instance: &ContrastiveInstance, uasr: &UasrResult) -> Result<usize> {
    instance.validate()?;
    let k = instance.k();
    let kb = uasr.weights.len();
    if uasr.positive_sources.len() != kb || uasr.negative_sources.len() != kb || kb == 0 {
        return Err(RcaError::dim(format!(
            "selection has {} positives, {} negatives and {kb} weights",
            uasr.positive_sources.len(),
            uasr.negative_sources.len()
        )));
    }
    if uasr
        .positive_sources
        .iter()
        .chain(&uasr.negative_sources)
        .any(|&i| i >= k)
    {
        return Err(RcaError::dim(format!("selection refers past the {k} instance tags")));
    }
    check_weights(&uasr.weights, kb)?;
    Ok(kb)
}

/// Combined objective over the selected tags.
///
/// The filtered tag rows are re-gathered from `instance` through the
/// selection's source indices, so perturbing the instance perturbs the loss.
/// A term whose lambda is zero, or an inner term with no caption nouns, is
/// reported as `0`.
pub fn total_loss(instance: &ContrastiveInstance, uasr: &UasrResult, lambdas: Lambdas) -> Result<LossBreakdown> {
    let lambdas = Lambdas::new(lambdas.cross, lambdas.inner)?;
    check_selection(instance, uasr)?;
    let positives = instance.positives.gather(&uasr.positive_sources);
    let negatives = instance.negatives.gather(&uasr.negative_sources);

    let cross = if lambdas.cross > 0.0 {
        weighted_cross_loss(&instance.regions, &positives, &negatives, &uasr.weights)?
    } else {
        0.0
    };
    let inner = if lambdas.inner > 0.0 && !instance.caption_nouns.is_empty() {
        weighted_inner_loss(&instance.caption_nouns, &positives, &negatives, &uasr.weights)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        cross,
        inner,
        total: lambdas.cross * cross + lambdas.inner * inner,
        lambda_cross: lambdas.cross,
        lambda_inner: lambdas.inner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn symmetric_single_pair_is_ln2() {
        let v = m(&[&[0.2, -0.4, 1.0], &[1.0, 0.0, 0.3]]);
        let w = m(&[&[0.5, 0.5, -0.1]]);
        let l = cross_modality_loss(&v, &w, &w).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn all_equal_phi_gives_ln_one_plus_k() {
        let c = m(&[&[1.0, 0.5, 0.0, -1.0], &[0.0, 0.2, 0.3, 0.1]]);
        let w = m(&[&[0.1, 0.2, 0.3, 0.4], &[0.1, 0.2, 0.3, 0.4]]);
        let l = inner_modality_loss(&c, &w, &w).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tiny_losses_keep_their_precision() {
        let t = relative_nll_terms(&[40.0, 0.0], &[0.0, -1e4]);
        let e = (-40f64).exp();
        assert!((t[0] - e).abs() <= 1e-15 * e);
        assert!((t[1] - std::f64::consts::LN_2).abs() < 1e-15);
        let t = relative_nll_terms(&[-1e4], &[1e4]);
        assert_eq!(t[0], 2e4);
    }

    #[test]
    fn saturated_margin_vanishes() {
        // R = 1, v = e1: φ(pos) = 20, φ(neg) = 0
        let v = m(&[&[1.0, 0.0]]);
        let l = cross_modality_loss(&v, &m(&[&[20.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert!((0.0..1e-8).contains(&l));
    }

    #[test]
    fn huge_compatibilities_do_not_overflow() {
        let v = m(&[&[1.0, 0.0]]);
        let l = cross_modality_loss(&v, &m(&[&[900.0, 0.0]]), &m(&[&[1000.0, 0.0]])).unwrap();
        assert!((l - 100.0).abs() < 1e-9);
    }

    #[test]
    fn weights_validated() {
        let v = m(&[&[1.0, 0.0]]);
        let w = m(&[&[1.0, 1.0]]);
        assert!(matches!(
            weighted_cross_loss(&v, &w, &w, &[0.0]),
            Err(RcaError::InvalidWeight { index: 0, .. })
        ));
        assert!(matches!(
            weighted_cross_loss(&v, &w, &w, &[1.0, 1.0]),
            Err(RcaError::Dimension(_))
        ));
    }

    #[test]
    fn weight_linearity() {
        let v = m(&[&[1.0, 0.3], &[-0.2, 0.8]]);
        let p = m(&[&[0.5, 0.1], &[0.2, -0.7]]);
        let n = m(&[&[0.0, 0.4], &[-0.9, 0.1]]);
        let a = weighted_cross_loss(&v, &p, &n, &[2.0, 1e-6]).unwrap();
        let b = weighted_cross_loss(&v, &p, &n, &[4.0, 2e-6]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-14);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let w = m(&[&[1.0, 1.0]]);
        assert!(matches!(
            inner_modality_loss(&EmbeddingMatrix::empty(2), &w, &w),
            Err(RcaError::EmptyContext(_))
        ));
    }

    #[test]
    fn lambdas_reject_negative() {
        assert!(Lambdas::new(-1.0, 0.0).is_err());
        assert!(Lambdas::new(1.0, f64::NAN).is_err());
    }
}
