//! Uncertainty-aware selection and re-weighting of contrastive tags.
//!
//! Every region votes for the tag it is most cosine-similar to. The set of
//! winning tags `H` corroborates positives and exposes negatives that are
//! actually depicted. Survivors are cycled back up to `K` per side, and each
//! surviving positive gets a confidence weight from its best region and its
//! image-level score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::model::{cosine, ContrastiveInstance, EmbeddingMatrix};

/// Floor applied to non-positive image-level scores before they become weights.
pub const MIN_GLOBAL_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UasrResult {
    /// Filtered positives `W̄^P`, `K` rows, possibly repeated.
    pub positives_filtered: EmbeddingMatrix,
    /// Filtered negatives `W̄^N`, `K` rows, possibly repeated.
    pub negatives_filtered: EmbeddingMatrix,
    /// Per-row weight `q` of `positives_filtered`.
    pub weights: Vec<f64>,
    /// `H`: indices into the pool `positives ++ negatives`, ascending.
    pub retrieved_set: Vec<usize>,
    /// Row of `instance.positives` behind each filtered positive.
    pub positive_sources: Vec<usize>,
    /// Row of `instance.negatives` behind each filtered negative.
    pub negative_sources: Vec<usize>,
    pub positive_fallback: bool,
    pub negative_fallback: bool,
}

impl UasrResult {
    /// No filtering and unit weights; what the losses see with UASR disabled.
    pub fn passthrough(instance: &ContrastiveInstance) -> Self {
        let k = instance.k();
        UasrResult {
            positives_filtered: instance.positives.clone(),
            negatives_filtered: instance.negatives.clone(),
            weights: vec![1.0; k],
            retrieved_set: Vec::new(),
            positive_sources: (0..k).collect(),
            negative_sources: (0..k).collect(),
            positive_fallback: false,
            negative_fallback: false,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

/// Cosine similarity between a region and a tag.
pub fn local_uncertainty(v: &[f64], w: &[f64]) -> Result<f64> {
    cosine(v, w)
}

/// For each region, the index of its most similar tag; returned de-duplicated
/// and ascending. Ties go to the lowest index.
pub fn retrieve_top_tags(regions: &EmbeddingMatrix, tags: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if regions.dim() != tags.dim() {
        return Err(RcaError::dim(format!(
            "regions have dimension {}, tags have {}",
            regions.dim(),
            tags.dim()
        )));
    }
    if tags.is_empty() {
        return Err(RcaError::EmptyInput("no tags to retrieve from".into()));
    }
    let mut winners = BTreeSet::new();
    for v in regions.rows() {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, w) in tags.rows().enumerate() {
            let u = local_uncertainty(v, w)?;
            if u > best.1 {
                best = (k, u);
            }
        }
        winners.insert(best.0);
    }
    Ok(winners.into_iter().collect())
}

/// Outcome of [`select`]: both sides back at full length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection<T> {
    pub positives: Vec<T>,
    pub negatives: Vec<T>,
    pub positive_fallback: bool,
    pub negative_fallback: bool,
}

fn cycle_to<T: Clone>(items: &[T], len: usize) -> Vec<T> {
    items.iter().cycle().take(len).cloned().collect()
}

/// Keep positives found in `retrieved`, drop negatives found in it, then
/// cycle each side's survivors until it has its original length again.
///
/// `negatives` must be in rank order: if every negative is retrieved, the
/// last (lowest-ranked) one is repeated.
pub fn select<T: PartialEq + Clone>(positives: &[T], negatives: &[T], retrieved: &[T]) -> Selection<T> {
    let kept_pos: Vec<T> = positives.iter().filter(|t| retrieved.contains(t)).cloned().collect();
    let kept_neg: Vec<T> = negatives.iter().filter(|t| !retrieved.contains(t)).cloned().collect();

    let positive_fallback = kept_pos.is_empty();
    let negative_fallback = kept_neg.is_empty() && !negatives.is_empty();

    let positives = if positive_fallback {
        positives.to_vec()
    } else {
        cycle_to(&kept_pos, positives.len())
    };
    let negatives = if negative_fallback {
        vec![negatives[negatives.len() - 1].clone(); negatives.len()]
    } else {
        cycle_to(&kept_neg, negatives.len())
    };
    Selection {
        positives,
        negatives,
        positive_fallback,
        negative_fallback,
    }
}

/// Raw weights `exp(max_i cos(v_i, w_n)) * p_n`, before normalisation.
pub fn reweight_raw(positives: &EmbeddingMatrix, regions: &EmbeddingMatrix, global_scores: &[f64]) -> Result<Vec<f64>> {
    if global_scores.len() != positives.row_count() {
        return Err(RcaError::dim(format!(
            "{} positives but {} global scores",
            positives.row_count(),
            global_scores.len()
        )));
    }
    if regions.is_empty() {
        return Err(RcaError::EmptyInput("no regions to weight against".into()));
    }
    let mut q = Vec::with_capacity(global_scores.len());
    for (w, &p) in positives.rows().zip(global_scores) {
        let mut best = f64::NEG_INFINITY;
        for v in regions.rows() {
            best = best.max(local_uncertainty(v, w)?);
        }
        let global = if p > 0.0 {
            p
        } else {
            log::warn!("non-positive global score {p} clamped to {MIN_GLOBAL_WEIGHT}");
            MIN_GLOBAL_WEIGHT
        };
        q.push(best.exp() * global);
    }
    Ok(q)
}

/// Scale weights to mean one.
pub fn normalize_weights(q: &mut [f64]) {
    let mean = q.iter().sum::<f64>() / q.len() as f64;
    for v in q.iter_mut() {
        *v /= mean;
    }
}

/// Per-positive confidence weights, normalised to mean one.
pub fn reweight(positives: &EmbeddingMatrix, regions: &EmbeddingMatrix, global_scores: &[f64]) -> Result<Vec<f64>> {
    let mut q = reweight_raw(positives, regions, global_scores)?;
    normalize_weights(&mut q);
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UasrOptions {
    /// Rescale `q` to mean one.
    pub normalize_weights: bool,
}

impl Default for UasrOptions {
    fn default() -> Self {
        UasrOptions {
            normalize_weights: true,
        }
    }
}

/// Retrieve, select and reweight for one instance with default options.
pub fn apply_uasr(instance: &ContrastiveInstance) -> Result<UasrResult> {
    apply_uasr_with(instance, UasrOptions::default())
}

pub fn apply_uasr_with(instance: &ContrastiveInstance, options: UasrOptions) -> Result<UasrResult> {
    instance.validate()?;
    let k = instance.k();
    let pool = instance.positives.concat(&instance.negatives)?;
    let retrieved = retrieve_top_tags(&instance.regions, &pool)?;

    let pos_ids: Vec<usize> = (0..k).collect();
    let neg_ids: Vec<usize> = (k..2 * k).collect();
    let sel = select(&pos_ids, &neg_ids, &retrieved);
    let negative_sources: Vec<usize> = sel.negatives.iter().map(|i| i - k).collect();
    let positive_sources = sel.positives;

    let positives_filtered = instance.positives.gather(&positive_sources);
    let scores: Vec<f64> = positive_sources.iter().map(|&i| instance.global_scores[i]).collect();
    let mut weights = reweight_raw(&positives_filtered, &instance.regions, &scores)?;
    if options.normalize_weights {
        normalize_weights(&mut weights);
    }
    Ok(UasrResult {
        positives_filtered,
        negatives_filtered: instance.negatives.gather(&negative_sources),
        weights,
        retrieved_set: retrieved,
        positive_sources,
        negative_sources,
        positive_fallback: sel.positive_fallback,
        negative_fallback: sel.negative_fallback,
    })
}
