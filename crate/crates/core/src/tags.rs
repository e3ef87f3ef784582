//! Ranked tag augmentation.
//!
//! Each image keeps the `M` vocabulary entries closest to it by cosine. The
//! upper half of the ranking becomes the positive side and the lower half the
//! negative side; a random fraction of each side is drawn per training step.

use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::model::{cosine, Embedding};

pub const DEFAULT_TOP_M: usize = 50;
pub const DEFAULT_SUBSAMPLE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagCandidate {
    pub tag_id: String,
    pub embedding: Embedding,
    /// Cosine between the image embedding and this tag at ranking time.
    pub global_score: f64,
}

/// Tags sorted by descending global score, ties by ascending `tag_id`.
/// Always holds an even number `M = 2K` of candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTagList {
    candidates: Vec<TagCandidate>,
}

fn rank_order(a: &TagCandidate, b: &TagCandidate) -> Ordering {
    b.global_score
        .total_cmp(&a.global_score)
        .then_with(|| a.tag_id.cmp(&b.tag_id))
}

impl RankedTagList {
    /// Wrap an already-scored list, sorting it into rank order.
    pub fn from_candidates(mut candidates: Vec<TagCandidate>) -> Result<Self> {
        if candidates.is_empty() || !candidates.len().is_multiple_of(2) {
            return Err(RcaError::Config(format!(
                "a ranked list needs a positive even number of tags, got {}",
                candidates.len()
            )));
        }
        candidates.sort_by(rank_order);
        Ok(RankedTagList { candidates })
    }

    pub fn candidates(&self) -> &[TagCandidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Number of positives (and of negatives).
    pub fn k(&self) -> usize {
        self.candidates.len() / 2
    }
}

/// Pick the `m` vocabulary entries most similar to `image`.
pub fn rank_tags<S: AsRef<str>>(image: &Embedding, vocabulary: &[(S, Embedding)], m: usize) -> Result<RankedTagList> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(RcaError::Config(format!("M must be a positive even integer, got {m}")));
    }
    if vocabulary.len() < m {
        return Err(RcaError::InsufficientVocabulary {
            available: vocabulary.len(),
            requested: m,
        });
    }
    let mut scored = Vec::with_capacity(vocabulary.len());
    for (id, emb) in vocabulary {
        if emb.dim() != image.dim() {
            return Err(RcaError::dim(format!(
                "tag {:?} has dimension {}, image has {}",
                id.as_ref(),
                emb.dim(),
                image.dim()
            )));
        }
        let score = cosine(image.as_slice(), emb.as_slice())
            .map_err(|_| RcaError::DegenerateEmbedding(format!("image or tag {:?} has zero norm", id.as_ref())))?;
        scored.push(TagCandidate {
            tag_id: id.as_ref().to_owned(),
            embedding: emb.clone(),
            global_score: score,
        });
    }
    if m < scored.len() {
        scored.select_nth_unstable_by(m - 1, rank_order);
        scored.truncate(m);
    }
    RankedTagList::from_candidates(scored)
}

/// Top half and bottom half of the ranking.
pub fn split_pos_neg(list: &RankedTagList) -> (&[TagCandidate], &[TagCandidate]) {
    list.candidates.split_at(list.k())
}

/// Number of items kept from a side of `k` items: `ceil(fraction * k)`, at least one.
pub fn subsample_count(k: usize, fraction: f64) -> usize {
    if k == 0 {
        return 0;
    }
    // The small offset keeps products like 0.3 * 10 from rounding up to 4.
    let n = (fraction * k as f64 - 1e-9).ceil();
    (n.max(1.0) as usize).min(k)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(RcaError::Config(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )))
    }
}

/// Sorted index draws for both sides of a `k`/`k` split.
pub fn subsample_indices(k: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(fraction)?;
    let n = subsample_count(k, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let mut idx = index::sample(&mut rng, k, n).into_vec();
        idx.sort_unstable();
        idx
    };
    let pos = draw();
    let neg = draw();
    Ok((pos, neg))
}

/// Draw `ceil(fraction * K)` items from each side without replacement,
/// keeping relative order. Both sides must have the same length `K`.
pub fn subsample<T: Clone>(positives: &[T], negatives: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if positives.len() != negatives.len() {
        return Err(RcaError::dim(format!(
            "{} positives but {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let (pi, ni) = subsample_indices(positives.len(), fraction, seed)?;
    Ok((
        pi.iter().map(|&i| positives[i].clone()).collect(),
        ni.iter().map(|&i| negatives[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn orthogonal_and_antipodal_ordering() {
        let vocab = vec![("c", e(&[-1.0, 0.0])), ("a", e(&[1.0, 0.0])), ("b", e(&[0.0, 1.0]))];
        let list = rank_tags(&e(&[1.0, 0.0]), &vocab, 2).unwrap();
        let ids: Vec<_> = list.candidates().iter().map(|c| c.tag_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(list.candidates()[0].global_score, 1.0);
        assert_eq!(list.candidates()[1].global_score, 0.0);
        assert_eq!(list.k(), 1);
    }

    #[test]
    fn ties_break_by_tag_id() {
        let vocab: Vec<_> = ["d", "b", "e", "a", "c"]
            .iter()
            .map(|id| (id.to_string(), e(&[0.5, 0.5])))
            .collect();
        let list = rank_tags(&e(&[1.0, 2.0]), &vocab, 4).unwrap();
        let ids: Vec<_> = list.candidates().iter().map(|c| c.tag_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
    }

    #[test]
    fn ranking_errors() {
        let vocab = vec![("a", e(&[1.0, 0.0])), ("b", e(&[0.0, 1.0]))];
        assert!(matches!(
            rank_tags(&e(&[1.0, 0.0]), &vocab, 4),
            Err(RcaError::InsufficientVocabulary {
                available: 2,
                requested: 4
            })
        ));
        assert!(matches!(
            rank_tags(&e(&[1.0, 0.0]), &vocab, 1),
            Err(RcaError::Config(_))
        ));
        assert!(matches!(
            rank_tags(&e(&[0.0, 0.0]), &vocab, 2),
            Err(RcaError::DegenerateEmbedding(_))
        ));
        assert!(matches!(
            rank_tags(&e(&[1.0, 0.0, 0.0]), &vocab, 2),
            Err(RcaError::Dimension(_))
        ));
    }

    #[test]
    fn split_m2() {
        let vocab = vec![("x", e(&[1.0, 0.1])), ("y", e(&[0.1, 1.0]))];
        let list = rank_tags(&e(&[1.0, 0.0]), &vocab, 2).unwrap();
        let (p, n) = split_pos_neg(&list);
        assert_eq!(p[0].tag_id, "x");
        assert_eq!(n[0].tag_id, "y");
    }

    #[test]
    fn full_fraction_is_identity() {
        let p: Vec<u32> = (0..7).collect();
        let n: Vec<u32> = (10..17).collect();
        let (sp, sn) = subsample(&p, &n, 1.0, 3).unwrap();
        assert_eq!(sp, p);
        assert_eq!(sn, n);
    }

    #[test]
    fn tiny_fraction_keeps_one() {
        let p = [1, 2, 3, 4];
        let (sp, sn) = subsample(&p, &p, 1e-12, 0).unwrap();
        assert_eq!((sp.len(), sn.len()), (1, 1));
    }

    #[test]
    fn count_avoids_float_round_up() {
        assert_eq!(subsample_count(10, 0.3), 3);
        assert_eq!(subsample_count(25, 0.5), 13);
        assert_eq!(subsample_count(4, 0.26), 2);
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(subsample(&[1], &[2], 0.0, 0).is_err());
        assert!(subsample(&[1], &[2], 1.5, 0).is_err());
        assert!(subsample(&[1, 2], &[2], 0.5, 0).is_err());
    }
}
