//! Synthetic multimodal data with known concept structure.
//!
//! Each concept owns a unit prototype. Regions, tags and caption nouns of a
//! concept are noisy copies of its prototype. An image shows
//! `regions_per_image` distinct concepts; its positive tags are those
//! concepts and its negatives are drawn from the absent ones. With
//! probability `flip_rate` one positive and one negative trade places,
//! planting a false positive and a false negative.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::model::{cosine, ContrastiveInstance, EmbeddingMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_concepts: usize,
    pub d: usize,
    pub n_images: usize,
    pub regions_per_image: usize,
    pub noise_sigma: f64,
    pub flip_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_concepts: 10,
            d: 16,
            n_images: 200,
            regions_per_image: 4,
            noise_sigma: 0.1,
            flip_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RcaError::Config(msg));
        if self.n_concepts < 2 {
            return bad(format!("n_concepts must be >= 2, got {}", self.n_concepts));
        }
        if self.d < 2 {
            return bad(format!("d must be >= 2, got {}", self.d));
        }
        if self.n_images == 0 || self.regions_per_image == 0 {
            return bad("n_images and regions_per_image must be positive".into());
        }
        if self.n_concepts < self.regions_per_image + 1 {
            return bad(format!(
                "{} concepts leave no absent concept for negatives with {} regions per image",
                self.n_concepts, self.regions_per_image
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.flip_rate) {
            return bad(format!("flip_rate must lie in [0, 1), got {}", self.flip_rate));
        }
        Ok(())
    }

    /// Tags per side; one positive per region.
    pub fn k(&self) -> usize {
        self.regions_per_image
    }

    /// Caption nouns per image: the first half (rounded up) of its concepts.
    pub fn caption_nouns_per_image(&self) -> usize {
        self.regions_per_image.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    /// Ground-truth concept of each region, in region order.
    pub concepts: Vec<usize>,
    /// Tag ids (= concept ids) on the positive side, in rank order.
    pub positives: Vec<usize>,
    /// Tag ids on the negative side, in rank order.
    pub negatives: Vec<usize>,
    /// Concept ids of the caption nouns.
    pub caption_concepts: Vec<usize>,
    /// Image-level score of each positive slot.
    pub global_scores: Vec<f64>,
    /// Positive and negative slot swapped by label noise, if any.
    pub flipped: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub prototypes: EmbeddingMatrix,
    /// Observed embedding of each concept's tag.
    pub tag_embeddings: EmbeddingMatrix,
    /// Observed embedding of each concept's caption noun.
    pub caption_embeddings: EmbeddingMatrix,
    /// All regions, `regions_per_image` consecutive rows per image.
    pub region_embeddings: EmbeddingMatrix,
    pub images: Vec<SyntheticImage>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::model::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], noise: &Normal<f64>) -> Vec<f64> {
    base.iter().map(|b| b + noise.sample(rng)).collect()
}

/// Build a dataset; identical configs give identical datasets.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| RcaError::Config(format!("noise_sigma: {e}")))?;

    let mut prototypes = EmbeddingMatrix::empty(d);
    for _ in 0..config.n_concepts {
        prototypes.push_row(&unit_gaussian(&mut rng, d))?;
    }
    let mut tag_embeddings = EmbeddingMatrix::empty(d);
    let mut caption_embeddings = EmbeddingMatrix::empty(d);
    for c in 0..config.n_concepts {
        tag_embeddings.push_row(&noisy(&mut rng, prototypes.row(c), &noise))?;
    }
    for c in 0..config.n_concepts {
        caption_embeddings.push_row(&noisy(&mut rng, prototypes.row(c), &noise))?;
    }

    let k = config.k();
    let all: Vec<usize> = (0..config.n_concepts).collect();
    let mut region_embeddings = EmbeddingMatrix::empty(d);
    let mut images = Vec::with_capacity(config.n_images);
    for _ in 0..config.n_images {
        let mut shuffled = all.clone();
        shuffled.shuffle(&mut rng);
        let (present, absent) = shuffled.split_at(config.regions_per_image);
        let concepts = present.to_vec();

        let first_region = region_embeddings.row_count();
        for &c in &concepts {
            region_embeddings.push_row(&noisy(&mut rng, prototypes.row(c), &noise))?;
        }
        let mut image = vec![0.0; d];
        for r in first_region..region_embeddings.row_count() {
            for (a, x) in image.iter_mut().zip(region_embeddings.row(r)) {
                *a += x;
            }
        }
        let score = |tag: usize| cosine(&image, tag_embeddings.row(tag)).unwrap_or(0.0);

        let by_score = |ids: &mut Vec<usize>| {
            ids.sort_by(|a, b| score(*b).total_cmp(&score(*a)).then(a.cmp(b)));
        };
        let mut positives = concepts.clone();
        by_score(&mut positives);
        let mut negatives: Vec<usize> = absent.iter().copied().cycle().take(k).collect();
        by_score(&mut negatives);
        let global_scores: Vec<f64> = positives.iter().map(|&t| score(t)).collect();

        let flipped = if rng.random::<f64>() < config.flip_rate {
            let (p, n) = (rng.random_range(0..k), rng.random_range(0..k));
            std::mem::swap(&mut positives[p], &mut negatives[n]);
            Some((p, n))
        } else {
            None
        };

        images.push(SyntheticImage {
            caption_concepts: concepts[..config.caption_nouns_per_image()].to_vec(),
            concepts,
            positives,
            negatives,
            global_scores,
            flipped,
        });
    }

    Ok(SyntheticDataset {
        config: config.clone(),
        prototypes,
        tag_embeddings,
        caption_embeddings,
        region_embeddings,
        images,
    })
}

/// Embedding tables an instance is assembled from.
#[derive(Debug, Clone, Copy)]
pub struct Tables<'a> {
    pub tags: &'a EmbeddingMatrix,
    pub regions: &'a EmbeddingMatrix,
    pub captions: &'a EmbeddingMatrix,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Region-table rows belonging to image `i`.
    pub fn region_rows(&self, i: usize) -> std::ops::Range<usize> {
        let r = self.config.regions_per_image;
        i * r..(i + 1) * r
    }

    pub fn observed_tables(&self) -> Tables<'_> {
        Tables {
            tags: &self.tag_embeddings,
            regions: &self.region_embeddings,
            captions: &self.caption_embeddings,
        }
    }

    /// Contrastive instance of image `i` built from `tables`.
    pub fn instance_with(&self, i: usize, tables: Tables<'_>) -> Result<ContrastiveInstance> {
        let img = &self.images[i];
        let rows: Vec<usize> = self.region_rows(i).collect();
        ContrastiveInstance::new(
            tables.regions.gather(&rows),
            tables.tags.gather(&img.positives),
            tables.tags.gather(&img.negatives),
            tables.captions.gather(&img.caption_concepts),
            img.global_scores.clone(),
        )
    }

    /// Contrastive instance of image `i` from the observed embeddings.
    pub fn instance(&self, i: usize) -> Result<ContrastiveInstance> {
        self.instance_with(i, self.observed_tables())
    }
}
