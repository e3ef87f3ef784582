//! Gradient-descent trainer over the synthetic tables.
//!
//! Tag embeddings start random (or from the observed tag embeddings); region
//! and caption tables start from the observed data. Every step evaluates the
//! objective on a batch of images, optionally after per-step subsampling and
//! UASR, and takes one plain gradient step on every unfrozen table.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compat::compatibility;
use crate::error::{RcaError, Result};
use crate::grad::loss_and_grad;
use crate::loss::{total_loss, Lambdas};
use crate::model::{cosine, ContrastiveInstance, EmbeddingMatrix};
use crate::synth::{SyntheticDataset, Tables};
use crate::tags::{subsample_indices, DEFAULT_SUBSAMPLE_FRACTION};
use crate::uasr::{apply_uasr, UasrResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagInit {
    /// Gaussian rows with unit expected norm.
    Random,
    /// Copy of the dataset's observed tag embeddings.
    Observed,
}

impl std::str::FromStr for TagInit {
    type Err = RcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TagInit::Random),
            "observed" => Ok(TagInit::Observed),
            other => Err(RcaError::Config(format!(
                "init_tags must be `random` or `observed`, got {other:?}"
            ))),
        }
    }
}

/// Which embeddings the selection and weighting step looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UasrSource {
    /// The tables being trained.
    Current,
    /// The dataset's fixed observed embeddings.
    Observed,
}

impl std::str::FromStr for UasrSource {
    type Err = RcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(UasrSource::Current),
            "observed" => Ok(UasrSource::Observed),
            other => Err(RcaError::Config(format!(
                "uasr_source must be `current` or `observed`, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_cross: f64,
    pub lambda_inner: f64,
    pub enable_uasr: bool,
    pub uasr_source: UasrSource,
    pub enable_inner: bool,
    pub enable_subsample: bool,
    pub subsample_fraction: f64,
    pub seed: u64,
    pub init_tags: TagInit,
    pub freeze_tags: bool,
    pub freeze_regions: bool,
    pub freeze_captions: bool,
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 500,
            learning_rate: 1e-4,
            batch_size: 512,
            lambda_cross: 1.0,
            lambda_inner: 1.0,
            enable_uasr: true,
            uasr_source: UasrSource::Current,
            enable_inner: true,
            enable_subsample: true,
            subsample_fraction: DEFAULT_SUBSAMPLE_FRACTION,
            seed: 0,
            init_tags: TagInit::Random,
            freeze_tags: false,
            freeze_regions: false,
            freeze_captions: false,
            log_every: 10,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(RcaError::Config(
                "steps, batch_size and log_every must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RcaError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(RcaError::Config(format!(
                "subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        self.lambdas().map(|_| ())
    }

    pub fn lambdas(&self) -> Result<Lambdas> {
        let inner = if self.enable_inner { self.lambda_inner } else { 0.0 };
        Lambdas::new(self.lambda_cross, inner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub retrieval_accuracy: f64,
    pub mean_pos_phi: f64,
    pub mean_neg_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub tag_table: EmbeddingMatrix,
    pub region_table: EmbeddingMatrix,
    pub caption_table: EmbeddingMatrix,
    pub step: usize,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    pub fn initial(dataset: &SyntheticDataset, init: TagInit, seed: u64) -> Self {
        let tag_table = match init {
            TagInit::Observed => dataset.tag_embeddings.clone(),
            TagInit::Random => {
                let d = dataset.config.d;
                let n = dataset.tag_embeddings.row_count();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a6_5eed);
                let scale = (d as f64).sqrt().recip();
                let data = (0..n * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect();
                EmbeddingMatrix::new(d, data).expect("gaussian draws are finite")
            }
        };
        TrainState {
            tag_table,
            region_table: dataset.region_embeddings.clone(),
            caption_table: dataset.caption_embeddings.clone(),
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn tables(&self) -> Tables<'_> {
        Tables {
            tags: &self.tag_table,
            regions: &self.region_table,
            captions: &self.caption_table,
        }
    }
}

/// Fraction of (image, present concept) pairs whose most cosine-similar
/// region, under the state's tables, shows that concept.
///
/// Ground-truth concepts are used, so planted label noise never enters the
/// metric.
pub fn evaluate_retrieval(state: &TrainState, dataset: &SyntheticDataset) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, img) in dataset.images.iter().enumerate() {
        let rows = dataset.region_rows(i);
        for &concept in &img.concepts {
            let tag = state.tag_table.row(concept);
            let mut best = (0, f64::NEG_INFINITY);
            for (r, row) in rows.clone().enumerate() {
                let u = cosine(state.region_table.row(row), tag)?;
                if u > best.1 {
                    best = (r, u);
                }
            }
            hits += usize::from(img.concepts[best.0] == concept);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Numeric breakdowns inside a step mean the run has diverged.
fn as_divergence(step: usize) -> impl Fn(RcaError) -> RcaError {
    move |e| match e {
        RcaError::NonFinite(_) | RcaError::InvalidWeight { .. } | RcaError::DegenerateEmbedding(_) => {
            RcaError::Divergence { step, loss: f64::NAN }
        }
        other => other,
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Instance of one image with the tag ids backing its positive/negative rows.
struct StepInstance {
    instance: ContrastiveInstance,
    pos_tags: Vec<usize>,
    neg_tags: Vec<usize>,
}

fn step_instance(
    dataset: &SyntheticDataset,
    tables: Tables<'_>,
    i: usize,
    subsample: Option<(f64, u64)>,
) -> Result<StepInstance> {
    let img = &dataset.images[i];
    let (pos_slots, neg_slots) = match subsample {
        Some((fraction, seed)) => subsample_indices(img.positives.len(), fraction, seed)?,
        None => ((0..img.positives.len()).collect(), (0..img.negatives.len()).collect()),
    };
    let pos_tags: Vec<usize> = pos_slots.iter().map(|&s| img.positives[s]).collect();
    let neg_tags: Vec<usize> = neg_slots.iter().map(|&s| img.negatives[s]).collect();
    let rows: Vec<usize> = dataset.region_rows(i).collect();
    let instance = ContrastiveInstance::new(
        tables.regions.gather(&rows),
        tables.tags.gather(&pos_tags),
        tables.tags.gather(&neg_tags),
        tables.captions.gather(&img.caption_concepts),
        pos_slots.iter().map(|&s| img.global_scores[s]).collect(),
    )?;
    Ok(StepInstance {
        instance,
        pos_tags,
        neg_tags,
    })
}

/// Selection for `current`, an instance assembled from the trained tables.
/// `observed` builds the same instance from the dataset's fixed embeddings
/// and is only called when the config asks for it.
fn selection<F>(config: &TrainerConfig, current: &ContrastiveInstance, observed: F) -> Result<UasrResult>
where
    F: FnOnce() -> Result<ContrastiveInstance>,
{
    match (config.enable_uasr, config.uasr_source) {
        (false, _) => Ok(UasrResult::passthrough(current)),
        (true, UasrSource::Current) => apply_uasr(current),
        (true, UasrSource::Observed) => {
            let mut r = apply_uasr(&observed()?)?;
            r.positives_filtered = current.positives.gather(&r.positive_sources);
            r.negatives_filtered = current.negatives.gather(&r.negative_sources);
            Ok(r)
        }
    }
}

/// Full-dataset metrics of `state` without subsampling.
pub fn measure(state: &TrainState, dataset: &SyntheticDataset, config: &TrainerConfig) -> Result<MetricRecord> {
    let lambdas = config.lambdas()?;
    let per_image: Vec<(f64, f64, f64)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let inst = dataset.instance_with(i, state.tables())?;
            let uasr = selection(config, &inst, || dataset.instance(i))?;
            let loss = total_loss(&inst, &uasr, lambdas)?.total;
            let pos = compatibility(&inst.positives, &inst.regions)?;
            let neg = compatibility(&inst.negatives, &inst.regions)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            Ok((loss, mean(&pos), mean(&neg)))
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let (loss, pos, neg) = per_image
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    Ok(MetricRecord {
        step: state.step,
        loss: loss / n,
        retrieval_accuracy: evaluate_retrieval(state, dataset)?,
        mean_pos_phi: pos / n,
        mean_neg_phi: neg / n,
    })
}

struct Contribution {
    loss: f64,
    pos_tags: Vec<usize>,
    neg_tags: Vec<usize>,
    image: usize,
    grads: crate::grad::GradientBundle,
}

fn add_row(table: &mut EmbeddingMatrix, row: usize, grad: &[f64], scale: f64) {
    for (t, g) in table.row_mut(row).iter_mut().zip(grad) {
        *t += scale * g;
    }
}

fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64, u64::MAX));
    let mut idx = index::sample(&mut rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// Run gradient descent from the configured initial state.
pub fn train_alignment(dataset: &SyntheticDataset, config: &TrainerConfig) -> Result<TrainState> {
    let state = TrainState::initial(dataset, config.init_tags, config.seed);
    train_from(state, dataset, config, |_| Ok(()))
}

/// Continue training `state`, handing every logged record to `on_record`
/// as soon as it is produced.
pub fn train_from<F>(
    mut state: TrainState,
    dataset: &SyntheticDataset,
    config: &TrainerConfig,
    mut on_record: F,
) -> Result<TrainState>
where
    F: FnMut(&MetricRecord) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(RcaError::EmptyInput("dataset has no images".into()));
    }
    let lambdas = config.lambdas()?;
    let mut log = |state: &mut TrainState| -> Result<()> {
        let record = measure(state, dataset, config).map_err(as_divergence(state.step))?;
        if !record.loss.is_finite() {
            return Err(RcaError::Divergence {
                step: state.step,
                loss: record.loss,
            });
        }
        on_record(&record)?;
        state.history.push(record);
        Ok(())
    };

    let end = state.step + config.steps;
    while state.step < end {
        let step = state.step;
        if step.is_multiple_of(config.log_every) {
            log(&mut state)?;
        }
        let batch = batch_indices(dataset.len(), config.batch_size, config.seed, step);
        let contributions: Vec<Contribution> = batch
            .par_iter()
            .map(|&i| {
                let subsample = config
                    .enable_subsample
                    .then(|| (config.subsample_fraction, mix_seed(config.seed, step as u64, i as u64)));
                let si = step_instance(dataset, state.tables(), i, subsample)?;
                let uasr = selection(config, &si.instance, || {
                    step_instance(dataset, dataset.observed_tables(), i, subsample).map(|o| o.instance)
                })?;
                let grads = loss_and_grad(&si.instance, &uasr, lambdas)?;
                Ok(Contribution {
                    loss: grads.loss,
                    pos_tags: si.pos_tags,
                    neg_tags: si.neg_tags,
                    image: i,
                    grads,
                })
            })
            .collect::<Result<_>>()
            .map_err(as_divergence(step))?;

        let batch_loss = contributions.iter().map(|c| c.loss).sum::<f64>() / batch.len() as f64;
        if !batch_loss.is_finite() {
            return Err(RcaError::Divergence { step, loss: batch_loss });
        }

        let scale = -config.learning_rate / batch.len() as f64;
        let caption_of = |i: usize| &dataset.images[i].caption_concepts;
        for c in &contributions {
            if !config.freeze_tags {
                for (r, &t) in c.pos_tags.iter().enumerate() {
                    add_row(&mut state.tag_table, t, c.grads.d_positives.row(r), scale);
                }
                for (r, &t) in c.neg_tags.iter().enumerate() {
                    add_row(&mut state.tag_table, t, c.grads.d_negatives.row(r), scale);
                }
            }
            if !config.freeze_regions {
                for (r, row) in dataset.region_rows(c.image).enumerate() {
                    add_row(&mut state.region_table, row, c.grads.d_regions.row(r), scale);
                }
            }
            if !config.freeze_captions {
                for (r, &w) in caption_of(c.image).iter().enumerate() {
                    add_row(&mut state.caption_table, w, c.grads.d_caption.row(r), scale);
                }
            }
        }
        state.step += 1;
        if !(state.tag_table.is_finite() && state.region_table.is_finite() && state.caption_table.is_finite()) {
            return Err(RcaError::Divergence { step, loss: f64::NAN });
        }
    }
    log(&mut state)?;
    Ok(state)
}
