//! Command implementations behind the `rca` binary. Each returns a
//! serializable report; the binary only parses flags, prints, and maps
//! errors to exit codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::grad::{compare_gradients, finite_diff_grad, loss_and_grad, TensorCheck};
use crate::io::{resolve_instance, InstanceRecord, ResolvedInstance, RunConfig, Vocabulary};
use crate::loss::{total_loss, Lambdas, LossBreakdown};
use crate::model::{ContrastiveInstance, EmbeddingMatrix};
use crate::synth::generate_synthetic;
use crate::tags::{rank_tags, split_pos_neg};
use crate::train::{evaluate_retrieval, train_from, MetricRecord, TrainState};
use crate::uasr::{apply_uasr, UasrResult};

/// Process exit status for an error: 2 for unreadable input, 3 for
/// dimension mismatches, 1 for everything else.
pub fn exit_code(err: &RcaError) -> i32 {
    match err {
        RcaError::Parse { .. } | RcaError::Io(_) | RcaError::Config(_) => 2,
        RcaError::Dimension(_) => 3,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTagEntry {
    pub tag_id: String,
    pub score: f64,
    pub side: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub k: usize,
    pub tags: Vec<RankedTagEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub m: usize,
    pub images: Vec<RankedImage>,
}

pub fn rank(vocab: &Vocabulary, records: &[InstanceRecord], m: usize) -> Result<RankReport> {
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        if r.image_embedding.len() != vocab.dim {
            return Err(RcaError::dim(format!(
                "image {:?} has dimension {}, vocabulary has {}",
                r.image_id,
                r.image_embedding.len(),
                vocab.dim
            )));
        }
        let image = crate::model::Embedding::new(r.image_embedding.clone())?;
        let list = rank_tags(&image, &vocab.entries, m)?;
        let (pos, neg) = split_pos_neg(&list);
        let entry = |side: &str| {
            let side = side.to_owned();
            move |c: &crate::tags::TagCandidate| RankedTagEntry {
                tag_id: c.tag_id.clone(),
                score: c.global_score,
                side: side.clone(),
            }
        };
        let tags = pos.iter().map(entry("P")).chain(neg.iter().map(entry("N"))).collect();
        images.push(RankedImage {
            image_id: r.image_id.clone(),
            k: list.k(),
            tags,
        });
    }
    Ok(RankReport { m, images })
}

fn resolve_all(records: &[InstanceRecord], vocab: Option<&Vocabulary>, m: usize) -> Result<Vec<ResolvedInstance>> {
    records.iter().map(|r| resolve_instance(r, vocab, m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UasrImage {
    pub image_id: String,
    /// Tag ids of `W̄^P`, in order, with repeats from oversampling.
    pub positives: Vec<String>,
    /// Tag ids of `W̄^N`.
    pub negatives: Vec<String>,
    /// Tag ids in `H`.
    pub retrieved: Vec<String>,
    pub positive_sources: Vec<usize>,
    pub negative_sources: Vec<usize>,
    pub weights: Vec<f64>,
    pub positive_fallback: bool,
    pub negative_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UasrReport {
    pub images: Vec<UasrImage>,
}

pub fn uasr(records: &[InstanceRecord], vocab: Option<&Vocabulary>, m: usize) -> Result<UasrReport> {
    let mut images = Vec::new();
    for r in resolve_all(records, vocab, m)? {
        let res = apply_uasr(&r.instance)?;
        let pos = r.positive_ids();
        let neg = r.negative_ids();
        let pool: Vec<&str> = pos.iter().chain(&neg).copied().collect();
        images.push(UasrImage {
            image_id: r.image_id.clone(),
            positives: res.positive_sources.iter().map(|&i| pos[i].to_owned()).collect(),
            negatives: res.negative_sources.iter().map(|&i| neg[i].to_owned()).collect(),
            retrieved: res.retrieved_set.iter().map(|&i| pool[i].to_owned()).collect(),
            positive_sources: res.positive_sources,
            negative_sources: res.negative_sources,
            weights: res.weights,
            positive_fallback: res.positive_fallback,
            negative_fallback: res.negative_fallback,
        });
    }
    Ok(UasrReport { images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLoss {
    pub image_id: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanLoss {
    pub cross: f64,
    pub inner: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub enable_uasr: bool,
    pub images: Vec<ImageLoss>,
    pub mean: MeanLoss,
}

pub fn loss(
    records: &[InstanceRecord],
    vocab: Option<&Vocabulary>,
    m: usize,
    enable_uasr: bool,
    lambdas: Lambdas,
) -> Result<LossReport> {
    let mut images = Vec::new();
    for r in resolve_all(records, vocab, m)? {
        let sel = if enable_uasr {
            apply_uasr(&r.instance)?
        } else {
            UasrResult::passthrough(&r.instance)
        };
        images.push(ImageLoss {
            image_id: r.image_id,
            loss: total_loss(&r.instance, &sel, lambdas)?,
        });
    }
    let n = images.len().max(1) as f64;
    let mean = MeanLoss {
        cross: images.iter().map(|i| i.loss.cross).sum::<f64>() / n,
        inner: images.iter().map(|i| i.loss.inner).sum::<f64>() / n,
        total: images.iter().map(|i| i.loss.total).sum::<f64>() / n,
    };
    Ok(LossReport {
        enable_uasr,
        images,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSizes {
    pub d: usize,
    pub regions: usize,
    pub k: usize,
    pub captions: usize,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        GradcheckSizes {
            d: 8,
            regions: 4,
            k: 3,
            captions: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCheck {
    pub variant: String,
    pub max_relative_error: f64,
    pub tensors: Vec<TensorCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub sizes: GradcheckSizes,
    pub h: f64,
    pub tolerance: f64,
    pub variants: Vec<VariantCheck>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    /// Variant and tensor entry with the largest error.
    pub fn worst(&self) -> Option<(&str, &TensorCheck)> {
        self.variants
            .iter()
            .flat_map(|v| v.tensors.iter().map(move |t| (v.variant.as_str(), t)))
            .max_by(|a, b| a.1.max_relative_error.total_cmp(&b.1.max_relative_error))
    }
}

/// Seeded random instance with standard-normal entries scaled by `scale`.
pub fn random_instance(seed: u64, sizes: GradcheckSizes, scale: f64) -> Result<ContrastiveInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = |rows: usize| {
        let data = (0..rows * sizes.d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        EmbeddingMatrix::new(sizes.d, data)
    };
    let regions = matrix(sizes.regions)?;
    let positives = matrix(sizes.k)?;
    let negatives = matrix(sizes.k)?;
    let caption = matrix(sizes.captions)?;
    let scores = (0..sizes.k).map(|_| rng.random_range(0.05..1.0)).collect();
    ContrastiveInstance::new(regions, positives, negatives, caption, scores)
}

/// Compare analytic and finite-difference gradients for the four loss
/// variants (cross/inner, unweighted/weighted) on one seeded instance.
pub fn gradcheck(seed: u64, sizes: GradcheckSizes, h: f64, tolerance: f64) -> Result<GradcheckReport> {
    let instance = random_instance(seed, sizes, 0.7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let weights: Vec<f64> = (0..sizes.k).map(|_| rng.random_range(0.1..2.0)).collect();

    let plain = UasrResult::passthrough(&instance);
    let mut weighted = plain.clone();
    weighted.weights = weights;

    let mut variants = Vec::new();
    let cases = [
        ("cross", Lambdas::new(1.0, 0.0)?, &plain),
        ("inner", Lambdas::new(0.0, 1.0)?, &plain),
        ("weighted_cross", Lambdas::new(1.0, 0.0)?, &weighted),
        ("weighted_inner", Lambdas::new(0.0, 1.0)?, &weighted),
    ];
    for (name, lambdas, sel) in cases {
        if lambdas.cross == 0.0 && instance.caption_nouns.is_empty() {
            continue;
        }
        let a = loss_and_grad(&instance, sel, lambdas)?;
        let n = finite_diff_grad(&instance, sel, lambdas, h)?;
        let tensors = compare_gradients(&a, &n);
        let max = tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
        variants.push(VariantCheck {
            variant: name.to_owned(),
            max_relative_error: max,
            tensors,
        });
    }
    let max = variants.iter().map(|v| v.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        sizes,
        h,
        tolerance,
        variants,
        max_relative_error: max,
        passed: max < tolerance,
    })
}

pub const STATE_FORMAT: &str = "rca-state";

/// Everything `eval` needs: the configuration that regenerates the dataset
/// and the trained tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial: MetricRecord,
    #[serde(rename = "final")]
    pub last: MetricRecord,
}

/// Generate the dataset, train, and stream each metric record to `on_record`.
pub fn train<F>(config: &RunConfig, on_record: F) -> Result<(TrainSummary, StateFile)>
where
    F: FnMut(&MetricRecord) -> Result<()>,
{
    config.validate()?;
    let dataset = generate_synthetic(&config.synthetic)?;
    let start = TrainState::initial(&dataset, config.trainer.init_tags, config.trainer.seed);
    let state = train_from(start, &dataset, &config.trainer, on_record)?;
    let summary = TrainSummary {
        steps: state.step,
        initial: state.history[0],
        last: *state.history.last().expect("training logs a final record"),
    };
    Ok((
        summary,
        StateFile {
            format: STATE_FORMAT.into(),
            version: 1,
            config: config.clone(),
            state,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub retrieval_accuracy: f64,
}

pub fn eval(file: &StateFile) -> Result<EvalReport> {
    if file.format != STATE_FORMAT {
        return Err(RcaError::Config(format!("not a state file: format {:?}", file.format)));
    }
    let dataset = generate_synthetic(&file.config.synthetic)?;
    let s = &file.state;
    let expect = |m: &EmbeddingMatrix, rows: usize, what: &str| {
        if m.row_count() != rows || m.dim() != dataset.config.d {
            Err(RcaError::dim(format!("{what} table does not match the dataset")))
        } else {
            Ok(())
        }
    };
    expect(&s.tag_table, dataset.tag_embeddings.row_count(), "tag")?;
    expect(&s.region_table, dataset.region_embeddings.row_count(), "region")?;
    expect(&s.caption_table, dataset.caption_embeddings.row_count(), "caption")?;
    Ok(EvalReport {
        step: s.step,
        retrieval_accuracy: evaluate_retrieval(s, &dataset)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(
            exit_code(&RcaError::Parse {
                line: 5,
                message: String::new()
            }),
            2
        );
        assert_eq!(exit_code(&RcaError::Dimension(String::new())), 3);
        assert_eq!(exit_code(&RcaError::EmptyInput(String::new())), 1);
    }

    #[test]
    fn default_gradcheck_passes() {
        let r = gradcheck(0, GradcheckSizes::default(), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{:?}", r.worst());
        assert_eq!(r.variants.len(), 4);
    }

    #[test]
    fn gradcheck_without_captions_skips_inner() {
        let sizes = GradcheckSizes {
            captions: 0,
            ..Default::default()
        };
        let r = gradcheck(3, sizes, 1e-5, 1e-4).unwrap();
        let names: Vec<_> = r.variants.iter().map(|v| v.variant.as_str()).collect();
        assert_eq!(names, ["cross", "weighted_cross"]);
    }
}
