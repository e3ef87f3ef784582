//! JSON-lines file formats and the flat run-configuration file.
//!
//! Floats are written with 17 significant digits so that every `f64`
//! survives a write/read cycle bit for bit.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};
use crate::model::{ContrastiveInstance, Embedding, EmbeddingMatrix};
use crate::synth::SyntheticConfig;
use crate::tags::{rank_tags, split_pos_neg, RankedTagList, TagCandidate, DEFAULT_TOP_M};
use crate::train::TrainerConfig;

pub const VOCAB_FORMAT: &str = "rca-vocab";
pub const VOCAB_VERSION: u32 = 1;

/// serde_json formatter printing every float as `{:.16e}`.
#[derive(Debug, Default, Clone, Copy)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{:.16e}", f64::from(value))
    }
}

/// Compact JSON with full-precision floats.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value
        .serialize(&mut ser)
        .map_err(|e| RcaError::Io(std::io::Error::other(e)))?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// One JSON document followed by a newline.
pub fn write_json_line<W: Write, T: Serialize + ?Sized>(mut out: W, value: &T) -> Result<()> {
    writeln!(out, "{}", to_json(value)?)?;
    Ok(())
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, number: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| RcaError::Parse {
        line: number,
        message: e.to_string(),
    })
}

/// Non-blank lines with 1-based line numbers.
fn numbered_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(RcaError::from))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

fn dim_error(line: usize, msg: impl std::fmt::Display) -> RcaError {
    RcaError::Dimension(format!("line {line}: {msg}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabRecord {
    pub tag_id: String,
    pub embedding: Vec<f64>,
}

/// Tag vocabulary: ids with embeddings of one shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub dim: usize,
    pub entries: Vec<(String, Embedding)>,
}

impl Vocabulary {
    pub fn get(&self, tag_id: &str) -> Option<&Embedding> {
        self.entries.iter().find(|(id, _)| id == tag_id).map(|(_, e)| e)
    }
}

pub fn read_vocabulary<R: BufRead>(reader: R) -> Result<Vocabulary> {
    let mut lines = numbered_lines(reader);
    let (n, header) = lines.next().transpose()?.ok_or(RcaError::Parse {
        line: 1,
        message: "missing vocabulary header".into(),
    })?;
    let header: VocabHeader = parse_line(&header, n)?;
    if header.format != VOCAB_FORMAT || header.version != VOCAB_VERSION {
        return Err(RcaError::Parse {
            line: n,
            message: format!(
                "expected format {VOCAB_FORMAT:?} version {VOCAB_VERSION}, got {:?} version {}",
                header.format, header.version
            ),
        });
    }
    if header.dim == 0 {
        return Err(dim_error(n, "vocabulary dimension must be at least 1"));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for item in lines {
        let (n, line) = item?;
        let rec: VocabRecord = parse_line(&line, n)?;
        if rec.embedding.len() != header.dim {
            return Err(dim_error(
                n,
                format!(
                    "tag {:?} has {} components, header says {}",
                    rec.tag_id,
                    rec.embedding.len(),
                    header.dim
                ),
            ));
        }
        if !seen.insert(rec.tag_id.clone()) {
            return Err(RcaError::Parse {
                line: n,
                message: format!("duplicate tag_id {:?}", rec.tag_id),
            });
        }
        let emb = Embedding::new(rec.embedding).map_err(|e| RcaError::Parse {
            line: n,
            message: e.to_string(),
        })?;
        entries.push((rec.tag_id, emb));
    }
    Ok(Vocabulary {
        dim: header.dim,
        entries,
    })
}

pub fn write_vocabulary<W: Write>(mut out: W, vocab: &Vocabulary) -> Result<()> {
    write_json_line(
        &mut out,
        &VocabHeader {
            format: VOCAB_FORMAT.into(),
            version: VOCAB_VERSION,
            dim: vocab.dim,
        },
    )?;
    for (id, emb) in &vocab.entries {
        write_json_line(
            &mut out,
            &VocabRecord {
                tag_id: id.clone(),
                embedding: emb.as_slice().to_vec(),
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionToken {
    pub text: String,
    pub is_noun: bool,
    pub embedding: Vec<f64>,
}

/// A pre-ranked tag attached to an image. Without an embedding the tag is
/// looked up in the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagRef {
    pub tag_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub image_id: String,
    pub image_embedding: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
    pub caption_tokens: Vec<CaptionToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<TagRef>>,
}

impl InstanceRecord {
    fn check_dims(&self, line: usize, expected: Option<usize>) -> Result<usize> {
        let d = self.image_embedding.len();
        if d == 0 {
            return Err(dim_error(line, "image embedding is empty"));
        }
        if let Some(e) = expected {
            if d != e {
                return Err(dim_error(line, format!("dimension {d}, earlier records use {e}")));
            }
        }
        if self.regions.is_empty() {
            return Err(RcaError::Parse {
                line,
                message: format!("image {:?} has no regions", self.image_id),
            });
        }
        let mut vectors = self.regions.iter().map(|r| ("region", r.len()));
        let tokens = self.caption_tokens.iter().map(|t| ("caption token", t.embedding.len()));
        let tags = self
            .tags
            .iter()
            .flatten()
            .filter_map(|t| t.embedding.as_ref().map(|e| ("tag", e.len())));
        if let Some((what, len)) = vectors.by_ref().chain(tokens).chain(tags).find(|(_, l)| *l != d) {
            return Err(dim_error(line, format!("{what} has {len} components, image has {d}")));
        }
        Ok(d)
    }
}

pub fn read_instances<R: BufRead>(reader: R) -> Result<Vec<InstanceRecord>> {
    let mut out = Vec::new();
    let mut dim = None;
    for item in numbered_lines(reader) {
        let (n, line) = item?;
        let rec: InstanceRecord = parse_line(&line, n)?;
        dim = Some(rec.check_dims(n, dim)?);
        out.push(rec);
    }
    Ok(out)
}

pub fn write_instances<W: Write>(mut out: W, records: &[InstanceRecord]) -> Result<()> {
    for r in records {
        write_json_line(&mut out, r)?;
    }
    Ok(())
}

/// An instance record turned into a contrastive bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedInstance {
    pub image_id: String,
    pub ranking: RankedTagList,
    pub instance: ContrastiveInstance,
}

impl ResolvedInstance {
    pub fn positive_ids(&self) -> Vec<&str> {
        split_pos_neg(&self.ranking)
            .0
            .iter()
            .map(|c| c.tag_id.as_str())
            .collect()
    }

    pub fn negative_ids(&self) -> Vec<&str> {
        split_pos_neg(&self.ranking)
            .1
            .iter()
            .map(|c| c.tag_id.as_str())
            .collect()
    }
}

/// Rank the record's tags (or the vocabulary, when the record has none) and
/// assemble regions, positives, negatives and caption nouns.
pub fn resolve_instance(record: &InstanceRecord, vocab: Option<&Vocabulary>, m: usize) -> Result<ResolvedInstance> {
    let d = record.image_embedding.len();
    if let Some(v) = vocab {
        if v.dim != d {
            return Err(RcaError::dim(format!(
                "image {:?} has dimension {d}, vocabulary has {}",
                record.image_id, v.dim
            )));
        }
    }
    let image = Embedding::new(record.image_embedding.clone())?;
    let ranking = match &record.tags {
        Some(tags) => {
            let mut candidates = Vec::with_capacity(tags.len());
            for t in tags {
                let embedding = match (&t.embedding, vocab) {
                    (Some(e), _) => Embedding::new(e.clone())?,
                    (None, Some(v)) => v
                        .get(&t.tag_id)
                        .cloned()
                        .ok_or_else(|| RcaError::Config(format!("tag {:?} is not in the vocabulary", t.tag_id)))?,
                    (None, None) => {
                        return Err(RcaError::Config(format!(
                            "tag {:?} has no embedding and no vocabulary was given",
                            t.tag_id
                        )))
                    }
                };
                candidates.push(TagCandidate {
                    tag_id: t.tag_id.clone(),
                    embedding,
                    global_score: t.score,
                });
            }
            RankedTagList::from_candidates(candidates)?
        }
        None => {
            let v = vocab.ok_or_else(|| {
                RcaError::Config(format!(
                    "image {:?} carries no tags and no vocabulary was given",
                    record.image_id
                ))
            })?;
            rank_tags(&image, &v.entries, m)?
        }
    };
    let (pos, neg) = split_pos_neg(&ranking);
    let stack = |side: &[TagCandidate]| {
        let rows: Vec<&[f64]> = side.iter().map(|c| c.embedding.as_slice()).collect();
        EmbeddingMatrix::from_rows_with_dim(d, &rows)
    };
    let nouns: Vec<&[f64]> = record
        .caption_tokens
        .iter()
        .filter(|t| t.is_noun)
        .map(|t| t.embedding.as_slice())
        .collect();
    let instance = ContrastiveInstance::new(
        EmbeddingMatrix::from_rows_with_dim(d, &record.regions)?,
        stack(pos)?,
        stack(neg)?,
        EmbeddingMatrix::from_rows_with_dim(d, &nouns)?,
        pos.iter().map(|c| c.global_score).collect(),
    )?;
    Ok(ResolvedInstance {
        image_id: record.image_id.clone(),
        ranking,
        instance,
    })
}

/// Every knob of a synthetic training run, settable by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub trainer: TrainerConfig,
    pub m: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synthetic: SyntheticConfig::default(),
            trainer: TrainerConfig::default(),
            m: DEFAULT_TOP_M,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in file order.
pub const RUN_CONFIG_KEYS: &[&str] = &[
    "n_concepts",
    "d",
    "n_images",
    "regions_per_image",
    "noise_sigma",
    "flip_rate",
    "seed",
    "steps",
    "learning_rate",
    "batch_size",
    "lambda_cross",
    "lambda_inner",
    "enable_uasr",
    "uasr_source",
    "enable_inner",
    "enable_subsample",
    "subsample_fraction",
    "init_tags",
    "freeze_tags",
    "freeze_regions",
    "freeze_captions",
    "log_every",
    "m",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| RcaError::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    /// Assign one key. `seed` drives both data generation and training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (s, t) = (&mut self.synthetic, &mut self.trainer);
        let v = value.trim();
        match key {
            "n_concepts" => s.n_concepts = parse_value(key, v)?,
            "d" => s.d = parse_value(key, v)?,
            "n_images" => s.n_images = parse_value(key, v)?,
            "regions_per_image" => s.regions_per_image = parse_value(key, v)?,
            "noise_sigma" => s.noise_sigma = parse_value(key, v)?,
            "flip_rate" => s.flip_rate = parse_value(key, v)?,
            "seed" => {
                let seed = parse_value(key, v)?;
                s.seed = seed;
                t.seed = seed;
            }
            "steps" => t.steps = parse_value(key, v)?,
            "learning_rate" => t.learning_rate = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "lambda_cross" => t.lambda_cross = parse_value(key, v)?,
            "lambda_inner" => t.lambda_inner = parse_value(key, v)?,
            "enable_uasr" => t.enable_uasr = parse_value(key, v)?,
            "uasr_source" => t.uasr_source = v.parse()?,
            "enable_inner" => t.enable_inner = parse_value(key, v)?,
            "enable_subsample" => t.enable_subsample = parse_value(key, v)?,
            "subsample_fraction" => t.subsample_fraction = parse_value(key, v)?,
            "init_tags" => t.init_tags = v.parse()?,
            "freeze_tags" => t.freeze_tags = parse_value(key, v)?,
            "freeze_regions" => t.freeze_regions = parse_value(key, v)?,
            "freeze_captions" => t.freeze_captions = parse_value(key, v)?,
            "log_every" => t.log_every = parse_value(key, v)?,
            "m" => self.m = parse_value(key, v)?,
            other => return Err(RcaError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| RcaError::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.trainer.validate()?;
        if self.m == 0 || !self.m.is_multiple_of(2) {
            return Err(RcaError::Config(format!(
                "m must be a positive even integer, got {}",
                self.m
            )));
        }
        Ok(())
    }

    /// The configuration as a `key = value` file that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let (s, t) = (&self.synthetic, &self.trainer);
        let source = match t.uasr_source {
            crate::train::UasrSource::Current => "current",
            crate::train::UasrSource::Observed => "observed",
        };
        let init = match t.init_tags {
            crate::train::TagInit::Random => "random",
            crate::train::TagInit::Observed => "observed",
        };
        let values: Vec<String> = vec![
            s.n_concepts.to_string(),
            s.d.to_string(),
            s.n_images.to_string(),
            s.regions_per_image.to_string(),
            format!("{:?}", s.noise_sigma),
            format!("{:?}", s.flip_rate),
            s.seed.to_string(),
            t.steps.to_string(),
            format!("{:?}", t.learning_rate),
            t.batch_size.to_string(),
            format!("{:?}", t.lambda_cross),
            format!("{:?}", t.lambda_inner),
            t.enable_uasr.to_string(),
            source.to_string(),
            t.enable_inner.to_string(),
            t.enable_subsample.to_string(),
            format!("{:?}", t.subsample_fraction),
            init.to_string(),
            t.freeze_tags.to_string(),
            t.freeze_regions.to_string(),
            t.freeze_captions.to_string(),
            t.log_every.to_string(),
            self.m.to_string(),
        ];
        RUN_CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
