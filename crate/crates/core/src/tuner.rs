//! Soft-prompt training and evaluation.
//!
//! Labels come from mean ratings: below the negative threshold is class 1
//! (inappropriate), above the positive threshold is class 0 and the band in
//! between is dropped. Training runs mini-batch SGD with classical momentum
//! on the prompt rows only; the embedding store is never touched.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedstore::{for_each_json_line, EmbeddingStore, StoreError};
use crate::mathcore::{self, Batch, MathError, PromptEmbeddings};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_NEG_THRESHOLD: f64 = 2.5;
pub const DEFAULT_POS_THRESHOLD: f64 = 3.5;
pub const DEFAULT_SEED: u64 = 16;
pub const CLASS_NAMES: [&str; 2] = ["non-inappropriate", "inappropriate"];

#[derive(Debug, thiserror::Error)]
pub enum TunerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("class {0} is empty")]
    EmptyClass(usize),
    #[error("negative threshold {neg} must be below positive threshold {pos}")]
    InvalidThresholds { neg: f64, pos: f64 },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("id {0:?} not found in the embedding store")]
    MissingId(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("initial prompt file {0} not found")]
    MissingFile(PathBuf),
    #[error("initial prompt file has {actual} rows, expected {expected}")]
    ClassCountMismatch { expected: usize, actual: usize },
    #[error("rating {rating} for {id:?} is outside [1, 5]")]
    InvalidRating { id: String, rating: f64 },
    #[error("label {label} for {id:?} is not 0 or 1")]
    InvalidLabel { id: String, label: u64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("training diverged: non-finite loss at epoch {0}")]
    Diverged(usize),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mean ratings keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatedSet {
    ratings: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
struct RatingLine {
    id: String,
    rating: f64,
}

#[derive(Deserialize)]
struct LabelLine {
    id: String,
    label: u64,
}

impl RatedSet {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self, TunerError> {
        let mut ratings = BTreeMap::new();
        for (id, rating) in entries {
            if !(rating.is_finite() && (1.0..=5.0).contains(&rating)) {
                return Err(TunerError::InvalidRating { id, rating });
            }
            ratings.insert(id, rating);
        }
        Ok(Self { ratings })
    }

    /// Reads `{"id": ..., "rating": ...}` lines; a repeated id keeps its last rating.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TunerError> {
        let mut entries = Vec::new();
        for_each_json_line(path.as_ref(), |line, rec: RatingLine| {
            if rec.id.is_empty() {
                return Err(StoreError::EmptyId { line });
            }
            entries.push((rec.id, rec.rating));
            Ok(())
        })?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.ratings.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Ids with binary labels: 0 is the counterexample class, 1 inappropriate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Reads `{"id": ..., "label": 0|1}` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TunerError> {
        let mut map = BTreeMap::new();
        let mut bad = None;
        for_each_json_line(path.as_ref(), |line, rec: LabelLine| {
            if rec.id.is_empty() {
                return Err(StoreError::EmptyId { line });
            }
            if rec.label > 1 && bad.is_none() {
                bad = Some((rec.id.clone(), rec.label));
            }
            map.insert(rec.id, rec.label as usize);
            Ok(())
        })?;
        if let Some((id, label)) = bad {
            return Err(TunerError::InvalidLabel { id, label });
        }
        let (ids, labels) = map.into_iter().unzip();
        Ok(Self { ids, labels })
    }

    fn require_both_classes(&self) -> Result<(), TunerError> {
        let counts = self.class_counts();
        match counts.iter().position(|&c| c == 0) {
            Some(c) => Err(TunerError::EmptyClass(c)),
            None => Ok(()),
        }
    }

    fn resolve<'s>(&self, store: &'s EmbeddingStore) -> Result<Vec<&'s [f32]>, TunerError> {
        self.ids
            .iter()
            .map(|id| store.get(id).ok_or_else(|| TunerError::MissingId(id.clone())))
            .collect()
    }
}

/// Strict thresholds: `rating < neg` is class 1, `rating > pos` is class 0.
pub fn binarize(rated: &RatedSet, neg_threshold: f64, pos_threshold: f64) -> Result<LabeledSet, TunerError> {
    if neg_threshold.partial_cmp(&pos_threshold) != Some(std::cmp::Ordering::Less) {
        return Err(TunerError::InvalidThresholds {
            neg: neg_threshold,
            pos: pos_threshold,
        });
    }
    let mut set = LabeledSet::default();
    for (id, rating) in rated.iter() {
        let label = if rating < neg_threshold {
            1
        } else if rating > pos_threshold {
            0
        } else {
            continue;
        };
        set.ids.push(id.to_owned());
        set.labels.push(label);
    }
    set.require_both_classes()?;
    Ok(set)
}

/// Mixes a base seed with a stream tag so folds and fractions draw
/// independent, reproducible randomness.
fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_FOLD_TRAIN: u64 = 1;
const STREAM_FEWSHOT: u64 = 2;

/// Stratified k-fold split. Returns `k` sorted lists of indices into
/// `labeled` that partition it.
///
/// Each class is shuffled independently, then the two shuffled lists are
/// dealt round-robin across folds as one continuous sequence, so fold sizes
/// and per-fold class counts each differ by at most one.
pub fn kfold_split(labeled: &LabeledSet, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TunerError> {
    if k < 2 {
        return Err(TunerError::TooFewSamples(format!("k must be at least 2, got {k}")));
    }
    let counts = labeled.class_counts();
    if let Some(c) = counts.iter().position(|&n| n < k) {
        return Err(TunerError::TooFewSamples(format!(
            "class {c} has {} samples, fewer than k={k}",
            counts[c]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in 0..2 {
        let mut members: Vec<usize> = (0..labeled.len()).filter(|&i| labeled.labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// How the initial prompt rows are obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitMode {
    /// An embedding container with one row per class; its ids become the class names.
    ProvidedFile(PathBuf),
    ClassMean,
    RandomSphere,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMode::ProvidedFile(p) => write!(f, "file={}", p.display()),
            InitMode::ClassMean => f.write_str("class-mean"),
            InitMode::RandomSphere => f.write_str("random-sphere"),
        }
    }
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class-mean" => Ok(InitMode::ClassMean),
            "random-sphere" => Ok(InitMode::RandomSphere),
            _ => match s.strip_prefix("file=") {
                Some(p) if !p.is_empty() => Ok(InitMode::ProvidedFile(PathBuf::from(p))),
                _ => Err(format!("expected class-mean, random-sphere or file=PATH, got {s:?}")),
            },
        }
    }
}

impl Serialize for InitMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub logit_scale: f64,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Project prompt rows back to unit norm after every update.
    pub renormalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 500,
            logit_scale: 100.0,
            seed: DEFAULT_SEED,
            init_mode: InitMode::ClassMean,
            renormalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |msg: &str| Err(TunerError::InvalidConfig(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit_scale must be positive");
        }
        Ok(())
    }
}

fn default_class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Builds the starting prompt rows for `labeled` (the training portion).
pub fn init_prompts(
    mode: &InitMode,
    labeled: &LabeledSet,
    store: &EmbeddingStore,
    seed: u64,
) -> Result<PromptEmbeddings, TunerError> {
    let dim = store.dim();
    match mode {
        InitMode::ProvidedFile(path) => {
            if !path.exists() {
                return Err(TunerError::MissingFile(path.clone()));
            }
            let file = EmbeddingStore::load(path)?;
            if file.dim() != dim {
                return Err(TunerError::DimMismatch {
                    expected: dim,
                    actual: file.dim(),
                });
            }
            if file.len() != CLASS_NAMES.len() {
                return Err(TunerError::ClassCountMismatch {
                    expected: CLASS_NAMES.len(),
                    actual: file.len(),
                });
            }
            Ok(PromptEmbeddings::new(
                file.ids().to_vec(),
                file.as_slice().to_vec(),
                dim,
            )?)
        }
        InitMode::ClassMean => {
            labeled.require_both_classes()?;
            let rows = labeled.resolve(store)?;
            let mut sums = vec![0.0f64; 2 * dim];
            let counts = labeled.class_counts();
            for (x, &label) in rows.iter().zip(&labeled.labels) {
                let acc = &mut sums[label * dim..(label + 1) * dim];
                acc.iter_mut().zip(x.iter()).for_each(|(a, &v)| *a += f64::from(v));
            }
            for (c, &n) in counts.iter().enumerate() {
                sums[c * dim..(c + 1) * dim].iter_mut().for_each(|a| *a /= n as f64);
            }
            Ok(PromptEmbeddings::from_f64(default_class_names(), &sums, dim)?)
        }
        InitMode::RandomSphere => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Vec::with_capacity(2 * dim);
            for _ in 0..2 {
                let mut row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
                m.extend(row);
            }
            Ok(PromptEmbeddings::from_f64(default_class_names(), &m, dim)?)
        }
    }
}

/// A trained (or zero-shot) prompt classifier with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModel {
    pub prompts: PromptEmbeddings,
    pub logit_scale: f64,
    pub normalized: bool,
    pub config: TrainConfig,
    pub loss_history: Vec<f64>,
    pub train_size: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    class_names: Vec<String>,
    dim: usize,
    logit_scale: f64,
    normalized: bool,
    init_mode: InitMode,
    config: TrainConfig,
    train_size: usize,
    final_loss: Option<f64>,
    loss_history: Vec<f64>,
    /// One entry per class: little-endian f32 row, base64.
    prompt_rows: Vec<String>,
}

impl PromptModel {
    pub fn dim(&self) -> usize {
        self.prompts.dim()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    pub fn score(&self, x: &[f32]) -> Result<mathcore::ScoreVector, MathError> {
        mathcore::score(x, &self.prompts, self.logit_scale)
    }

    /// Probability of class 1.
    pub fn inappropriate_probability(&self, x: &[f32]) -> Result<f64, MathError> {
        Ok(self.score(x)?.probabilities[1])
    }

    pub fn predict(&self, x: &[f32]) -> Result<usize, MathError> {
        Ok(self.score(x)?.argmax())
    }

    pub fn to_json(&self) -> String {
        let dim = self.dim();
        let prompt_rows = (0..self.prompts.classes())
            .map(|c| {
                let bytes: Vec<u8> = self.prompts.row(c).iter().flat_map(|v| v.to_le_bytes()).collect();
                BASE64.encode(bytes)
            })
            .collect();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            class_names: self.prompts.class_names().to_vec(),
            dim,
            logit_scale: self.logit_scale,
            normalized: self.normalized,
            init_mode: self.config.init_mode.clone(),
            config: self.config.clone(),
            train_size: self.train_size,
            final_loss: self.final_loss(),
            loss_history: self.loss_history.clone(),
            prompt_rows,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TunerError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| TunerError::MalformedModel(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(TunerError::MalformedModel(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        if file.prompt_rows.len() != file.class_names.len() {
            return Err(TunerError::MalformedModel("one prompt row per class required".into()));
        }
        let mut matrix = Vec::with_capacity(file.class_names.len() * file.dim);
        for row in &file.prompt_rows {
            let bytes = BASE64
                .decode(row)
                .map_err(|e| TunerError::MalformedModel(format!("prompt row: {e}")))?;
            if bytes.len() != file.dim * 4 {
                return Err(TunerError::MalformedModel(format!(
                    "prompt row holds {} bytes, expected {}",
                    bytes.len(),
                    file.dim * 4
                )));
            }
            matrix.extend(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
        }
        let prompts = PromptEmbeddings::new(file.class_names, matrix, file.dim)?;
        if !(file.logit_scale > 0.0 && file.logit_scale.is_finite()) {
            return Err(TunerError::MalformedModel("logit_scale must be positive".into()));
        }
        Ok(Self {
            prompts,
            logit_scale: file.logit_scale,
            normalized: file.normalized,
            config: file.config,
            loss_history: file.loss_history,
            train_size: file.train_size,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TunerError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| TunerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TunerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TunerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn full_loss(rows: &[&[f32]], labels: &[usize], params: &[f64], dim: usize, scale: f64) -> Result<f64, MathError> {
    mathcore::batch_loss_rows(Batch::new(rows, labels), params, dim, scale)
}

/// Runs SGD with momentum from `init` and returns the trained model.
pub fn train(
    labeled: &LabeledSet,
    store: &EmbeddingStore,
    config: &TrainConfig,
    init: PromptEmbeddings,
) -> Result<PromptModel, TunerError> {
    config.validate()?;
    labeled.require_both_classes()?;
    let dim = store.dim();
    if init.dim() != dim {
        return Err(TunerError::DimMismatch {
            expected: dim,
            actual: init.dim(),
        });
    }
    let rows = labeled.resolve(store)?;
    let class_names = init.class_names().to_vec();
    let mut params = init.to_f64();
    let mut velocity = vec![0.0f64; params.len()];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut batch_rows: Vec<&[f32]> = Vec::with_capacity(config.batch_size);
    let mut batch_labels: Vec<usize> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch_rows.clear();
            batch_labels.clear();
            batch_rows.extend(chunk.iter().map(|&i| rows[i]));
            batch_labels.extend(chunk.iter().map(|&i| labeled.labels[i]));
            let grad =
                mathcore::loss_gradient_rows(Batch::new(&batch_rows, &batch_labels), &params, dim, config.logit_scale)?;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
            if config.renormalize {
                for row in params.chunks_exact_mut(dim) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
            }
        }
        let loss = full_loss(&rows, &labeled.labels, &params, dim, config.logit_scale)?;
        if !loss.is_finite() {
            return Err(TunerError::Diverged(epoch));
        }
        loss_history.push(loss);
    }

    let prompts = if config.epochs == 0 {
        init
    } else {
        PromptEmbeddings::from_f64(class_names, &params, dim)?
    };
    Ok(PromptModel {
        prompts,
        logit_scale: config.logit_scale,
        normalized: store.normalized(),
        config: config.clone(),
        loss_history,
        train_size: labeled.len(),
    })
}

/// Binary confusion counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y == 1, p == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Metrics {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

/// Per-fold results with mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub folds: Vec<FoldResult>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl EvalMetrics {
    pub fn aggregate(folds: Vec<FoldResult>) -> Self {
        let n = folds.len().max(1) as f64;
        let mut mean = [0.0; 4];
        for f in &folds {
            mean.iter_mut().zip(f.metrics.values()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 4];
        for f in &folds {
            var.iter_mut()
                .zip(f.metrics.values())
                .zip(mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let std = var.map(|s| (s / n).sqrt());
        EvalMetrics {
            folds,
            mean: Metrics::from_values(mean),
            std: Metrics::from_values(std),
        }
    }
}

pub fn evaluate_confusion(
    model: &PromptModel,
    labeled: &LabeledSet,
    store: &EmbeddingStore,
) -> Result<Confusion, TunerError> {
    if labeled.is_empty() {
        return Err(TunerError::TooFewSamples("empty evaluation set".into()));
    }
    if model.dim() != store.dim() {
        return Err(TunerError::DimMismatch {
            expected: store.dim(),
            actual: model.dim(),
        });
    }
    let rows = labeled.resolve(store)?;
    let predictions = rows.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>, _>>()?;
    Ok(Confusion::from_predictions(&labeled.labels, &predictions))
}

pub fn evaluate(model: &PromptModel, labeled: &LabeledSet, store: &EmbeddingStore) -> Result<Metrics, TunerError> {
    Ok(evaluate_confusion(model, labeled, store)?.metrics())
}

fn train_and_test(
    labeled: &LabeledSet,
    store: &EmbeddingStore,
    config: &TrainConfig,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<FoldResult, TunerError> {
    let train_set = labeled.subset(train_idx);
    let test_set = labeled.subset(test_idx);
    let mut fold_config = config.clone();
    fold_config.seed = derive_seed(config.seed, STREAM_FOLD_TRAIN, fold as u64);
    let init = init_prompts(&config.init_mode, &train_set, store, fold_config.seed)?;
    let model = train(&train_set, store, &fold_config, init)?;
    let confusion = evaluate_confusion(&model, &test_set, store)?;
    Ok(FoldResult {
        fold,
        train_size: train_set.len(),
        test_size: test_set.len(),
        confusion,
        metrics: confusion.metrics(),
    })
}

fn complement(folds: &[Vec<usize>], held_out: usize) -> Vec<usize> {
    let mut train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    train.sort_unstable();
    train
}

/// Trains on k−1 folds and tests on the held-out fold, for each fold.
/// Folds run in parallel; each has its own derived seed so results do not
/// depend on scheduling.
pub fn cross_validate(
    labeled: &LabeledSet,
    store: &EmbeddingStore,
    config: &TrainConfig,
    k: usize,
) -> Result<EvalMetrics, TunerError> {
    config.validate()?;
    let folds = kfold_split(labeled, k, config.seed)?;
    let results = (0..k)
        .into_par_iter()
        .map(|f| train_and_test(labeled, store, config, f, &complement(&folds, f), &folds[f]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalMetrics::aggregate(results))
}

/// `⌈fraction · n⌉`, with a small tolerance so products like `0.3 · 10`
/// that land just above an integer do not round up.
pub fn fewshot_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    let m = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (m as usize).clamp(1, n.max(1))
}

/// Stratified subsample of `train_idx` keeping `⌈fraction · count⌉` samples per class.
fn stratified_subsample(labeled: &LabeledSet, train_idx: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..2 {
        let mut members: Vec<usize> = train_idx
            .iter()
            .copied()
            .filter(|&i| labeled.labels[i] == class)
            .collect();
        let m = fewshot_count(fraction, members.len());
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..m.min(members.len())]);
    }
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub fraction: f64,
    pub metrics: EvalMetrics,
}

/// Cross-validated metrics when training on a stratified fraction of each
/// training split. Test folds are never subsampled.
pub fn fewshot_curve(
    labeled: &LabeledSet,
    store: &EmbeddingStore,
    config: &TrainConfig,
    k: usize,
    fractions: &[f64],
) -> Result<Vec<FewShotPoint>, TunerError> {
    config.validate()?;
    if let Some(&f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(TunerError::InvalidFraction(f));
    }
    let folds = kfold_split(labeled, k, config.seed)?;
    fractions
        .par_iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let results = (0..k)
                .map(|f| {
                    let full = complement(&folds, f);
                    let train_idx = stratified_subsample(
                        labeled,
                        &full,
                        fraction,
                        derive_seed(config.seed, STREAM_FEWSHOT, (fi * k + f) as u64),
                    );
                    train_and_test(labeled, store, config, f, &train_idx, &folds[f])
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FewShotPoint {
                fraction,
                metrics: EvalMetrics::aggregate(results),
            })
        })
        .collect()
}
