//! Splitting, training loops, grid search and the final train-then-test protocol.

mod report;
mod search;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, AugmentError};
use crate::dataset::{Dataset, DatasetError, DatasetItem, SplitTag};
use crate::fusion::{self, InputKind, TempRange};
use crate::metrics::{self, MetricError};
use crate::models::{Family, Model, ModelError};
use crate::seed;
use crate::tensor::{Optimizer, OptimizerConfig, Tensor, TensorError};

pub use report::{EvalReport, ReportRow, Timing, UnsupportedCell, REPORT_SCHEMA_VERSION};
pub use search::{
    finalize_and_test, grid_search, run_experiment, Combo, ComboOutcome, ComboResult, ExperimentConfig,
    ExperimentOutcome, FinalResult, HyperGrid, SearchResult,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (epoch {epoch})")]
    Diverged { step: usize, epoch: usize },
    #[error("no usable combination in the grid: {0}")]
    NoViableCombo(String),
    #[error("test sample `{0}` also appears in training data")]
    Leakage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Training-data treatment, matching the two variants of the results table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Raw,
    UpsampledAugmented,
}

impl Variant {
    pub fn upsampled(self) -> bool {
        self == Variant::UpsampledAugmented
    }

    pub fn augmented(self) -> bool {
        self == Variant::UpsampledAugmented
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Variant::Raw),
            "upsampled_augmented" | "augmented" | "upsampled+augmented" => Ok(Variant::UpsampledAugmented),
            other => Err(format!("unknown variant `{other}` (raw, upsampled_augmented)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer and its constants, learning rate included.
    pub optimizer: OptimizerConfig,
    pub variant: Variant,
    pub input: InputKind,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, family: Family) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        let lr = self.optimizer.lr();
        if !lr.is_finite() || lr < 0.0 {
            return Err(TrainError::Config(format!("learning rate {lr} must be finite and non-negative")));
        }
        if !family.supports_channels(self.input.channels()) {
            return Err(ModelError::FusionUnsupported { channels: self.input.channels() }.into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config(format!(
                "split fractions {} + {} + {} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Train and val sizes are floored; the remainder goes to test.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub tags: Vec<SplitTag>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, t)| **t == tag).map(|(i, _)| i).collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        [SplitTag::Train, SplitTag::Val, SplitTag::Test].map(|t| self.tags.iter().filter(|&&x| x == t).count())
    }

    /// Writes the tags into the dataset items.
    pub fn apply(&self, dataset: &mut Dataset) -> Result<()> {
        if dataset.len() != self.tags.len() {
            return Err(TrainError::Config(format!(
                "assignment covers {} samples, dataset has {}",
                self.tags.len(),
                dataset.len()
            )));
        }
        for (item, tag) in dataset.items.iter_mut().zip(&self.tags) {
            item.split = *tag;
        }
        Ok(())
    }
}

/// Seeded uniform permutation cut into train, val and test.
pub fn split_dataset(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    split_indices(dataset.len(), fractions, seed)
}

pub fn split_indices(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let [train, val, _] = fractions.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed::derive_named(seed, "split")));
    let mut tags = vec![SplitTag::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < train {
            tags[i] = SplitTag::Train;
        } else if rank < train + val {
            tags[i] = SplitTag::Val;
        }
    }
    Ok(SplitAssignment { tags, fractions, seed })
}

/// Items of `dataset` with the given tags, in dataset order.
pub fn subset(dataset: &Dataset, assignment: &SplitAssignment, tags: &[SplitTag]) -> Dataset {
    let items = dataset
        .items
        .iter()
        .zip(&assignment.tags)
        .filter(|(_, t)| tags.contains(t))
        .map(|(item, t)| DatasetItem { split: *t, ..item.clone() })
        .collect();
    Dataset { items, ..dataset.clone_meta() }
}

/// Applies the variant's treatment to a training portion: upsampling with
/// replacement to `factor` times its size, then augmentation of every copy.
pub fn prepare_training_data(
    portion: &Dataset,
    variant: Variant,
    factor: f64,
    augment_config: &AugmentConfig,
    seed: u64,
) -> Result<Dataset> {
    if !variant.upsampled() {
        return Ok(portion.clone());
    }
    if !factor.is_finite() || factor < 1.0 {
        return Err(TrainError::Config(format!("upsampling factor {factor} must be at least 1")));
    }
    augment_config.validate()?;
    let target = (portion.len() as f64 * factor).round() as usize;
    let mut data = augment::upsample_with_replacement(portion, target, seed)?;
    if variant.augmented() {
        for item in &mut data.items {
            let mut rng = augment_config.stream_for(&item.id);
            item.sample = augment::augment_sample(&item.sample, augment_config, &mut rng)?;
        }
    }
    Ok(data)
}

/// Model-ready view of a dataset: inputs are built batch by batch.
#[derive(Clone, Copy, Debug)]
pub struct Examples<'a> {
    pub dataset: &'a Dataset,
    pub input: InputKind,
    pub range: TempRange,
}

impl<'a> Examples<'a> {
    pub fn new(dataset: &'a Dataset, input: InputKind, range: TempRange) -> Self {
        Self { dataset, input, range }
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.dataset.items.iter().map(|it| it.sample.label.index()).collect()
    }

    /// Stacked `[B, C, H, W]` inputs and class indices for the given positions.
    pub fn batch(&self, positions: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut inputs = Vec::with_capacity(positions.len());
        let mut labels = Vec::with_capacity(positions.len());
        for &i in positions {
            let item = &self.dataset.items[i];
            inputs.push(fusion::model_input(&item.sample, self.input, self.range)?);
            labels.push(item.sample.label.index());
        }
        Ok((Tensor::stack(&inputs)?, labels))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mini-batch training; the sample order of every epoch comes from a seeded shuffle.
pub fn train(model: &mut Model<f32>, config: &TrainConfig, data: &Examples) -> Result<TrainOutcome> {
    config.validate(model.family())?;
    if data.input != config.input {
        return Err(TrainError::Config(format!("data is {} but config expects {}", data.input, config.input)));
    }
    if data.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let mut optimizer = Optimizer::new(config.optimizer, model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::stream(seed::derive(config.seed, epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let (loss, grads) = match model.loss_and_grads(&x, &y) {
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => return Err(TrainError::Diverged { step, epoch }),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { step, epoch });
            }
            optimizer.step(model.params_mut(), &grads)?;
            total += loss as f64 * chunk.len() as f64;
            step += 1;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainOutcome { epoch_losses, steps: step })
}

/// Detection scores (logit margin of the runaway class) for every example.
pub fn predict_scores(model: &Model<f32>, data: &Examples, batch_size: usize) -> Result<Vec<f64>> {
    let positions: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        scores.extend(model.forward(&x)?.scores());
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub roc_curve: Vec<metrics::RocPoint>,
    pub pr_curve: Vec<metrics::PrPoint>,
    pub scores: Vec<f64>,
}

pub fn evaluate(model: &Model<f32>, data: &Examples, batch_size: usize) -> Result<Evaluation> {
    let scores = predict_scores(model, data, batch_size)?;
    let labels: Vec<bool> = data.labels().iter().map(|&l| l == 1).collect();
    Ok(Evaluation {
        roc_auc: metrics::roc_auc(&scores, &labels)?,
        pr_auc: metrics::pr_auc(&scores, &labels)?,
        roc_curve: metrics::roc_curve(&scores, &labels)?,
        pr_curve: metrics::pr_curve(&scores, &labels)?,
        scores,
    })
}

/// Fails if any test id shares its source sample with a training item.
pub fn check_no_leakage(training: &Dataset, test: &Dataset) -> Result<()> {
    let seen: std::collections::HashSet<&str> = training.items.iter().map(|it| augment::source_id(&it.id)).collect();
    match test.items.iter().find(|it| seen.contains(augment::source_id(&it.id))) {
        Some(it) => Err(TrainError::Leakage(it.id.clone())),
        None => Ok(()),
    }
}

/// Median wall time in milliseconds of single-sample inference over `trials`
/// runs on the first example.
pub fn inference_latency_ms(model: &Model<f32>, data: &Examples, trials: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::Config("no sample to time".into()));
    }
    let (x, _) = data.batch(&[0])?;
    model.forward(&x)?;
    let mut times: Vec<f64> = (0..trials.max(1))
        .map(|_| {
            let start = Instant::now();
            model.forward(&x).map(|_| start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<std::result::Result<_, _>>()?;
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}
