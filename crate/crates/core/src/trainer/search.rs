use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{ReportRow, Timing};
use super::{
    check_no_leakage, evaluate, inference_latency_ms, prepare_training_data, split_dataset, subset, train, Examples,
    Result, SplitAssignment, SplitFractions, TrainConfig, TrainError, TrainOutcome, Variant,
};
use crate::augment::AugmentConfig;
use crate::dataset::{Dataset, SplitTag};
use crate::fusion::{InputKind, TempRange};
use crate::models::{Architecture, Family, Model, ModelError, ModelSpec};
use crate::seed;
use crate::tensor::OptimizerConfig;

/// Candidate values per hyperparameter; combos are their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    /// Optimizer kinds and constants; their learning rate is replaced by each grid value.
    pub optimizers: Vec<OptimizerConfig>,
    /// Width and depth choices; empty means the family default.
    pub architectures: Vec<Architecture>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-2, 1e-3],
            batch_sizes: vec![16, 32],
            optimizers: vec![OptimizerConfig::sgd(0.0, 0.9), OptimizerConfig::adam(0.0)],
            architectures: Vec::new(),
        }
    }
}

impl HyperGrid {
    /// Single-combo grid.
    pub fn single(architecture: Architecture, optimizer: OptimizerConfig, batch_size: usize) -> Self {
        Self {
            learning_rates: vec![optimizer.lr()],
            batch_sizes: vec![batch_size],
            optimizers: vec![optimizer],
            architectures: vec![architecture],
        }
    }

    /// Combos in deterministic order: architecture, optimizer, learning rate,
    /// batch size, the last varying fastest.
    pub fn combos(&self, family: Family, base: &TrainConfig) -> Result<Vec<Combo>> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.optimizers.is_empty() {
            return Err(TrainError::Config("every grid axis needs at least one value".into()));
        }
        let architectures =
            if self.architectures.is_empty() { vec![Architecture::default_for(family)] } else { self.architectures.clone() };
        let mut combos = Vec::new();
        for architecture in &architectures {
            for optimizer in &self.optimizers {
                for &lr in &self.learning_rates {
                    for &batch_size in &self.batch_sizes {
                        combos.push(Combo {
                            index: combos.len(),
                            architecture: architecture.clone(),
                            config: TrainConfig { optimizer: optimizer.with_lr(lr), batch_size, ..*base },
                        });
                    }
                }
            }
        }
        Ok(combos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    pub index: usize,
    pub architecture: Architecture,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ComboOutcome {
    Scored { roc_auc: f64, pr_auc: f64 },
    /// Counted as a score of zero.
    Diverged { step: usize, epoch: usize },
    Skipped { reason: String },
}

impl ComboOutcome {
    /// Validation (ROC-AUC, PR-AUC) used for ranking; skipped combos do not compete.
    pub fn ranking(&self) -> Option<(f64, f64)> {
        match *self {
            ComboOutcome::Scored { roc_auc, pr_auc } => Some((roc_auc, pr_auc)),
            ComboOutcome::Diverged { .. } => Some((0.0, 0.0)),
            ComboOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub combo: Combo,
    pub outcome: ComboOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Combo,
    pub results: Vec<ComboResult>,
}

/// One row of the experiment matrix and how to produce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub family: Family,
    pub input: InputKind,
    pub variant: Variant,
    pub epochs: usize,
    pub seed: u64,
    pub grid: HyperGrid,
    pub fractions: SplitFractions,
    /// Training portion size multiplier for the upsampled variant.
    pub upsample_factor: f64,
    pub augment: AugmentConfig,
    pub temp_range: TempRange,
    pub eval_batch: usize,
    pub latency_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: Family::ShallowCnn,
            input: InputKind::Optical,
            variant: Variant::Raw,
            epochs: 10,
            seed: 0,
            grid: HyperGrid::default(),
            fractions: SplitFractions::default(),
            upsample_factor: 2.0,
            augment: AugmentConfig::default(),
            temp_range: TempRange::default(),
            eval_batch: 32,
            latency_trials: 5,
        }
    }
}

impl ExperimentConfig {
    /// Rejects settings that cannot run at all, before any compute.
    pub fn validate(&self) -> Result<()> {
        if !self.family.supports_channels(self.input.channels()) {
            return Err(ModelError::FusionUnsupported { channels: self.input.channels() }.into());
        }
        self.fractions.validate()?;
        self.base_config().validate(self.family)?;
        if self.variant.upsampled() && !(self.upsample_factor.is_finite() && self.upsample_factor >= 1.0) {
            return Err(TrainError::Config(format!("upsampling factor {} must be at least 1", self.upsample_factor)));
        }
        if self.variant.augmented() {
            self.augment.validate()?;
        }
        Ok(())
    }

    /// Settings shared by every combo; the grid fills in the rest.
    pub fn base_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: 1,
            optimizer: OptimizerConfig::adam(1e-3),
            variant: self.variant,
            input: self.input,
            seed: seed::derive_named(self.seed, "shuffle"),
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive_named(self.seed, "init")
    }

    fn model_spec(&self, architecture: &Architecture, dataset: &Dataset) -> ModelSpec {
        ModelSpec::new(architecture.clone(), self.input.channels(), dataset.image_size, self.init_seed())
    }
}

/// Trains one model per combo on `train` and scores it on `val`. The best
/// combo has the highest validation ROC-AUC, then PR-AUC, then comes first.
pub fn grid_search(config: &ExperimentConfig, train_data: &Dataset, val: &Dataset) -> Result<SearchResult> {
    let combos = config.grid.combos(config.family, &config.base_config())?;
    let train_examples = Examples::new(train_data, config.input, config.temp_range);
    let val_examples = Examples::new(val, config.input, config.temp_range);
    let mut results = Vec::with_capacity(combos.len());
    for combo in combos {
        let outcome = match run_combo(config, &combo, &train_examples, &val_examples) {
            Ok(outcome) => outcome,
            Err(TrainError::Model(e @ (ModelError::FusionUnsupported { .. } | ModelError::Config(_)))) => {
                ComboOutcome::Skipped { reason: e.to_string() }
            }
            Err(TrainError::Config(reason)) => ComboOutcome::Skipped { reason },
            Err(e) => return Err(e),
        };
        results.push(ComboResult { combo, outcome });
    }
    let mut best: Option<(&ComboResult, (f64, f64))> = None;
    for result in &results {
        if let Some(rank) = result.outcome.ranking() {
            if best.is_none_or(|(_, b)| rank.0 > b.0 || (rank.0 == b.0 && rank.1 > b.1)) {
                best = Some((result, rank));
            }
        }
    }
    match best {
        Some((winner, _)) => Ok(SearchResult { best: winner.combo.clone(), results }),
        None => Err(TrainError::NoViableCombo(
            results
                .iter()
                .filter_map(|r| match &r.outcome {
                    ComboOutcome::Skipped { reason } => Some(format!("combo {}: {reason}", r.combo.index)),
                    _ => None,
                })
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

fn run_combo(config: &ExperimentConfig, combo: &Combo, train_data: &Examples, val: &Examples) -> Result<ComboOutcome> {
    if combo.architecture.family() != config.family {
        return Err(TrainError::Config(format!(
            "architecture {} does not belong to family {}",
            combo.architecture.family(),
            config.family
        )));
    }
    let mut model = Model::<f32>::new(config.model_spec(&combo.architecture, train_data.dataset))?;
    match train(&mut model, &combo.config, train_data) {
        Ok(_) => {}
        Err(TrainError::Diverged { step, epoch }) => return Ok(ComboOutcome::Diverged { step, epoch }),
        Err(e) => return Err(e),
    }
    let eval = evaluate(&model, val, config.eval_batch)?;
    Ok(ComboOutcome::Scored { roc_auc: eval.roc_auc, pr_auc: eval.pr_auc })
}

#[derive(Clone, Debug)]
pub struct FinalResult {
    pub row: ReportRow,
    pub timing: Timing,
    pub model: Model<f32>,
    pub training: TrainOutcome,
    pub test_ids: Vec<String>,
    pub test_scores: Vec<f64>,
}

/// Retrains the chosen combo from a fresh init on train + val and scores the test split.
pub fn finalize_and_test(
    config: &ExperimentConfig,
    search: &SearchResult,
    train_val: &Dataset,
    test: &Dataset,
) -> Result<FinalResult> {
    let best = &search.best;
    let prepared = prepare_training_data(
        train_val,
        config.variant,
        config.upsample_factor,
        &config.augment,
        seed::derive_named(config.seed, "upsample-final"),
    )?;
    check_no_leakage(&prepared, test)?;
    let started = Instant::now();
    let mut model = Model::<f32>::new(config.model_spec(&best.architecture, train_val))?;
    let training = train(&mut model, &best.config, &Examples::new(&prepared, config.input, config.temp_range))?;
    let train_seconds = started.elapsed().as_secs_f64();
    let test_examples = Examples::new(test, config.input, config.temp_range);
    let eval = evaluate(&model, &test_examples, config.eval_batch)?;
    let inference_ms = inference_latency_ms(&model, &test_examples, config.latency_trials)?;
    let row = ReportRow {
        family: config.family,
        input: config.input,
        upsampled: config.variant.upsampled(),
        augmented: config.variant.augmented(),
        roc_auc: eval.roc_auc,
        pr_auc: eval.pr_auc,
        test_size: test.len(),
        training_size: prepared.len(),
        selected: best.clone(),
        validation: search.results.clone(),
        final_epoch_losses: training.epoch_losses.clone(),
        roc_curve: eval.roc_curve,
        pr_curve: eval.pr_curve,
    };
    let timing = Timing {
        family: config.family,
        input: config.input,
        variant: config.variant,
        inference_ms,
        final_train_seconds: train_seconds,
    };
    Ok(FinalResult {
        row,
        timing,
        model,
        training,
        test_ids: test.items.iter().map(|it| it.id.clone()).collect(),
        test_scores: eval.scores,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub split: SplitAssignment,
    pub search: SearchResult,
    pub result: FinalResult,
}

/// Split, grid search on train/val, then retrain on train + val and test.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let split = split_dataset(dataset, config.fractions, config.seed)?;
    let train_portion = subset(dataset, &split, &[SplitTag::Train]);
    let val = subset(dataset, &split, &[SplitTag::Val]);
    let test = subset(dataset, &split, &[SplitTag::Test]);
    let search_data = prepare_training_data(
        &train_portion,
        config.variant,
        config.upsample_factor,
        &config.augment,
        seed::derive_named(config.seed, "upsample-search"),
    )?;
    check_no_leakage(&search_data, &test)?;
    let search = grid_search(config, &search_data, &val)?;
    drop(search_data);
    let train_val = subset(dataset, &split, &[SplitTag::Train, SplitTag::Val]);
    let result = finalize_and_test(config, &search, &train_val, &test)?;
    Ok(ExperimentOutcome { split, search, result })
}
