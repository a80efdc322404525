use std::collections::HashSet;

use proptest::prelude::*;
use runaway_core::augment::{source_id, AugmentConfig};
use runaway_core::dataset::{generate_dataset, Dataset, ImageSize, SplitTag};
use runaway_core::fusion::{InputKind, TempRange};
use runaway_core::models::{Architecture, CnnParams, Family, Model, ModelError, ModelSpec, ResNetParams, VitParams};
use runaway_core::tensor::OptimizerConfig;
use runaway_core::trainer::*;

fn tiny_cnn() -> Architecture {
    Architecture::ShallowCnn(CnnParams { widths: [4, 8], kernel: 3, fc_hidden: 16 })
}

fn toy_dataset() -> Dataset {
    generate_dataset(5, 20, 20, ImageSize::square(32)).unwrap()
}

fn toy_config(input: InputKind) -> ExperimentConfig {
    ExperimentConfig {
        family: Family::ShallowCnn,
        input,
        epochs: 6,
        seed: 3,
        grid: HyperGrid::single(tiny_cnn(), OptimizerConfig::adam(3e-3), 8),
        latency_trials: 1,
        ..Default::default()
    }
}

fn train_config(optimizer: OptimizerConfig, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, optimizer, variant: Variant::Raw, input: InputKind::Infrared, seed: 1 }
}

#[test]
fn split_of_832_is_582_124_126() {
    let a = split_indices(832, SplitFractions::default(), 11).unwrap();
    assert_eq!(a.sizes(), [582, 124, 126]);
    assert_eq!(a.tags.len(), 832);
    let mut all: Vec<usize> =
        [SplitTag::Train, SplitTag::Val, SplitTag::Test].iter().flat_map(|&t| a.indices(t)).collect();
    all.sort_unstable();
    assert_eq!(all, (0..832).collect::<Vec<_>>());
    assert_eq!(split_indices(832, SplitFractions::default(), 11).unwrap(), a);
    assert_ne!(split_indices(832, SplitFractions::default(), 12).unwrap().tags, a.tags);
}

#[test]
fn split_of_20_is_14_3_3() {
    let a = split_indices(20, SplitFractions::default(), 0).unwrap();
    assert_eq!(a.sizes(), [14, 3, 3]);
}

#[test]
fn applying_a_split_tags_every_item() {
    let mut ds = toy_dataset();
    let a = split_dataset(&ds, SplitFractions::default(), 4).unwrap();
    a.apply(&mut ds).unwrap();
    assert!(ds.items.iter().all(|it| it.split != SplitTag::Unassigned));
    let test = subset(&ds, &a, &[SplitTag::Test]);
    assert_eq!(test.len(), a.sizes()[2]);
    assert!(test.items.iter().all(|it| it.split == SplitTag::Test));
}

proptest! {
    #[test]
    fn splits_partition_any_dataset(n in 0usize..400, seed in any::<u64>()) {
        let a = split_indices(n, SplitFractions::default(), seed).unwrap();
        let [train, val, test] = a.sizes();
        prop_assert_eq!(train + val + test, n);
        prop_assert_eq!(train, (n as f64 * 0.7 + 1e-9).floor() as usize);
        prop_assert_eq!(val, (n as f64 * 0.15 + 1e-9).floor() as usize);
        prop_assert!(test >= val);
    }
}

#[test]
fn upsampled_training_never_contains_test_sources() {
    let ds = toy_dataset();
    let a = split_dataset(&ds, SplitFractions::default(), 8).unwrap();
    let train_portion = subset(&ds, &a, &[SplitTag::Train]);
    let test = subset(&ds, &a, &[SplitTag::Test]);
    let prepared =
        prepare_training_data(&train_portion, Variant::UpsampledAugmented, 3.0, &AugmentConfig::default(), 2).unwrap();
    assert_eq!(prepared.len(), 3 * train_portion.len());
    let test_ids: HashSet<&str> = test.items.iter().map(|it| it.id.as_str()).collect();
    assert!(prepared.items.iter().all(|it| !test_ids.contains(source_id(&it.id))));
    check_no_leakage(&prepared, &test).unwrap();

    let mut leaky = prepared.clone();
    leaky.items[0].id = format!("{}#99", test.items[0].id);
    assert!(matches!(check_no_leakage(&leaky, &test), Err(TrainError::Leakage(_))));
}

#[test]
fn raw_variant_leaves_training_data_alone() {
    let ds = toy_dataset();
    let prepared = prepare_training_data(&ds, Variant::Raw, 3.0, &AugmentConfig::default(), 2).unwrap();
    assert_eq!(prepared, ds);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let ds = toy_dataset();
    let data = Examples::new(&ds, InputKind::Infrared, TempRange::default());
    for optimizer in [OptimizerConfig::sgd(0.0, 0.9), OptimizerConfig::adam(0.0)] {
        let mut model = Model::<f32>::new(ModelSpec::new(tiny_cnn(), 3, ds.image_size, 1)).unwrap();
        let initial = model.clone();
        let outcome = train(&mut model, &train_config(optimizer, 2), &data).unwrap();
        assert_eq!(outcome.steps, 6);
        assert_eq!(model, initial);
    }
}

#[test]
fn shallow_cnn_fits_a_separable_toy_set() {
    let ds = generate_dataset(6, 8, 8, ImageSize::square(32)).unwrap();
    let data = Examples::new(&ds, InputKind::Infrared, TempRange::default());
    let mut model = Model::<f32>::new(ModelSpec::new(tiny_cnn(), 3, ds.image_size, 2)).unwrap();
    let outcome = train(&mut model, &train_config(OptimizerConfig::adam(3e-3), 200), &data).unwrap();
    assert_eq!(outcome.steps, 200);
    let last = *outcome.epoch_losses.last().unwrap();
    assert!(last < 0.05, "final epoch loss {last}");
}

#[test]
fn epoch_losses_repeat_under_one_seed() {
    let ds = toy_dataset();
    let data = Examples::new(&ds, InputKind::Fusion, TempRange::default());
    let run = |seed| {
        let mut model = Model::<f32>::new(ModelSpec::new(tiny_cnn(), 6, ds.image_size, 2)).unwrap();
        let config = TrainConfig { input: InputKind::Fusion, seed, batch_size: 8, ..train_config(OptimizerConfig::adam(1e-3), 3) };
        (train(&mut model, &config, &data).unwrap(), model)
    };
    let (a, model_a) = run(1);
    let (b, model_b) = run(1);
    assert_eq!(a, b);
    assert_eq!(model_a, model_b);
    assert_ne!(run(2).0, a);
}

#[test]
fn nan_loss_reports_the_step() {
    let ds = toy_dataset();
    let data = Examples::new(&ds, InputKind::Infrared, TempRange::default());
    let mut model = Model::<f32>::new(ModelSpec::new(tiny_cnn(), 3, ds.image_size, 1)).unwrap();
    let err = train(&mut model, &train_config(OptimizerConfig::sgd(1e30, 0.9), 5), &data).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { step, .. } if step >= 1), "{err}");
}

#[test]
fn training_rejects_mismatched_or_invalid_configs() {
    let ds = toy_dataset();
    let data = Examples::new(&ds, InputKind::Infrared, TempRange::default());
    let mut model = Model::<f32>::new(ModelSpec::new(tiny_cnn(), 3, ds.image_size, 1)).unwrap();
    let zero_epochs = TrainConfig { epochs: 0, ..train_config(OptimizerConfig::adam(1e-3), 1) };
    assert!(matches!(train(&mut model, &zero_epochs, &data), Err(TrainError::Config(_))));
    let optical = TrainConfig { input: InputKind::Optical, ..train_config(OptimizerConfig::adam(1e-3), 1) };
    assert!(matches!(train(&mut model, &optical, &data), Err(TrainError::Config(_))));
    let vit_fusion = TrainConfig { input: InputKind::Fusion, ..train_config(OptimizerConfig::adam(1e-3), 1) };
    assert!(matches!(
        vit_fusion.validate(Family::MiniVit),
        Err(TrainError::Model(ModelError::FusionUnsupported { channels: 6 }))
    ));
}

fn search_splits(ds: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let a = split_dataset(ds, SplitFractions::default(), seed).unwrap();
    (subset(ds, &a, &[SplitTag::Train]), subset(ds, &a, &[SplitTag::Val]))
}

#[test]
fn grid_enumerates_the_cartesian_product() {
    let grid = HyperGrid::default();
    let combos = grid.combos(Family::MiniResNet, &toy_config(InputKind::Optical).base_config()).unwrap();
    assert_eq!(combos.len(), 8);
    assert!(combos.iter().enumerate().all(|(i, c)| c.index == i));
    assert_eq!(combos[0].config.optimizer, OptimizerConfig::sgd(1e-2, 0.9));
    assert_eq!(combos[1].config.batch_size, 32);
    assert_eq!(combos[7].config.optimizer, OptimizerConfig::adam(1e-3));
    assert!(combos.iter().all(|c| c.architecture == Architecture::MiniResNet(ResNetParams::default())));
    let empty = HyperGrid { learning_rates: vec![], ..HyperGrid::default() };
    assert!(empty.combos(Family::ShallowCnn, &toy_config(InputKind::Optical).base_config()).is_err());
}

#[test]
fn single_combo_grid_returns_that_combo() {
    let ds = toy_dataset();
    let (train_portion, val) = search_splits(&ds, 1);
    let config = toy_config(InputKind::Infrared);
    let search = grid_search(&config, &train_portion, &val).unwrap();
    assert_eq!(search.results.len(), 1);
    assert_eq!(search.best, search.results[0].combo);
}

#[test]
fn diverged_combo_scores_zero_and_loses() {
    let ds = toy_dataset();
    let (train_portion, val) = search_splits(&ds, 1);
    let config = ExperimentConfig {
        grid: HyperGrid {
            learning_rates: vec![1e30, 1e-3],
            batch_sizes: vec![8],
            optimizers: vec![OptimizerConfig::sgd(0.0, 0.9)],
            architectures: vec![tiny_cnn()],
        },
        ..toy_config(InputKind::Infrared)
    };
    let search = grid_search(&config, &train_portion, &val).unwrap();
    assert!(matches!(search.results[0].outcome, ComboOutcome::Diverged { .. }));
    assert_eq!(search.results[0].outcome.ranking(), Some((0.0, 0.0)));
    assert_eq!(search.best.index, 1);
}

#[test]
fn two_by_two_grid_reports_four_reproducible_scores() {
    let ds = toy_dataset();
    let (train_portion, val) = search_splits(&ds, 2);
    let config = ExperimentConfig {
        grid: HyperGrid {
            learning_rates: vec![3e-3, 1e-4],
            batch_sizes: vec![8, 16],
            optimizers: vec![OptimizerConfig::adam(0.0)],
            architectures: vec![tiny_cnn()],
        },
        epochs: 2,
        ..toy_config(InputKind::Optical)
    };
    let a = grid_search(&config, &train_portion, &val).unwrap();
    assert_eq!(a.results.len(), 4);
    assert!(a.results.iter().all(|r| matches!(r.outcome, ComboOutcome::Scored { .. })));
    assert_eq!(grid_search(&config, &train_portion, &val).unwrap(), a);
}

#[test]
fn ties_go_to_the_earliest_combo() {
    let ds = toy_dataset();
    let (train_portion, val) = search_splits(&ds, 1);
    let base = ExperimentConfig { epochs: 20, ..toy_config(InputKind::Infrared) };
    let with_rates = |rates: Vec<f64>| ExperimentConfig {
        grid: HyperGrid {
            learning_rates: rates,
            batch_sizes: vec![8],
            optimizers: vec![OptimizerConfig::adam(0.0)],
            architectures: vec![tiny_cnn()],
        },
        ..base.clone()
    };
    let forward = grid_search(&with_rates(vec![3e-3, 2e-3]), &train_portion, &val).unwrap();
    let backward = grid_search(&with_rates(vec![2e-3, 3e-3]), &train_portion, &val).unwrap();
    let perfect = |s: &SearchResult| s.results.iter().all(|r| r.outcome.ranking() == Some((1.0, 1.0)));
    assert!(perfect(&forward) && perfect(&backward), "{forward:?}");
    assert_eq!(forward.best.config.optimizer.lr(), 3e-3);
    assert_eq!(backward.best.config.optimizer.lr(), 2e-3);
}

#[test]
fn invalid_combos_are_skipped_and_recorded() {
    let ds = toy_dataset();
    let (train_portion, val) = search_splits(&ds, 1);
    let vit = |patch| Architecture::MiniVit(VitParams { patch, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2 });
    let config = ExperimentConfig {
        family: Family::MiniVit,
        epochs: 2,
        grid: HyperGrid {
            learning_rates: vec![1e-3],
            batch_sizes: vec![8],
            optimizers: vec![OptimizerConfig::adam(0.0)],
            architectures: vec![vit(5), tiny_cnn(), vit(8)],
        },
        ..toy_config(InputKind::Infrared)
    };
    let search = grid_search(&config, &train_portion, &val).unwrap();
    assert!(matches!(search.results[0].outcome, ComboOutcome::Skipped { .. }));
    assert!(matches!(search.results[1].outcome, ComboOutcome::Skipped { .. }));
    assert_eq!(search.best.index, 2);

    let fusion = ExperimentConfig { input: InputKind::Fusion, ..config };
    let err = grid_search(&fusion, &train_portion, &val).unwrap_err();
    assert!(matches!(&err, TrainError::NoViableCombo(reason) if reason.contains("fusion unsupported")), "{err}");
    assert!(matches!(fusion.validate(), Err(TrainError::Model(ModelError::FusionUnsupported { .. }))));
    assert!(run_experiment(&ds, &fusion).is_err());
}

#[test]
fn separable_data_scores_perfectly_on_test() {
    let ds = toy_dataset();
    let config = ExperimentConfig { epochs: 20, ..toy_config(InputKind::Infrared) };
    let outcome = run_experiment(&ds, &config).unwrap();
    let row = &outcome.result.row;
    assert_eq!((row.roc_auc, row.pr_auc), (1.0, 1.0));
    assert_eq!(row.test_size, 6);
    assert_eq!(row.training_size, 34);
    assert_eq!((row.family, row.input, row.upsampled, row.augmented), (Family::ShallowCnn, InputKind::Infrared, false, false));
    assert_eq!(outcome.result.test_scores.len(), 6);
    assert!(outcome.result.timing.inference_ms > 0.0);
    let test_ids: HashSet<_> = outcome.split.indices(SplitTag::Test).into_iter().map(|i| ds.items[i].id.clone()).collect();
    assert_eq!(test_ids, outcome.result.test_ids.iter().cloned().collect());
}

#[test]
fn experiments_repeat_exactly() {
    let ds = toy_dataset();
    let config = ExperimentConfig { variant: Variant::UpsampledAugmented, upsample_factor: 1.5, ..toy_config(InputKind::Fusion) };
    let a = run_experiment(&ds, &config).unwrap();
    let b = run_experiment(&ds, &config).unwrap();
    assert_eq!(a.result.row, b.result.row);
    assert_eq!(a.result.model, b.result.model);
    assert_eq!(a.result.row.training_size, 51);
    assert!(a.result.row.upsampled && a.result.row.augmented);
}

#[test]
fn report_orders_rows_and_marks_vit_fusion() {
    let ds = toy_dataset();
    let mut rows = Vec::new();
    for (family, input, variant) in [
        (Family::MiniVit, InputKind::Optical, Variant::UpsampledAugmented),
        (Family::ShallowCnn, InputKind::Fusion, Variant::Raw),
        (Family::ShallowCnn, InputKind::Optical, Variant::Raw),
    ] {
        let architecture = match family {
            Family::MiniVit => Architecture::MiniVit(VitParams { patch: 8, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2 }),
            _ => tiny_cnn(),
        };
        let config = ExperimentConfig {
            family,
            input,
            variant,
            epochs: 1,
            upsample_factor: 1.0,
            grid: HyperGrid::single(architecture, OptimizerConfig::adam(1e-3), 16),
            ..toy_config(input)
        };
        rows.push(run_experiment(&ds, &config).unwrap().result.row);
    }
    let report = EvalReport::from_rows(rows);
    let keys: Vec<_> = report.rows.iter().map(|r| (r.family, r.input)).collect();
    assert_eq!(
        keys,
        vec![(Family::ShallowCnn, InputKind::Optical), (Family::ShallowCnn, InputKind::Fusion), (Family::MiniVit, InputKind::Optical)]
    );
    assert_eq!(report.unsupported.len(), 1);
    assert_eq!((report.unsupported[0].family, report.unsupported[0].input), (Family::MiniVit, InputKind::Fusion));
    assert!(report.find(Family::ShallowCnn, InputKind::Fusion, Variant::Raw).is_some());

    let text = report.to_text();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().contains("unsupported"));

    let json = report.to_json();
    assert_eq!(EvalReport::from_json(&json).unwrap(), report);
    let newer = json.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    assert!(EvalReport::from_json(&newer).unwrap_err().to_string().contains("schema version 2"));
    assert_eq!(EvalReport::merge([report.clone()]), report);
}
