mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use runaway_core::dataset::{self, heat_blob_box, load_manifest, save_dataset, Dataset, Label};
use runaway_core::explain::{self, Heatmap};
use runaway_core::fusion::{self, InputKind, TempRange};
use runaway_core::models::{load_checkpoint, save_checkpoint, Family, Model};
use runaway_core::seed;
use runaway_core::tensor::Tensor;
use runaway_core::trainer::{
    evaluate, prepare_training_data, run_experiment, split_dataset, subset, EvalReport, Examples,
    ExperimentConfig, Variant,
};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use error::CliError;

const RUN_RECORD_FILE: &str = "run.json";
const RUN_RECORD_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "runaway", version, about = "Thermal-runaway detection on optical and infrared image pairs")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        baseline: Option<usize>,
        #[arg(long)]
        runaway: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Write an upsampled and augmented copy of a manifest's training split.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output size as a multiple of the training split.
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split, grid-search, retrain on train + val and score the test split.
    Train {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        input: InputKind,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `raw` or `upsampled_augmented`.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Recompute test metrics of a saved model.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Input type; required when the checkpoint has no run record beside it.
        #[arg(long)]
        input: Option<InputKind>,
        /// Write the metrics here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write heatmap overlays for one sample.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        input: Option<InputKind>,
        /// Encoder layer for ViT attention maps; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        /// Class whose evidence is shown: `runaway` or `baseline`.
        #[arg(long, default_value = "runaway")]
        target: String,
    },
    /// Merge the reports of several training runs into one table.
    Report {
        /// Directory whose subdirectories hold `train` outputs.
        #[arg(long)]
        runs: PathBuf,
        /// Where to write the merged report; defaults to `--runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// What `train` leaves beside the checkpoint so later commands can reuse the split.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    schema_version: u32,
    experiment: ExperimentConfig,
    test_ids: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate { out, baseline, runaway, seed, size } => {
            let d = &mut config.dataset;
            d.baseline = baseline.unwrap_or(d.baseline);
            d.runaway = runaway.unwrap_or(d.runaway);
            d.image_size = size.unwrap_or(d.image_size);
            config.seed = seed.unwrap_or(config.seed);
            generate(&config, &out)
        }
        Command::Augment { manifest, out, factor, seed } => {
            config.training.upsample_factor = factor.unwrap_or(config.training.upsample_factor);
            config.augment.seed = seed.unwrap_or(config.augment.seed);
            augment(&config, &manifest, &out)
        }
        Command::Train { family, input, manifest, out, variant, seed, epochs } => {
            // Checked before anything is loaded.
            if !family.supports_channels(input.channels()) {
                return Err(CliError::usage(format!(
                    "{} cannot take {input} input: 3-channel input only, {input} has {} channels",
                    family.display_name(),
                    input.channels()
                )));
            }
            config.seed = seed.unwrap_or(config.seed);
            config.training.epochs = epochs.unwrap_or(config.training.epochs);
            let variant = variant.unwrap_or(config.training.variant);
            train(&config.experiment(family, input, variant), &manifest, &out)
        }
        Command::Evaluate { checkpoint, manifest, input, out } => {
            evaluate_checkpoint(&checkpoint, &manifest, input, config.training.temp_range, out.as_deref())
        }
        Command::Explain { checkpoint, manifest, sample, out, input, layer, target } => {
            let target = match target.as_str() {
                "runaway" => Label::Runaway,
                "baseline" => Label::Baseline,
                other => return Err(CliError::usage(format!("unknown target `{other}` (runaway, baseline)"))),
            };
            explain_sample(&checkpoint, &manifest, &sample, &out, input, layer, target, config.training.temp_range)
        }
        Command::Report { runs, out } => report(&runs, out.as_deref().unwrap_or(&runs)),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn generate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let d = &config.dataset;
    let ds = dataset::generate_dataset_with(config.seed, d.baseline, d.runaway, config.image_size(), d.ir_jitter)?;
    ensure_dir(out)?;
    let manifest = save_dataset(&ds, out)?;
    println!("wrote {} samples ({} baseline, {} runaway) to {}", manifest.entries.len(), d.baseline, d.runaway, out.display());
    Ok(())
}

fn augment(config: &RunConfig, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load_manifest(manifest)?;
    let split = split_dataset(&ds, config.training.fractions, config.seed)?;
    let train_portion = subset(&ds, &split, &[dataset::SplitTag::Train]);
    let augment_config = config.augment;
    let prepared = prepare_training_data(
        &train_portion,
        Variant::UpsampledAugmented,
        config.training.upsample_factor,
        &augment_config,
        seed::derive_named(augment_config.seed, "upsample"),
    )?;
    ensure_dir(out)?;
    save_dataset(&prepared, out)?;
    println!("wrote {} augmented training samples from {} to {}", prepared.len(), train_portion.len(), out.display());
    Ok(())
}

fn train(experiment: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<(), CliError> {
    experiment.validate()?;
    let ds = load_manifest(manifest)?;
    let outcome = run_experiment(&ds, experiment)?;
    let result = &outcome.result;
    ensure_dir(out)?;
    save_checkpoint(&result.model, &out.join("model.ckpt")).map_err(CliError::from)?;
    let report = EvalReport::from_rows(vec![result.row.clone()]);
    write(&out.join("report.json"), report.to_json())?;
    write(&out.join("report.txt"), report.to_text())?;
    write(&out.join("timing.json"), to_json(&result.timing))?;
    let record = RunRecord { schema_version: RUN_RECORD_VERSION, experiment: experiment.clone(), test_ids: result.test_ids.clone() };
    write(&out.join(RUN_RECORD_FILE), to_json(&record))?;
    println!(
        "{} {} {:?}: test ROC-AUC {:.4}, PR-AUC {:.4} ({} test samples)",
        experiment.family.display_name(),
        experiment.input,
        experiment.variant,
        result.row.roc_auc,
        result.row.pr_auc,
        result.row.test_size
    );
    Ok(())
}

fn read_run_record(checkpoint: &Path) -> Result<Option<RunRecord>, CliError> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_RECORD_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("malformed {}: {e}", path.display())))?;
    if record.schema_version != RUN_RECORD_VERSION {
        return Err(CliError::data(format!("unsupported run record version {} in {}", record.schema_version, path.display())));
    }
    Ok(Some(record))
}

/// Input type and temperature window for a checkpoint, from its run record or flags.
fn resolve_input(
    record: Option<&RunRecord>,
    input: Option<InputKind>,
    range: TempRange,
    model: &Model<f32>,
) -> Result<(InputKind, TempRange), CliError> {
    let (kind, range) = match (input, record) {
        (Some(kind), _) => (kind, record.map_or(range, |r| r.experiment.temp_range)),
        (None, Some(r)) => (r.experiment.input, r.experiment.temp_range),
        (None, None) => return Err(CliError::usage("no run record beside the checkpoint; pass --input")),
    };
    if kind.channels() != model.spec().in_channels {
        return Err(CliError::usage(format!(
            "{kind} input has {} channels, the model takes {}",
            kind.channels(),
            model.spec().in_channels
        )));
    }
    Ok((kind, range))
}

#[derive(Serialize)]
struct EvaluationSummary {
    samples: usize,
    roc_auc: f64,
    pr_auc: f64,
}

fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    input: Option<InputKind>,
    range: TempRange,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint, None)?;
    let record = read_run_record(checkpoint)?;
    let (kind, range) = resolve_input(record.as_ref(), input, range, &model)?;
    let ds = load_manifest(manifest)?;
    let test = match &record {
        Some(r) => {
            let items = r
                .test_ids
                .iter()
                .map(|id| ds.find(id).cloned().ok_or_else(|| CliError::data(format!("test sample `{id}` not in manifest"))))
                .collect::<Result<Vec<_>, _>>()?;
            Dataset { items, ..ds.clone_meta() }
        }
        None => ds,
    };
    let eval = evaluate(&model, &Examples::new(&test, kind, range), 32)?;
    let summary = EvaluationSummary { samples: test.len(), roc_auc: eval.roc_auc, pr_auc: eval.pr_auc };
    match out {
        Some(path) => write(path, to_json(&summary))?,
        None => print!("{}", to_json(&summary)),
    }
    Ok(())
}

#[derive(Serialize)]
struct ExplanationSummary {
    sample: String,
    label: Label,
    target: Label,
    source: explain::HeatmapSource,
    /// Heatmap mass inside the heat blob box grown by one radius.
    blob_mass_fraction: Option<f64>,
    blob_area_fraction: Option<f64>,
    files: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn explain_sample(
    checkpoint: &Path,
    manifest: &Path,
    sample_id: &str,
    out: &Path,
    input: Option<InputKind>,
    layer: Option<usize>,
    target: Label,
    range: TempRange,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint, None)?;
    let record = read_run_record(checkpoint)?;
    let (kind, range) = resolve_input(record.as_ref(), input, range, &model)?;
    let ds = load_manifest(manifest)?;
    let item = ds.find(sample_id).ok_or_else(|| CliError::data(format!("sample `{sample_id}` not in manifest")))?;
    let sample = &item.sample;
    let x = fusion::model_input(sample, kind, range).map_err(|e| CliError::data(e.to_string()))?;
    let heatmap: Heatmap = match model.family() {
        Family::MiniVit => explain::attention_heatmap(&model, &x, layer, target)?,
        _ => explain::grad_cam(&model, &x, target)?,
    };
    ensure_dir(out)?;
    let mut files = Vec::new();
    let mut save = |name: String, image: &explain::RgbImage| -> Result<(), CliError> {
        explain::save_png(image, &out.join(&name))?;
        files.push(name);
        Ok(())
    };
    save("heatmap.png".into(), &explain::heatmap_image(&heatmap))?;
    let ir_rgb = fusion::ir_to_falsecolor(&sample.infrared, range.min, range.max).map_err(|e| CliError::data(e.to_string()))?;
    let bases: Vec<(&str, &Tensor<f32>)> = match kind {
        InputKind::Optical => vec![("optical", &sample.optical)],
        InputKind::Infrared => vec![("infrared", &ir_rgb)],
        InputKind::Fusion => vec![("optical", &sample.optical), ("infrared", &ir_rgb)],
    };
    for (name, base) in bases {
        let blended = explain::overlay(&heatmap, base)?;
        let panel = explain::two_panel(&explain::to_rgb_image(base)?, &blended)?;
        save(format!("overlay_{name}.png"), &blended)?;
        save(format!("panel_{name}.png"), &panel)?;
    }
    let size = sample.size();
    let blob = match sample.scene() {
        Some(scene) => heat_blob_box(scene, size, 1.0)?,
        None => None,
    };
    let summary = ExplanationSummary {
        sample: sample_id.to_string(),
        label: sample.label,
        target,
        source: heatmap.source.clone(),
        blob_mass_fraction: blob.and_then(|b| heatmap.mass_fraction(b)),
        blob_area_fraction: blob.map(|(y0, x0, y1, x1)| ((y1 - y0) * (x1 - x0)) as f64 / size.pixels() as f64),
        files,
    };
    write(&out.join("explanation.json"), to_json(&summary))?;
    println!("wrote {} images for {sample_id} to {}", summary.files.len(), out.display());
    Ok(())
}

fn report(runs: &Path, out: &Path) -> Result<(), CliError> {
    let entries = fs::read_dir(runs).map_err(|e| CliError::data(format!("cannot read {}: {e}", runs.display())))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("report.json").is_file()).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::data(format!("no run reports under {}", runs.display())));
    }
    let mut reports = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        reports.push(EvalReport::from_json(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?);
    }
    let merged = EvalReport::merge(reports);
    write(&out.join("report.json"), merged.to_json())?;
    write(&out.join("report.txt"), merged.to_text())?;
    print!("{}", merged.to_text());
    Ok(())
}
