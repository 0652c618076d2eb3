//! Command-line front end: synthetic data generation, training, evaluation,
//! and prompt extraction.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config errors.

use clap::{Args, Parser, Subcommand, ValueEnum};
use promptseg_core::config::{load_run_config, RunConfig};
use promptseg_core::data_io::{
    generate_synthetic, load_manifest, load_sample, preprocess, read_label_png, write_image_png,
    DatasetManifest, ImageSample, SplitKind, SynthConfig,
};
use promptseg_core::losses::PseudoLabelMode;
use promptseg_core::metrics::{
    aggregate, evaluate_dataset, render_table, EvalMode, EvalReport, EvalSample, SampleRecord,
};
use promptseg_core::model::{apply_lora, build_toy_model, Model};
use promptseg_core::prompt_geometry::{
    center_prompt_set, foreground_components, Connectivity, PromptSet,
};
use promptseg_core::trainer::{
    run_training, save_resume, LabeledPromptSource, TrainData, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "promptseg",
    about = "Semi-supervised promptable segmentation workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Extract prompt points from a mask or a model prediction.
    Prompts(PromptArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 48)]
    resolution: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    n_labeled: usize,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    total_iterations: Option<u64>,
    #[arg(long)]
    warmup_iterations: Option<u64>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    num_center: Option<usize>,
    #[arg(long)]
    num_random: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, value_enum)]
    pseudo_label: Option<PseudoLabelArg>,
    #[arg(long, value_enum)]
    labeled_prompts: Option<LabeledPromptArg>,
    /// Train on labeled data only.
    #[arg(long)]
    disable_unlabeled: bool,
    /// Plain cross pseudo-supervision between unprompted maps.
    #[arg(long)]
    vanilla_cps: bool,
    /// Drop the prompt consistency term.
    #[arg(long)]
    disable_pcr: bool,
    /// One-decoder self-training variant.
    #[arg(long)]
    single_branch: bool,
    /// Train the full encoder instead of low-rank adapters.
    #[arg(long)]
    no_lora: bool,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Unprompted)]
    mode: ModeArg,
    /// Where reports/ is created; defaults to the current directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    image: PathBuf,
    /// Class-id mask PNG to extract prompts from.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Checkpoint whose prediction supplies the components.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PromptModeArg::Center)]
    mode: PromptModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ConnArg::Eight)]
    connectivity: ConnArg,
    /// Write the image with prompt points burned in.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Labeled => SplitKind::Labeled,
            SplitArg::Unlabeled => SplitKind::Unlabeled,
            SplitArg::Val => SplitKind::Val,
            SplitArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unprompted,
    GtPrompt,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptModeArg {
    Center,
    Random,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConnArg {
    Four,
    Eight,
}

#[derive(Clone, Copy, ValueEnum)]
enum PseudoLabelArg {
    Hard,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabeledPromptArg {
    GroundTruth,
    Predicted,
}

enum CliError {
    /// Bad flags, bad config, missing inputs → exit 2.
    Usage(String),
    /// Failures after a validly configured run started → exit 1.
    Runtime(String),
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Prompts(a) => cmd_prompts(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    if a.out_dir.exists() {
        let occupied = std::fs::read_dir(&a.out_dir)
            .map_err(usage)?
            .next()
            .is_some();
        if occupied && !a.force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to write anyway",
                a.out_dir.display()
            )));
        }
    }
    let cfg = SynthConfig {
        n_samples: a.n,
        resolution: (a.resolution, a.resolution),
        num_classes: a.classes,
        seed: a.seed,
        n_labeled: a.n_labeled,
        val_frac: a.val_frac,
        test_frac: a.test_frac,
    };
    let manifest = generate_synthetic(&a.out_dir, &cfg).map_err(usage)?;
    println!(
        "wrote {} samples ({} labeled / {} unlabeled / {} val / {} test) to {}",
        manifest.entries.len(),
        manifest.split.labeled_ids.len(),
        manifest.split.unlabeled_ids.len(),
        manifest.split.val_ids.len(),
        manifest.split.test_ids.len(),
        a.out_dir.display()
    );
    Ok(())
}

/// Apply CLI overrides on top of the file/default config.
fn resolve_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => load_run_config(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.total_iterations {
        cfg.train.total_iterations = v;
        // keep the default invariant workable for short smoke runs
        cfg.train.warmup_iterations = cfg.train.warmup_iterations.min(v / 2);
    }
    if let Some(v) = a.warmup_iterations {
        cfg.train.warmup_iterations = v;
    }
    if let Some(v) = a.max_lr {
        cfg.train.max_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = a.num_center {
        cfg.train.prompts.num_center = v;
    }
    if let Some(v) = a.num_random {
        cfg.train.prompts.num_random = v;
    }
    if let Some(v) = a.lambda1 {
        cfg.train.loss.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.train.loss.lambda2 = v;
    }
    if let Some(v) = a.pseudo_label {
        cfg.train.loss.pseudo_label = match v {
            PseudoLabelArg::Hard => PseudoLabelMode::Hard,
            PseudoLabelArg::Soft => PseudoLabelMode::Soft,
        };
    }
    if let Some(v) = a.labeled_prompts {
        cfg.train.labeled_prompts = match v {
            LabeledPromptArg::GroundTruth => LabeledPromptSource::GroundTruth,
            LabeledPromptArg::Predicted => LabeledPromptSource::Predicted,
        };
    }
    cfg.train.ablation.disable_unlabeled |= a.disable_unlabeled;
    cfg.train.ablation.vanilla_cps |= a.vanilla_cps;
    cfg.train.ablation.disable_pcr |= a.disable_pcr;
    cfg.train.ablation.single_branch |= a.single_branch;
    if a.no_lora {
        cfg.apply_lora = false;
    }
    if a.no_augment {
        cfg.train.augment.enabled = false;
    }
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out_dir {
        cfg.data.out_dir = Some(o.clone());
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Load a split at the model resolution. Labels are dropped when
/// `keep_labels` is false so unlabeled data can never leak supervision.
fn load_split_preprocessed(
    root: &Path,
    manifest: &DatasetManifest,
    kind: SplitKind,
    resolution: (usize, usize),
    keep_labels: bool,
) -> Result<Vec<ImageSample>, CliError> {
    manifest
        .split
        .ids(kind)
        .iter()
        .map(|id| {
            let entry = manifest
                .entry(id)
                .ok_or_else(|| CliError::Usage(format!("manifest has no entry {id:?}")))?;
            let raw = load_sample(root, entry, manifest.num_classes).map_err(usage)?;
            let (mut sample, _) = preprocess(&raw, resolution);
            if !keep_labels {
                sample.label = None;
            }
            Ok(sample)
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a)?;
    let manifest_path = cfg.data.manifest.clone().ok_or_else(|| {
        CliError::Usage("no manifest given (flag --manifest or [data] in config)".into())
    })?;
    let out_dir = cfg.data.out_dir.clone().ok_or_else(|| {
        CliError::Usage("no output directory given (flag --out-dir or [data] in config)".into())
    })?;
    let manifest = load_manifest(&manifest_path).map_err(usage)?;
    if manifest.num_classes != cfg.model.num_classes {
        return Err(CliError::Usage(format!(
            "manifest has {} classes but the model is configured for {}",
            manifest.num_classes, cfg.model.num_classes
        )));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let res = cfg.model.resolution;
    let data = TrainData {
        labeled: load_split_preprocessed(root, &manifest, SplitKind::Labeled, res, true)?,
        unlabeled: load_split_preprocessed(root, &manifest, SplitKind::Unlabeled, res, false)?,
        val: load_split_preprocessed(root, &manifest, SplitKind::Val, res, true)?,
    };

    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    // resolved configuration echoed for provenance before anything runs
    std::fs::write(out_dir.join("resolved_config.toml"), cfg.to_toml()).map_err(runtime)?;

    let mut model = build_toy_model(cfg.model.clone()).map_err(usage)?;
    if cfg.apply_lora {
        apply_lora(&mut model, cfg.lora).map_err(usage)?;
    }
    let mut state = TrainState::new(&cfg.train, &model, data.labeled.len(), data.unlabeled.len());
    let art =
        run_training(&mut model, &mut state, &cfg.train, &data, Some(&out_dir)).map_err(runtime)?;
    save_resume(
        &out_dir.join("checkpoints").join("state.json"),
        &cfg.train,
        &model,
        &state,
    )
    .map_err(runtime)?;

    let last = art.records.last().expect("at least one iteration");
    println!(
        "trained {} iterations; final l_total {:.4}; best val DSC {}",
        last.iteration,
        last.l_total,
        art.best_val
            .map(|b| format!("{:.2} (iter {})", b.dsc, b.iteration))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// Report wrapper carrying the evaluation's provenance.
#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    manifest: &'a Path,
    split: &'a str,
    mode: EvalMode,
    num_classes: usize,
    resolution: (usize, usize),
    report: EvalReport,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let model = Model::load_checkpoint(&a.checkpoint).map_err(usage)?;
    let manifest = load_manifest(&a.manifest).map_err(usage)?;
    if manifest.num_classes != model.num_classes() {
        return Err(CliError::Usage(format!(
            "manifest has {} classes but the checkpoint expects {}",
            manifest.num_classes,
            model.num_classes()
        )));
    }
    let kind: SplitKind = a.split.into();
    let mode = match a.mode {
        ModeArg::Unprompted => EvalMode::Unprompted,
        ModeArg::GtPrompt => EvalMode::GtPrompted,
    };
    let ids = manifest.split.ids(kind);
    let root = a.manifest.parent().unwrap_or(Path::new("."));
    let res = model.resolution();

    let mut samples = Vec::new();
    let mut failed: Vec<SampleRecord> = Vec::new();
    for id in ids {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| CliError::Usage(format!("manifest has no entry {id:?}")))?;
        if entry.label_path.is_none() {
            return Err(CliError::Usage(format!(
                "ground truth required: entry {id:?} has no label"
            )));
        }
        match load_sample(root, entry, manifest.num_classes) {
            Err(e) => failed.push(SampleRecord {
                sample_id: id.clone(),
                classes: Vec::new(),
                error: Some(e.to_string()),
            }),
            Ok(raw) => {
                let (s, _) = preprocess(&raw, res);
                samples.push(EvalSample {
                    id: s.id,
                    image: s.image,
                    gt: s.label.expect("label checked above"),
                    spacing: s.spacing,
                });
            }
        }
    }
    let mut report = evaluate_dataset(&model, samples, mode);
    if !failed.is_empty() {
        let mut records = report.samples;
        records.extend(failed);
        report = aggregate(mode, model.num_classes(), records);
    }

    print!("{}", render_table(&report));
    let reports_dir = a.out_dir.join("reports");
    std::fs::create_dir_all(&reports_dir).map_err(runtime)?;
    let split_name = format!("{kind:?}").to_lowercase();
    let out_path = reports_dir.join(format!("eval_{split_name}_{:?}.json", mode).to_lowercase());
    let output = EvalOutput {
        checkpoint: &a.checkpoint,
        manifest: &a.manifest,
        split: &split_name,
        mode,
        num_classes: model.num_classes(),
        resolution: res,
        report,
    };
    let text = serde_json::to_string_pretty(&output).map_err(runtime)?;
    std::fs::write(&out_path, text).map_err(runtime)?;
    println!("report written to {}", out_path.display());
    Ok(())
}

/// Mask prompts live on the mask's own pixel grid; checkpoint prompts live
/// on the model-resolution grid the image is resized to.
fn cmd_prompts(a: PromptArgs) -> Result<(), CliError> {
    let conn = match a.connectivity {
        ConnArg::Four => Connectivity::Four,
        ConnArg::Eight => Connectivity::Eight,
    };
    let (classes_map, image) = match (&a.mask, &a.checkpoint) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "both --mask and --checkpoint given; pick one prompt source".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "need a prompt source: --mask or --checkpoint".into(),
            ))
        }
        (Some(mask_path), None) => {
            let image = promptseg_core::data_io::read_image_png(&a.image).map_err(usage)?;
            let mask = read_label_png(mask_path).map_err(usage)?;
            (mask, image)
        }
        (None, Some(ck)) => {
            let model = Model::load_checkpoint(ck).map_err(usage)?;
            let raw = ImageSample {
                id: "cli".into(),
                image: promptseg_core::data_io::read_image_png(&a.image).map_err(usage)?,
                label: None,
                spacing: (1.0, 1.0),
            };
            let (s, _) = preprocess(&raw, model.resolution());
            let pred = promptseg_core::metrics::infer(&model, &s.image).map_err(runtime)?;
            (pred, s.image)
        }
    };
    let num_classes = classes_map.iter().copied().max().unwrap_or(0) + 1;
    let comps = foreground_components(&classes_map.view(), num_classes, conn);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut set = PromptSet {
        points: Vec::new(),
        source_branch: None,
    };
    if matches!(a.mode, PromptModeArg::Center | PromptModeArg::Both) {
        set.points.extend(center_prompt_set(&comps, None).points);
    }
    if matches!(a.mode, PromptModeArg::Random | PromptModeArg::Both) {
        set.points.extend(
            promptseg_core::prompt_geometry::random_prompt_set(&comps, &mut rng, None).points,
        );
    }
    println!("{}", serde_json::to_string_pretty(&set).map_err(runtime)?);

    if let Some(overlay_path) = &a.overlay {
        let (h, w) = image.dim();
        let mut canvas = image.clone();
        for p in &set.points {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (p.row as i64 + dr, p.col as i64 + dc);
                    if r >= 0
                        && c >= 0
                        && (r as usize) < h
                        && (c as usize) < w
                        && (dr == 0 || dc == 0)
                    {
                        canvas[[r as usize, c as usize]] = 1.0;
                    }
                }
            }
        }
        write_image_png(overlay_path, &canvas).map_err(runtime)?;
    }
    Ok(())
}
