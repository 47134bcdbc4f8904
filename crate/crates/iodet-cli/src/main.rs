//! Command-line driver: corpus generation, phased training, replay,
//! evaluation, and the full experiment pipeline.
//!
//! Every command is a thin wrapper over one library operation. The
//! stage commands (`train`, `risk`, `replay`, `eval`) work on explicit
//! files so the incremental pipeline can be driven step by step; `run`
//! executes the whole schedule into one resumable output directory.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 I/O or checkpoint failure.

use clap::{Args, Parser, Subcommand};
use iodet::data::{generate_corpus, load_manifest, save_manifest, CorpusManifest, MANIFEST_VERSION};
use iodet::eval::{
    detections_from_predictions, evaluate, load_detections, save_detections, Detection, GtBox,
};
use iodet::experiment::{
    calibration_seed, phase_datasets, plot_data, resolved_model_config, run_experiment,
    train_settings, training_plan, ExperimentConfig, MetricsFile, TrainingMode,
    CALIBRATION_LR_DIVISOR,
};
use iodet::incremental::run_incremental_step;
use iodet::model::{AttentionMode, Model};
use iodet::replay::{partial_calibration, risk_scores, select_exemplars, ExemplarStore, RiskRecord};
use iodet::rng::Seed;
use iodet::DetError;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "iodet", version, about = "Incremental shape-detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus and save its manifest.
    GenData(GenDataArgs),
    /// Train one incremental phase from the previous checkpoint.
    Train(TrainArgs),
    /// Score a phase's images by their set-loss risk.
    Risk(RiskArgs),
    /// Select risk-balanced exemplars and run partial calibration.
    Replay(ReplayArgs),
    /// Evaluate a checkpoint or a prediction dump against a corpus.
    Eval(EvalArgs),
    /// Run the full pipeline (resumes an interrupted directory).
    Run(RunArgs),
    /// Emit per-phase AP curves as CSV from a finished run.
    PlotData(PlotDataArgs),
}

/// Experiment settings shared by the config-driven commands. Flags
/// override the TOML file; both override the built-in defaults.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; omitted fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (one knob: data, init, and shuffles derive from it)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run artifacts
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Training mode: dyq | naive | joint
    #[arg(long)]
    mode: Option<String>,
    /// Exemplar replay plus partial calibration (dyq only)
    #[arg(long)]
    replay: Option<bool>,
    /// Training epochs per phase
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training corpus size
    #[arg(long)]
    train_images: Option<usize>,
    /// Held-out evaluation corpus size
    #[arg(long)]
    test_images: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> iodet::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text)
                    .map_err(|e| DetError::Config(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out_dir) = &self.out_dir {
            config.out_dir = out_dir.clone();
        }
        if let Some(mode) = &self.mode {
            config.mode = parse_mode(mode)?;
        }
        if let Some(replay) = self.replay {
            config.replay = replay;
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            config.lr = lr;
        }
        if let Some(batch_size) = self.batch_size {
            config.batch_size = batch_size;
        }
        if let Some(n) = self.train_images {
            config.n_train_images = n;
        }
        if let Some(n) = self.test_images {
            config.n_test_images = n;
        }
        Ok(config)
    }
}

fn parse_mode(text: &str) -> iodet::Result<TrainingMode> {
    match text.to_ascii_lowercase().as_str() {
        "dyq" => Ok(TrainingMode::Dyq),
        "naive" => Ok(TrainingMode::Naive),
        "joint" => Ok(TrainingMode::Joint),
        other => Err(DetError::Config(format!(
            "unknown mode {other:?}; expected dyq, naive, or joint"
        ))),
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Manifest file to write
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    images: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Square canvas side in pixels
    #[arg(long, default_value_t = 48)]
    canvas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training corpus manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Phase to train, 1-based
    #[arg(long)]
    phase: usize,
    /// Previous phase's checkpoint (required for phase > 1)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write the trained checkpoint
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Optional epoch-log JSON file
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RiskArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Phase whose images to score, 1-based
    #[arg(long)]
    phase: usize,
    /// Checkpoint trained through that phase
    #[arg(long)]
    checkpoint: PathBuf,
    /// Risk-record JSON file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    phase: usize,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Risk records from the `risk` command
    #[arg(long)]
    risks: PathBuf,
    /// Exemplar store to update (created if missing)
    #[arg(long)]
    store: PathBuf,
    /// Where to write the calibrated checkpoint
    #[arg(long)]
    out_checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation corpus manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to run (exclusive with --predictions)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Existing prediction dump to score (exclusive with --checkpoint)
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Comma-separated class ids; defaults to every corpus class
    #[arg(long)]
    classes: Option<String>,
    /// Dump the collected predictions as line-delimited JSON
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Report JSON file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Finished run directory holding metrics.json
    #[arg(long)]
    run_dir: PathBuf,
    /// CSV file to write (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap would exit 2; usage problems are config errors here
            let _ = err.print();
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Risk(args) => risk(args),
        Command::Replay(args) => replay(args),
        Command::Eval(args) => eval(args),
        Command::Run(args) => run(args),
        Command::PlotData(args) => plot(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn gen_data(args: GenDataArgs) -> iodet::Result<()> {
    let scenes = generate_corpus(args.images, args.classes, args.canvas, Seed::new(args.seed))?;
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        canvas: args.canvas,
        n_classes: args.classes,
        seed: args.seed,
        scenes,
    };
    save_manifest(&args.out, &manifest)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), args.out.display());
    Ok(())
}

/// The stage commands all need the corpus to agree with the config.
fn load_matching_manifest(
    path: &Path,
    config: &ExperimentConfig,
) -> iodet::Result<CorpusManifest> {
    let manifest = load_manifest(path)?;
    if manifest.n_classes != config.n_classes {
        return Err(DetError::Config(format!(
            "manifest has {} classes but the config expects {}",
            manifest.n_classes, config.n_classes
        )));
    }
    if manifest.canvas != config.model.image_size {
        return Err(DetError::Config(format!(
            "manifest canvas {} does not match the model input size {}",
            manifest.canvas, config.model.image_size
        )));
    }
    Ok(manifest)
}

fn train(args: TrainArgs) -> iodet::Result<()> {
    let config = args.config.resolve()?;
    config.validate()?;
    let manifest = load_matching_manifest(&args.manifest, &config)?;
    let datasets = phase_datasets(&config, &manifest.scenes)?;
    let dataset = datasets.get(args.phase.wrapping_sub(1)).ok_or_else(|| {
        DetError::Config(format!("phase {} outside the {}-phase plan", args.phase, datasets.len()))
    })?;
    let splits: Vec<Vec<usize>> = datasets.iter().map(|d| d.class_set.clone()).collect();
    let plan = training_plan(&config, splits)?;

    let mut model = match &args.checkpoint {
        Some(path) => {
            let (model, phase) = Model::load_checkpoint(path)?;
            if phase + 1 != args.phase {
                return Err(DetError::Config(format!(
                    "checkpoint is trained through phase {phase}; cannot start phase {}",
                    args.phase
                )));
            }
            model
        }
        None if args.phase == 1 => Model::new(resolved_model_config(&config))?,
        None => {
            return Err(DetError::Config(format!(
                "phase {} needs the previous checkpoint (--checkpoint)",
                args.phase
            )))
        }
    };

    let logs =
        run_incremental_step(&mut model, &manifest.scenes, dataset, &plan, &train_settings(&config))?;
    model.save_checkpoint(&args.out_checkpoint, args.phase)?;
    for log in &logs {
        println!("phase {} epoch {}: loss {:.6}", log.phase, log.epoch, log.total_loss);
    }
    if let Some(path) = &args.log {
        write_json(path, &logs)?;
    }
    println!("checkpoint written to {}", args.out_checkpoint.display());
    Ok(())
}

fn risk(args: RiskArgs) -> iodet::Result<()> {
    let config = args.config.resolve()?;
    config.validate()?;
    let manifest = load_matching_manifest(&args.manifest, &config)?;
    let datasets = phase_datasets(&config, &manifest.scenes)?;
    let dataset = datasets.get(args.phase.wrapping_sub(1)).ok_or_else(|| {
        DetError::Config(format!("phase {} outside the {}-phase plan", args.phase, datasets.len()))
    })?;
    let (model, phase) = Model::load_checkpoint(&args.checkpoint)?;
    if phase != args.phase {
        return Err(DetError::Config(format!(
            "checkpoint is trained through phase {phase}, not {}",
            args.phase
        )));
    }
    let records = risk_scores(&model, &manifest.scenes, dataset, &config.coeffs)?;
    write_json(&args.out, &records)?;
    println!("scored {} images into {}", records.len(), args.out.display());
    Ok(())
}

fn replay(args: ReplayArgs) -> iodet::Result<()> {
    let config = args.config.resolve()?;
    config.validate()?;
    let manifest = load_matching_manifest(&args.manifest, &config)?;
    let datasets = phase_datasets(&config, &manifest.scenes)?;
    let dataset = datasets.get(args.phase.wrapping_sub(1)).ok_or_else(|| {
        DetError::Config(format!("phase {} outside the {}-phase plan", args.phase, datasets.len()))
    })?;
    let (mut model, phase) = Model::load_checkpoint(&args.checkpoint)?;
    if phase != args.phase {
        return Err(DetError::Config(format!(
            "checkpoint is trained through phase {phase}, not {}",
            args.phase
        )));
    }
    let records: Vec<RiskRecord> = read_json(&args.risks)?;
    let selected = select_exemplars(&records, config.exemplar_fraction)?;
    let mut store =
        if args.store.exists() { ExemplarStore::load(&args.store)? } else { ExemplarStore::new() };
    store.add_phase(dataset, &selected)?;
    store.save(&args.store)?;
    let logs = partial_calibration(
        &mut model,
        &manifest.scenes,
        &store,
        config.calibration_epochs,
        config.lr / CALIBRATION_LR_DIVISOR,
        config.batch_size,
        &config.coeffs,
        calibration_seed(&config, args.phase),
    )?;
    model.save_checkpoint(&args.out_checkpoint, args.phase)?;
    println!(
        "kept {} exemplars (store now holds {}); calibrated for {} epochs",
        selected.len(),
        store.total_exemplars(),
        logs.len()
    );
    println!("checkpoint written to {}", args.out_checkpoint.display());
    Ok(())
}

fn eval(args: EvalArgs) -> iodet::Result<()> {
    if args.checkpoint.is_some() == args.predictions.is_some() {
        return Err(DetError::Config("pass exactly one of --checkpoint or --predictions".into()));
    }
    let manifest = load_manifest(&args.manifest)?;
    let classes: Vec<usize> = match &args.classes {
        Some(text) => parse_classes(text)?,
        None => (0..manifest.n_classes).collect(),
    };

    let detections: Vec<Detection> = match (&args.checkpoint, &args.predictions) {
        (Some(path), None) => {
            let (model, _) = Model::load_checkpoint(path)?;
            let mut all = Vec::new();
            for scene in &manifest.scenes {
                let image = scene.rasterize();
                let mut g = iodet::autodiff::Graph::new();
                let (preds, _) = model.forward_all(&mut g, &image, AttentionMode::Disentangled)?;
                all.extend(detections_from_predictions(&g, &model.bank.groups, &preds, scene.id));
            }
            all.into_iter().filter(|d| classes.contains(&d.class)).collect()
        }
        (None, Some(path)) => load_detections(path)?
            .into_iter()
            .filter(|d| classes.contains(&d.class))
            .collect(),
        _ => unreachable!("source exclusivity checked above"),
    };
    if let Some(path) = &args.dump {
        save_detections(path, &detections)?;
    }

    let mut gts = Vec::new();
    for scene in &manifest.scenes {
        for target in scene.targets() {
            if classes.contains(&target.class) {
                gts.push(GtBox { image_id: scene.id, class: target.class, bbox: target.bbox.to_xyxy() });
            }
        }
    }
    let report = evaluate(&detections, &gts, &classes)?;
    println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", report.ap, report.ap50, report.ap75);
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn run(args: RunArgs) -> iodet::Result<()> {
    let config = args.config.resolve()?;
    let metrics = run_experiment(&config)?;
    println!("run: {}", metrics.label);
    for row in &metrics.forgetting.rows {
        let old = row.old.map(|s| format!("{:.4}", s.ap)).unwrap_or_else(|| "-".into());
        let new = row.new.map(|s| format!("{:.4}", s.ap)).unwrap_or_else(|| "-".into());
        println!(
            "after phase {}: AP {:.4}  AP50 {:.4}  AP75 {:.4}  old {}  new {}",
            row.after_phase, row.overall.ap, row.overall.ap50, row.overall.ap75, old, new
        );
    }
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}

fn plot(args: PlotDataArgs) -> iodet::Result<()> {
    let metrics: MetricsFile = read_json(&args.run_dir.join("metrics.json"))?;
    let csv = plot_data(&metrics);
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_classes(text: &str) -> iodet::Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| DetError::Config(format!("bad class id {part:?}")))
        })
        .collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> iodet::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> iodet::Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
