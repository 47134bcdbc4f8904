//! End-to-end experiment runner: corpus generation, phased training,
//! risk-balanced replay, per-phase evaluation, and stable metrics files.
//!
//! Three training modes share one artifact layout. `Dyq` grows a query
//! group per phase with pseudo-label supervision for old groups and
//! optional exemplar replay. `Naive` fine-tunes a single fixed head on
//! each phase's restricted annotations in sequence — the forgetting
//! baseline. `Joint` trains that single head once on the full corpus
//! with complete annotations — the upper bound.
//!
//! All randomness flows from the one run seed through named sub-seeds,
//! so two runs of the same config produce byte-identical metrics files.
//! A run directory records its progress in `state.json`; rerunning picks
//! up after the last completed phase and converges to the same metrics
//! as an uninterrupted run.

use crate::data::{
    generate_corpus, save_manifest, CorpusManifest, PhaseItem, Scene, SceneIndex, split_revised,
    split_traditional, MANIFEST_VERSION,
};
use crate::eval::{
    collect_detections, evaluate, forgetting_report, save_detections, ApSummary, EvalReport,
    ForgettingReport, ForgettingRow, GtBox,
};
use crate::incremental::{
    run_incremental_step, train_step, EpochLog, FreezeMode, PhasePlan, Protocol, TrainExample,
    TrainSettings,
};
use crate::matchloss::LossCoeffs;
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::replay::{partial_calibration, risk_scores, select_exemplars, ExemplarStore};
use crate::rng::Seed;
use crate::DetError;
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const STATE_VERSION: u32 = 1;

/// Calibration fine-tunes at one tenth of the training rate.
pub const CALIBRATION_LR_DIVISOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Per-phase query groups, pseudo labels, optional replay.
    Dyq,
    /// One head over all classes, fine-tuned phase by phase.
    Naive,
    /// One head over all classes, trained once on everything.
    Joint,
}

/// Human-readable run tag used in the metrics files.
pub fn run_label(mode: TrainingMode, replay: bool) -> &'static str {
    match (mode, replay) {
        (TrainingMode::Dyq, true) => "dyq w/ ER",
        (TrainingMode::Dyq, false) => "dyq w/o ER",
        (TrainingMode::Naive, _) => "naive",
        (TrainingMode::Joint, _) => "joint",
    }
}

/// Everything one run needs; serialized to `config.json` in the output
/// directory, which then refuses configs that do not match it byte for
/// byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: TrainingMode,
    /// Exemplar replay plus partial calibration (`Dyq` only).
    pub replay: bool,
    pub n_classes: usize,
    pub n_train_images: usize,
    pub n_test_images: usize,
    /// Classes per phase, e.g. `[4, 4]`.
    pub split_sizes: Vec<usize>,
    pub protocol: Protocol,
    pub epochs: usize,
    pub calibration_epochs: usize,
    pub theta_p: f64,
    pub theta_iou: f64,
    pub exemplar_fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub coeffs: LossCoeffs,
    /// Model shape; its `seed` field is overwritten from the run seed.
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/exp"),
            mode: TrainingMode::Dyq,
            replay: true,
            n_classes: 8,
            n_train_images: 1000,
            n_test_images: 200,
            split_sizes: vec![4, 4],
            protocol: Protocol::Revised,
            epochs: 32,
            calibration_epochs: 2,
            theta_p: 0.4,
            theta_iou: 0.7,
            exemplar_fraction: 0.1,
            lr: 1e-3,
            batch_size: 8,
            coeffs: LossCoeffs::default(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.model.validate()?;
        if self.n_train_images == 0 || self.n_test_images == 0 {
            return Err(DetError::Config("image counts must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(DetError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(DetError::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(DetError::Config("epoch count must be positive".into()));
        }
        if self.replay && self.mode != TrainingMode::Dyq {
            return Err(DetError::Config(
                "exemplar replay only applies to the incremental mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunState {
    version: u32,
    completed_phases: usize,
}

/// Train and calibration curves for one phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLogs {
    pub train: Vec<EpochLog>,
    pub calibration: Vec<EpochLog>,
}

/// The final run summary written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub label: String,
    pub mode: TrainingMode,
    pub replay: bool,
    pub seed: u64,
    pub forgetting: ForgettingReport,
}

impl MetricsFile {
    pub fn final_row(&self) -> &ForgettingRow {
        self.forgetting.rows.last().expect("a run has at least one phase")
    }
}

fn fmt_opt(summary: Option<ApSummary>, pick: fn(ApSummary) -> f64) -> String {
    summary.map(|s| format!("{}", pick(s))).unwrap_or_default()
}

/// Renders the stable CSV written to `metrics.csv`. Columns:
/// `phase,ap,ap50,ap75,ap_old,ap50_old,ap75_old,ap_new,ap50_new,ap75_new`,
/// one row per completed phase; subset columns are empty when the subset
/// has no classes (the old set at phase 1).
pub fn metrics_csv(metrics: &MetricsFile) -> String {
    let mut out = String::from(
        "phase,ap,ap50,ap75,ap_old,ap50_old,ap75_old,ap_new,ap50_new,ap75_new\n",
    );
    for row in &metrics.forgetting.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.after_phase,
            row.overall.ap,
            row.overall.ap50,
            row.overall.ap75,
            fmt_opt(row.old, |s| s.ap),
            fmt_opt(row.old, |s| s.ap50),
            fmt_opt(row.old, |s| s.ap75),
            fmt_opt(row.new, |s| s.ap),
            fmt_opt(row.new, |s| s.ap50),
            fmt_opt(row.new, |s| s.ap75),
        ));
    }
    out
}

/// Renders per-step AP curves for plotting: one column per phase split
/// plus the old/new decomposition and the overall mean.
pub fn plot_data(metrics: &MetricsFile) -> String {
    let n_splits = metrics.forgetting.splits.len();
    let mut out = String::from("phase,ap");
    for i in 1..=n_splits {
        out.push_str(&format!(",ap_split{i}"));
    }
    out.push_str(",ap_old,ap_new\n");
    for row in &metrics.forgetting.rows {
        out.push_str(&format!("{},{}", row.after_phase, row.overall.ap));
        for split in &row.per_split {
            out.push(',');
            out.push_str(&fmt_opt(*split, |s| s.ap));
        }
        out.push_str(&format!(
            ",{},{}\n",
            fmt_opt(row.old, |s| s.ap),
            fmt_opt(row.new, |s| s.ap),
        ));
    }
    out
}

fn phase_dir(out_dir: &Path, phase: usize) -> PathBuf {
    out_dir.join(format!("phase{phase}"))
}

/// Model shape with its init seed derived from the run seed.
pub fn resolved_model_config(config: &ExperimentConfig) -> ModelConfig {
    let mut model_config = config.model;
    model_config.seed = Seed::new(config.seed).derive("model").0;
    model_config
}

/// Splits `corpus` into per-phase datasets under the configured protocol.
/// Stage commands and the full pipeline both go through here, so they
/// always agree on which classes and images belong to which phase.
pub fn phase_datasets(
    config: &ExperimentConfig,
    corpus: &[Scene],
) -> crate::Result<Vec<crate::data::PhaseDataset>> {
    match config.protocol {
        Protocol::Revised => split_revised(
            corpus,
            &config.split_sizes,
            config.n_classes,
            Seed::new(config.seed).derive("split"),
        ),
        Protocol::Traditional => {
            split_traditional(corpus, &config.split_sizes, config.n_classes)
        }
    }
}

/// The validated full schedule for the derived class `splits`.
pub fn training_plan(
    config: &ExperimentConfig,
    splits: Vec<Vec<usize>>,
) -> crate::Result<PhasePlan> {
    let plan = PhasePlan {
        splits,
        protocol: config.protocol,
        epochs: config.epochs,
        calibration_epochs: config.calibration_epochs,
        theta_p: config.theta_p,
        theta_iou: config.theta_iou,
        exemplar_fraction: config.exemplar_fraction,
        seed: Seed::new(config.seed).derive("train").0,
    };
    plan.validate(config.n_classes)?;
    Ok(plan)
}

pub fn train_settings(config: &ExperimentConfig) -> TrainSettings {
    TrainSettings {
        lr: config.lr,
        batch_size: config.batch_size,
        coeffs: config.coeffs,
        freeze: FreezeMode::QueriesOnly,
    }
}

/// Sub-seed for phase `t`'s calibration shuffle.
pub fn calibration_seed(config: &ExperimentConfig, phase: usize) -> Seed {
    Seed::new(config.seed).derive("calibration").derive_index(phase as u64)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Epoch loop for the single-group (naive / joint) modes: every item
/// supervises the one group directly, no pseudo labels, no freezing.
fn train_single_group(
    model: &mut Model,
    corpus: &[Scene],
    items: &[PhaseItem],
    epochs: usize,
    config: &ExperimentConfig,
    shuffle_seed: Seed,
    phase: usize,
) -> crate::Result<Vec<EpochLog>> {
    let index = SceneIndex::new(corpus);
    let mut opt = AdamW::new(config.lr);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        opt.lr = crate::optim::epoch_lr(config.lr, epoch, epochs);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut shuffle_seed.derive_index(epoch as u64).stream());

        let mut epoch_total = 0.0;
        let mut epoch_group = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let item = &items[i];
                batch.push(TrainExample {
                    image: index.get(item.image_id)?.rasterize(),
                    targets_per_group: vec![item.targets.clone()],
                });
            }
            let context = format!("phase {phase} epoch {epoch}");
            let loss = train_step(model, &mut opt, &batch, &config.coeffs, &context)?;
            epoch_total += loss.total * chunk.len() as f64;
            epoch_group += loss.per_group[0] * chunk.len() as f64;
            seen += chunk.len();
        }
        let scale = 1.0 / seen.max(1) as f64;
        logs.push(EpochLog {
            phase,
            epoch,
            per_group_loss: vec![epoch_group * scale],
            total_loss: epoch_total * scale,
        });
    }
    Ok(logs)
}

/// Runs (or resumes) a full experiment in `config.out_dir` and returns
/// the final metrics. Artifacts: `config.json`, the two corpus
/// manifests, per-phase `checkpoint.json` / `epochs.json` /
/// `predictions.jsonl` / `report.json`, `exemplars.json` when replay is
/// on, `state.json`, and the final `metrics.json` / `metrics.csv`.
pub fn run_experiment(config: &ExperimentConfig) -> crate::Result<MetricsFile> {
    config.validate()?;
    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir)?;

    // an output directory is married to one config
    let config_text = serde_json::to_string_pretty(config)?;
    let config_path = out_dir.join("config.json");
    if config_path.exists() {
        if std::fs::read_to_string(&config_path)? != config_text {
            return Err(DetError::Config(format!(
                "{} already holds a different experiment; use a fresh directory",
                out_dir.display()
            )));
        }
    } else {
        std::fs::write(&config_path, &config_text)?;
    }

    let root = Seed::new(config.seed);
    let model_config = resolved_model_config(config);
    let canvas = model_config.image_size;

    let train_seed = root.derive("train-data");
    let test_seed = root.derive("test-data");
    let train_corpus = generate_corpus(config.n_train_images, config.n_classes, canvas, train_seed)?;
    let test_corpus = generate_corpus(config.n_test_images, config.n_classes, canvas, test_seed)?;
    for (name, corpus, seed) in [
        ("train_corpus.json", &train_corpus, train_seed),
        ("test_corpus.json", &test_corpus, test_seed),
    ] {
        let path = out_dir.join(name);
        if !path.exists() {
            save_manifest(
                &path,
                &CorpusManifest {
                    version: MANIFEST_VERSION,
                    canvas,
                    n_classes: config.n_classes,
                    seed: seed.0,
                    scenes: corpus.clone(),
                },
            )?;
        }
    }

    let datasets = phase_datasets(config, &train_corpus)?;
    let splits: Vec<Vec<usize>> = datasets.iter().map(|d| d.class_set.clone()).collect();
    let plan = training_plan(config, splits.clone())?;
    let all_classes: Vec<usize> = splits.iter().flatten().copied().collect();

    let n_steps = match config.mode {
        TrainingMode::Joint => 1,
        _ => datasets.len(),
    };

    // resume after the last completed phase, if any
    let state_path = out_dir.join("state.json");
    let mut completed = 0usize;
    if state_path.exists() {
        let state: RunState = read_json(&state_path)?;
        if state.version != STATE_VERSION {
            return Err(DetError::Checkpoint(format!(
                "state version {} unsupported (expected {STATE_VERSION})",
                state.version
            )));
        }
        completed = state.completed_phases.min(n_steps);
    }
    let store_path = out_dir.join("exemplars.json");
    let mut model;
    let mut store = ExemplarStore::new();
    if completed > 0 {
        let checkpoint = phase_dir(out_dir, completed).join("checkpoint.json");
        let (loaded, phase) = Model::load_checkpoint(&checkpoint)?;
        if phase != completed {
            return Err(DetError::Checkpoint(format!(
                "checkpoint records phase {phase}, state records {completed}"
            )));
        }
        model = loaded;
        if config.replay && store_path.exists() {
            store = ExemplarStore::load(&store_path)?;
        }
    } else {
        model = Model::new(model_config)?;
    }

    for t in completed + 1..=n_steps {
        let dir = phase_dir(out_dir, t);
        std::fs::create_dir_all(&dir)?;

        let mut calibration = Vec::new();
        let train = match config.mode {
            TrainingMode::Dyq => {
                let dataset = &datasets[t - 1];
                let settings = train_settings(config);
                let logs = run_incremental_step(&mut model, &train_corpus, dataset, &plan, &settings)?;
                if config.replay {
                    let records = risk_scores(&model, &train_corpus, dataset, &config.coeffs)?;
                    let selected = select_exemplars(&records, plan.exemplar_fraction)?;
                    store.add_phase(dataset, &selected)?;
                    store.save(&store_path)?;
                    calibration = partial_calibration(
                        &mut model,
                        &train_corpus,
                        &store,
                        plan.calibration_epochs,
                        config.lr / CALIBRATION_LR_DIVISOR,
                        config.batch_size,
                        &config.coeffs,
                        calibration_seed(config, t),
                    )?;
                }
                logs
            }
            TrainingMode::Naive => {
                if t == 1 {
                    model.expand_queries(&all_classes)?;
                }
                train_single_group(
                    &mut model,
                    &train_corpus,
                    &datasets[t - 1].items,
                    config.epochs,
                    config,
                    root.derive("single-order").derive_index(t as u64),
                    t,
                )?
            }
            TrainingMode::Joint => {
                model.expand_queries(&all_classes)?;
                let items: Vec<PhaseItem> = train_corpus
                    .iter()
                    .map(|s| PhaseItem { image_id: s.id, targets: s.targets() })
                    .collect();
                // the revised protocol partitions images across phases, so
                // `epochs` over the full corpus matches the incremental
                // modes' total sample budget
                train_single_group(
                    &mut model,
                    &train_corpus,
                    &items,
                    config.epochs,
                    config,
                    root.derive("single-order").derive_index(t as u64),
                    t,
                )?
            }
        };

        model.save_checkpoint(&dir.join("checkpoint.json"), t)?;
        write_json(&dir.join("epochs.json"), &PhaseLogs { train, calibration })?;

        // evaluate over the classes seen so far (everything, for joint)
        let mut seen: Vec<usize> = match config.mode {
            TrainingMode::Joint => all_classes.clone(),
            _ => splits[..t].iter().flatten().copied().collect(),
        };
        seen.sort_unstable();
        // a single-head model already scores classes of later phases;
        // score only what the schedule has revealed so far
        let (all_detections, all_gts) = collect_detections(&model, &test_corpus)?;
        let detections: Vec<_> =
            all_detections.into_iter().filter(|d| seen.contains(&d.class)).collect();
        let gts: Vec<GtBox> = all_gts.into_iter().filter(|g| seen.contains(&g.class)).collect();
        save_detections(&dir.join("predictions.jsonl"), &detections)?;
        let report = evaluate(&detections, &gts, &seen)?;
        write_json(&dir.join("report.json"), &report)?;

        write_json(&state_path, &RunState { version: STATE_VERSION, completed_phases: t })?;
    }

    // final metrics, rebuilt from the per-phase reports on disk so a
    // resumed run emits exactly what an uninterrupted one would
    let mut reports = Vec::with_capacity(n_steps);
    for t in 1..=n_steps {
        reports.push(read_json::<EvalReport>(&phase_dir(out_dir, t).join("report.json"))?);
    }
    let forgetting = if config.mode == TrainingMode::Joint {
        // a joint run's single step stands at the end of the schedule
        let report = &reports[0];
        let t = splits.len();
        let old_classes: Vec<usize> = splits[..t - 1].iter().flatten().copied().collect();
        let row = ForgettingRow {
            after_phase: t,
            overall: ApSummary { ap: report.ap, ap50: report.ap50, ap75: report.ap75 },
            per_split: splits.iter().map(|s| report.subset(s)).collect(),
            old: if old_classes.is_empty() { None } else { report.subset(&old_classes) },
            new: report.subset(&splits[t - 1]),
        };
        ForgettingReport { splits: splits.clone(), rows: vec![row] }
    } else {
        forgetting_report(&splits, &reports)
    };
    let metrics = MetricsFile {
        label: run_label(config.mode, config.replay).to_string(),
        mode: config.mode,
        replay: config.replay,
        seed: config.seed,
        forgetting,
    };
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&metrics))?;
    Ok(metrics)
}
