//! Risk-balanced exemplar replay: score each current-phase image by the
//! newest group's set loss against its ground truth, keep the middle
//! slice of the risk ranking as exemplars, and fine-tune ("partial
//! calibration") on the merged store with every exemplar supervising only
//! the query group of its origin phase — real labels only, no pseudo
//! labels, all parameters unfrozen.

use crate::autodiff::{Grads, Graph};
use crate::data::{PhaseDataset, Scene, SceneIndex};
use crate::incremental::EpochLog;
use crate::matchloss::{group_set_loss, LossCoeffs, Target};
use crate::model::Model;
use crate::optim::AdamW;
use crate::rng::Seed;
use crate::DetError;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Bump when the store layout changes; loads reject other versions.
pub const STORE_VERSION: u32 = 1;

/// One image's replay-candidacy score: the newest group's loss against
/// the image's own ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub image_id: usize,
    /// Phase of origin.
    pub phase: usize,
    pub risk: f64,
}

/// Scores every image of the phase dataset with the newest group's set
/// loss against that image's (phase-restricted) ground truth. Old classes
/// count as background to this group. Deterministic given the model.
pub fn risk_scores(
    model: &Model,
    corpus: &[Scene],
    dataset: &PhaseDataset,
    coeffs: &LossCoeffs,
) -> crate::Result<Vec<RiskRecord>> {
    let group = model
        .bank
        .groups
        .last()
        .ok_or_else(|| DetError::Config("risk scoring needs a trained group".into()))?;
    if group.index != dataset.phase {
        return Err(DetError::Config(format!(
            "newest group is {} but the dataset is phase {}",
            group.index, dataset.phase
        )));
    }
    let index = SceneIndex::new(corpus);
    let mut records = Vec::with_capacity(dataset.items.len());
    for item in &dataset.items {
        let image = index.get(item.image_id)?.rasterize();
        let mut g = Graph::new();
        let memory = model.encode(&mut g, &image)?;
        let pred = model.decode_group(&mut g, memory, group.index)?;
        let loss = group_set_loss(
            &mut g,
            group.index,
            &group.class_set,
            pred.class_logits,
            pred.boxes,
            &item.targets,
            coeffs,
        )?;
        let risk = g.value_scalar(loss);
        if !risk.is_finite() {
            return Err(DetError::NonFinite {
                context: format!("risk score for image {}", item.image_id),
            });
        }
        records.push(RiskRecord { image_id: item.image_id, phase: dataset.phase, risk });
    }
    Ok(records)
}

/// Sorts ascending by (risk, image id) and keeps the centered interval of
/// ranks ⌊(0.5−f/2)·n⌋ .. ⌊(0.5+f/2)·n⌋−1 — the moderate-risk middle.
/// Empty input yields an empty selection.
pub fn select_exemplars(
    records: &[RiskRecord],
    fraction: f64,
) -> crate::Result<Vec<RiskRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DetError::Config(format!("exemplar fraction {fraction} outside (0,1]")));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    if records.iter().any(|r| !r.risk.is_finite()) {
        return Err(DetError::Data("non-finite risk in selection input".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        a.risk
            .partial_cmp(&b.risk)
            .expect("finite risks")
            .then(a.image_id.cmp(&b.image_id))
    });
    let n = sorted.len() as f64;
    let lo = ((0.5 - fraction / 2.0) * n).floor() as usize;
    let hi = (((0.5 + fraction / 2.0) * n).floor() as usize).min(sorted.len());
    Ok(sorted[lo..hi].to_vec())
}

/// One stored exemplar: the image reference plus its origin-phase
/// annotations (and nothing else — supervision stays isolated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub image_id: usize,
    pub phase: usize,
    pub risk: f64,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseExemplars {
    pub phase: usize,
    pub class_set: Vec<usize>,
    pub exemplars: Vec<Exemplar>,
}

/// ε_1..ε_t: the merged exemplar manifest, persisted as JSON with a
/// version tag. References images by id; pixels stay in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub version: u32,
    pub phases: Vec<PhaseExemplars>,
}

impl Default for ExemplarStore {
    fn default() -> Self {
        Self { version: STORE_VERSION, phases: Vec::new() }
    }
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one phase's selection, pulling each exemplar's annotations
    /// from the phase dataset. Annotations outside the phase's class set
    /// are a contract violation.
    pub fn add_phase(
        &mut self,
        dataset: &PhaseDataset,
        selected: &[RiskRecord],
    ) -> crate::Result<()> {
        let mut exemplars = Vec::with_capacity(selected.len());
        for record in selected {
            let item = dataset
                .items
                .iter()
                .find(|i| i.image_id == record.image_id)
                .ok_or_else(|| {
                    DetError::Data(format!(
                        "selected image {} not in phase {} dataset",
                        record.image_id, dataset.phase
                    ))
                })?;
            exemplars.push(Exemplar {
                image_id: record.image_id,
                phase: dataset.phase,
                risk: record.risk,
                targets: item.targets.clone(),
            });
        }
        self.phases.push(PhaseExemplars {
            phase: dataset.phase,
            class_set: dataset.class_set.clone(),
            exemplars,
        });
        self.validate()
    }

    /// Re-checks the structural invariants: each exemplar's annotations
    /// stay inside its origin phase's class set.
    pub fn validate(&self) -> crate::Result<()> {
        for phase in &self.phases {
            for ex in &phase.exemplars {
                if ex.phase != phase.phase {
                    return Err(DetError::Data(format!(
                        "exemplar {} tagged phase {} stored under phase {}",
                        ex.image_id, ex.phase, phase.phase
                    )));
                }
                for t in &ex.targets {
                    if !phase.class_set.contains(&t.class) {
                        return Err(DetError::Data(format!(
                            "exemplar {} carries class {} outside phase {}'s set",
                            ex.image_id, t.class, phase.phase
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn total_exemplars(&self) -> usize {
        self.phases.iter().map(|p| p.exemplars.len()).sum()
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let store: Self = serde_json::from_str(&json)?;
        if store.version != STORE_VERSION {
            return Err(DetError::Data(format!(
                "exemplar store version {} unsupported (expected {STORE_VERSION})",
                store.version
            )));
        }
        store.validate()?;
        Ok(store)
    }
}

/// Fine-tunes on the merged store: every query group is unfrozen, all
/// parameters train, and each exemplar contributes only its origin
/// group's set loss against its stored annotations. An empty store
/// returns with the model untouched.
pub fn partial_calibration(
    model: &mut Model,
    corpus: &[Scene],
    store: &ExemplarStore,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    coeffs: &LossCoeffs,
    seed: Seed,
) -> crate::Result<Vec<EpochLog>> {
    store.validate()?;
    if store.total_exemplars() == 0 || epochs == 0 {
        return Ok(Vec::new());
    }
    // unfreeze everything, the queries included
    for group in &mut model.bank.groups {
        group.frozen = false;
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.set_requires_grad(id, true);
    }

    let flat: Vec<&Exemplar> =
        store.phases.iter().flat_map(|p| p.exemplars.iter()).collect();
    let index = SceneIndex::new(corpus);
    let n_groups = model.bank.groups.len();
    let current_phase = model.bank.groups.last().map(|g| g.index).unwrap_or(0);
    let mut opt = AdamW::new(lr);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.shuffle(&mut seed.derive("calibration-order").derive_index(epoch as u64).stream());

        let mut epoch_total = 0.0;
        let mut group_sums = vec![0.0; n_groups];
        let mut group_counts = vec![0usize; n_groups];
        for chunk in order.chunks(batch_size.max(1)) {
            let mut acc = Grads::default();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = flat[i];
                let image = index.get(ex.image_id)?.rasterize();
                let group = model
                    .bank
                    .groups
                    .iter()
                    .find(|g| g.index == ex.phase)
                    .ok_or_else(|| {
                        DetError::Config(format!("no query group for phase {}", ex.phase))
                    })?;
                let mut g = Graph::new();
                let memory = model.encode(&mut g, &image)?;
                let pred = model.decode_group(&mut g, memory, group.index)?;
                let loss = group_set_loss(
                    &mut g,
                    group.index,
                    &group.class_set,
                    pred.class_logits,
                    pred.boxes,
                    &ex.targets,
                    coeffs,
                )?;
                let value = g.value_scalar(loss);
                if !value.is_finite() {
                    return Err(DetError::NonFinite {
                        context: format!("calibration epoch {epoch}, image {}", ex.image_id),
                    });
                }
                epoch_total += value;
                group_sums[group.index - 1] += value;
                group_counts[group.index - 1] += 1;
                let grads = g.backward(loss);
                acc.accumulate(&grads, inv);
            }
            opt.step(&mut model.params, &acc);
        }
        logs.push(EpochLog {
            phase: current_phase,
            epoch,
            per_group_loss: group_sums
                .iter()
                .zip(&group_counts)
                .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect(),
            total_loss: epoch_total / flat.len() as f64,
        });
    }
    Ok(logs)
}
