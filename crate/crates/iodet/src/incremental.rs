//! Phase orchestration: pseudo-label generation from the previous-phase
//! snapshot, query expansion and freezing, and decoupled-loss training.
//!
//! In phase t the model grows a new query group for C_t. Each old group
//! τ < t is supervised by pseudo labels — its own confident predictions on
//! the current images, produced by the frozen end-of-phase-(t−1) snapshot
//! and filtered by a score threshold θ_p and an IoU threshold θ_IoU
//! against new-class ground truth. The new group is supervised by the
//! ground truth alone. Per-group set losses are combined with weights
//! |C_τ|/|C_{1:t}|.

use crate::autodiff::{Grads, Graph};
use crate::data::{PhaseDataset, Scene, SceneIndex};
use crate::geom::iou;
use crate::matchloss::{group_set_loss, total_loss, LossCoeffs, LossWeights, Target};
use crate::model::{AttentionMode, Model};
use crate::optim::AdamW;
use crate::rng::Seed;
use crate::DetError;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Traditional,
    Revised,
}

/// The full incremental schedule: which classes arrive when, and the
/// thresholds/budgets shared by every phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    /// C_1..C_T as explicit ordered, disjoint class sets.
    pub splits: Vec<Vec<usize>>,
    pub protocol: Protocol,
    pub epochs: usize,
    pub calibration_epochs: usize,
    /// Pseudo-label score threshold θ_p.
    pub theta_p: f64,
    /// Pseudo-label IoU threshold θ_IoU against new-class ground truth.
    pub theta_iou: f64,
    /// Per-phase exemplar budget fraction.
    pub exemplar_fraction: f64,
    pub seed: u64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            splits: Vec::new(),
            protocol: Protocol::Revised,
            epochs: 8,
            calibration_epochs: 2,
            theta_p: 0.4,
            theta_iou: 0.7,
            exemplar_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PhasePlan {
    /// Checks that the splits are disjoint and cover `0..n_classes`, and
    /// that thresholds and budget lie in their documented ranges.
    pub fn validate(&self, n_classes: usize) -> crate::Result<()> {
        if self.splits.is_empty() {
            return Err(DetError::Config("plan needs at least one phase".into()));
        }
        let mut all: Vec<usize> = self.splits.iter().flatten().copied().collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..n_classes).collect();
        if all != expected {
            return Err(DetError::Config(format!(
                "class splits must partition 0..{n_classes}, got {all:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.theta_p) || self.theta_p == 0.0 {
            return Err(DetError::Config(format!("theta_p {} outside (0,1)", self.theta_p)));
        }
        if !(0.0..1.0).contains(&self.theta_iou) || self.theta_iou == 0.0 {
            return Err(DetError::Config(format!("theta_iou {} outside (0,1)", self.theta_iou)));
        }
        if !(0.0..=1.0).contains(&self.exemplar_fraction) {
            return Err(DetError::Config(format!(
                "exemplar fraction {} outside [0,1]",
                self.exemplar_fraction
            )));
        }
        Ok(())
    }
}

/// Which tensors may move during a phase. `QueriesOnly` is the production
/// behavior (old-group embeddings freeze, everything else trains).
/// `Strict` additionally freezes all shared weights and old heads, so old
/// groups' outputs are provably constant — used by the invariant suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMode {
    QueriesOnly,
    Strict,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub coeffs: LossCoeffs,
    pub freeze: FreezeMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            coeffs: LossCoeffs::default(),
            freeze: FreezeMode::QueriesOnly,
        }
    }
}

/// One retained old-class prediction used as supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    pub bbox: crate::geom::BoxCxCyWh,
    pub score: f64,
}

/// Pseudo labels for one image, grouped by the old group that predicted
/// them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub per_group: Vec<(usize, Vec<PseudoLabel>)>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Runs the previous-phase snapshot on an image and keeps, per group, the
/// predictions whose best non-background probability reaches `theta_p`
/// and which do not overlap any new-class ground-truth box with IoU ≥
/// `theta_iou`. The retained class is the argmax class.
pub fn generate_pseudo_labels(
    old_model: &Model,
    image: &[f64],
    new_gt: &[Target],
    theta_p: f64,
    theta_iou: f64,
) -> crate::Result<PseudoLabelSet> {
    let mut g = Graph::new();
    let (preds, _) = old_model.forward_all(&mut g, image, AttentionMode::Disentangled)?;
    let gt_xyxy: Vec<_> = new_gt.iter().map(|t| t.bbox.to_xyxy()).collect();

    let mut per_group = Vec::with_capacity(preds.len());
    for (pred, group) in preds.iter().zip(&old_model.bank.groups) {
        let k = group.class_set.len();
        let logits = g.value(pred.class_logits);
        let boxes = g.value(pred.boxes);
        let n = pred.class_logits.rows();
        let mut labels = Vec::new();
        for i in 0..n {
            let probs = softmax(&logits[i * (k + 1)..(i + 1) * (k + 1)]);
            let (best, &score) = probs[..k]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .expect("non-empty class set");
            if score < theta_p {
                continue;
            }
            let bbox = crate::geom::BoxCxCyWh {
                cx: boxes[i * 4],
                cy: boxes[i * 4 + 1],
                w: boxes[i * 4 + 2],
                h: boxes[i * 4 + 3],
            };
            let own = bbox.to_xyxy();
            if gt_xyxy.iter().any(|gt| iou(own, *gt) >= theta_iou) {
                continue;
            }
            labels.push(PseudoLabel { class: group.class_set[best], bbox, score });
        }
        per_group.push((group.index, labels));
    }
    Ok(PseudoLabelSet { per_group })
}

/// One image's supervision: pixel buffer plus targets for every group in
/// bank order.
pub struct TrainExample {
    pub image: Vec<f64>,
    pub targets_per_group: Vec<Vec<Target>>,
}

/// Per-batch loss breakdown (means over the batch).
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    pub per_group: Vec<f64>,
}

/// One optimizer step on a minibatch: per-image forward, per-group set
/// losses combined with |C_τ|/|C_{1:t}| weights, gradients averaged over
/// the batch. Fails on a non-finite loss, naming `context`.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[TrainExample],
    coeffs: &LossCoeffs,
    context: &str,
) -> crate::Result<BatchLoss> {
    assert!(!batch.is_empty(), "empty training batch");
    let groups = model.bank.groups.clone();
    let counts: Vec<usize> = groups.iter().map(|grp| grp.class_set.len()).collect();
    let weights = LossWeights::from_counts(&counts);

    let mut acc = Grads::default();
    let mut total = 0.0;
    let mut per_group = vec![0.0; groups.len()];
    let inv = 1.0 / batch.len() as f64;
    for example in batch {
        assert_eq!(example.targets_per_group.len(), groups.len(), "targets must cover every group");
        let mut g = Graph::new();
        let (preds, _) = model.forward_all(&mut g, &example.image, AttentionMode::Disentangled)?;
        let mut losses = Vec::with_capacity(groups.len());
        for ((pred, group), targets) in preds.iter().zip(&groups).zip(&example.targets_per_group) {
            let loss = group_set_loss(
                &mut g,
                group.index,
                &group.class_set,
                pred.class_logits,
                pred.boxes,
                targets,
                coeffs,
            )?;
            losses.push(loss);
        }
        let image_total = total_loss(&mut g, &losses, &weights);
        let value = g.value_scalar(image_total);
        if !value.is_finite() {
            return Err(DetError::NonFinite { context: context.to_string() });
        }
        total += value * inv;
        for (slot, loss) in per_group.iter_mut().zip(&losses) {
            *slot += g.value_scalar(*loss) * inv;
        }
        let grads = g.backward(image_total);
        acc.accumulate(&grads, inv);
    }
    opt.step(&mut model.params, &acc);
    Ok(BatchLoss { total, per_group })
}

/// One epoch's training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: usize,
    pub epoch: usize,
    pub per_group_loss: Vec<f64>,
    pub total_loss: f64,
}

fn apply_freeze_mode(model: &mut Model, mode: FreezeMode) {
    let new_group = model.bank.groups.len();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let trainable = match mode {
            FreezeMode::QueriesOnly => match query_group_of(&name) {
                Some(g) => g == new_group,
                None => true,
            },
            FreezeMode::Strict => {
                name == format!("query.g{new_group}")
                    || name.starts_with(&format!("head.cls.g{new_group}."))
            }
        };
        model.params.set_requires_grad(id, trainable);
    }
}

fn query_group_of(name: &str) -> Option<usize> {
    name.strip_prefix("query.g")?.parse().ok()
}

/// Trains phase `t` on `dataset`: snapshots the incoming model as Φ_old,
/// expands the query bank for the phase's classes, freezes old groups,
/// and runs the epoch/minibatch loop where old groups learn from pseudo
/// labels regenerated from Φ_old and the new group learns from ground
/// truth. Returns per-epoch logs.
pub fn run_incremental_step(
    model: &mut Model,
    corpus: &[Scene],
    dataset: &PhaseDataset,
    plan: &PhasePlan,
    settings: &TrainSettings,
) -> crate::Result<Vec<EpochLog>> {
    let t = dataset.phase;
    if model.bank.groups.len() + 1 != t {
        return Err(DetError::Config(format!(
            "model holds {} groups, cannot train phase {t}",
            model.bank.groups.len()
        )));
    }
    let snapshot = if t > 1 {
        Some(model.clone())
    } else {
        None
    };
    model.expand_queries(&dataset.class_set)?;
    apply_freeze_mode(model, settings.freeze);

    let index = SceneIndex::new(corpus);

    // The snapshot is frozen, so its predictions — and therefore each
    // image's pseudo labels — are constant across epochs: rasterize and
    // label every item once up front.
    let mut prepared: Vec<(Vec<f64>, Vec<Vec<Target>>)> = Vec::with_capacity(dataset.items.len());
    for item in &dataset.items {
        let image = index.get(item.image_id)?.rasterize();
        let mut targets_per_group = Vec::with_capacity(model.bank.groups.len());
        if let Some(old) = &snapshot {
            let pseudo =
                generate_pseudo_labels(old, &image, &item.targets, plan.theta_p, plan.theta_iou)?;
            for (_, labels) in pseudo.per_group {
                targets_per_group.push(
                    labels.into_iter().map(|l| Target { class: l.class, bbox: l.bbox }).collect(),
                );
            }
        }
        targets_per_group.push(item.targets.clone());
        prepared.push((image, targets_per_group));
    }

    let mut opt = AdamW::new(settings.lr);
    let mut logs = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        opt.lr = crate::optim::epoch_lr(settings.lr, epoch, plan.epochs);
        let mut order: Vec<usize> = (0..dataset.items.len()).collect();
        order.shuffle(
            &mut Seed::new(plan.seed)
                .derive("epoch-order")
                .derive_index(t as u64)
                .derive_index(epoch as u64)
                .stream(),
        );

        let mut epoch_total = 0.0;
        let mut epoch_groups = vec![0.0; model.bank.groups.len()];
        let mut seen = 0usize;
        for chunk in order.chunks(settings.batch_size.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (image, targets_per_group) = &prepared[i];
                batch.push(TrainExample {
                    image: image.clone(),
                    targets_per_group: targets_per_group.clone(),
                });
            }
            let context = format!("phase {t} epoch {epoch}");
            let loss = train_step(model, &mut opt, &batch, &settings.coeffs, &context)?;
            epoch_total += loss.total * batch.len() as f64;
            for (slot, v) in epoch_groups.iter_mut().zip(&loss.per_group) {
                *slot += v * batch.len() as f64;
            }
            seen += batch.len();
        }
        let scale = 1.0 / seen.max(1) as f64;
        logs.push(EpochLog {
            phase: t,
            epoch,
            per_group_loss: epoch_groups.iter().map(|v| v * scale).collect(),
            total_loss: epoch_total * scale,
        });
    }
    Ok(logs)
}
