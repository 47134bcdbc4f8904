//! COCO-style average precision over merged multi-group predictions.
//!
//! Per class and IoU threshold: predictions are sorted by score
//! descending (ties broken by image id, then insertion order), each is
//! greedily matched to the highest-IoU unmatched ground-truth box of its
//! image at or above the threshold, and the resulting precision-recall
//! curve is summarized by 101-point interpolation. AP averages the ten
//! thresholds 0.50:0.05:0.95; AP50/AP75 read the fixed thresholds.
//! Classes without ground truth are excluded from means, matching the
//! reference evaluator. At most 100 highest-scoring detections per image
//! enter the evaluation.

use crate::data::Scene;
use crate::geom::{iou, BoxXyxy};
use crate::model::{AttentionMode, GroupPredictions, Model, QueryGroup};
use crate::DetError;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

const MAX_DETECTIONS_PER_IMAGE: usize = 100;

/// One merged prediction in normalized corner coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BoxXyxy,
}

/// One complete (test-time) annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: usize,
    pub class: usize,
    pub bbox: BoxXyxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// AP at each of [`IOU_THRESHOLDS`].
    pub per_threshold: Vec<f64>,
}

impl ClassAp {
    pub fn mean(&self) -> f64 {
        self.per_threshold.iter().sum::<f64>() / self.per_threshold.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Classes that appear in the ground truth, ascending.
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    /// Mean AP over a class subset; `None` when no subset class has
    /// ground truth.
    pub fn subset(&self, classes: &[usize]) -> Option<ApSummary> {
        let rows: Vec<&ClassAp> =
            self.per_class.iter().filter(|c| classes.contains(&c.class)).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(ApSummary {
            ap: rows.iter().map(|c| c.mean()).sum::<f64>() / n,
            ap50: rows.iter().map(|c| c.per_threshold[0]).sum::<f64>() / n,
            ap75: rows.iter().map(|c| c.per_threshold[5]).sum::<f64>() / n,
        })
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Flattens decoder outputs into per-(query, class) detections: each
/// query emits one detection per class in its group's set, scored by the
/// class's softmax probability.
pub fn detections_from_predictions(
    g: &crate::autodiff::Graph,
    groups: &[QueryGroup],
    preds: &[GroupPredictions],
    image_id: usize,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (pred, group) in preds.iter().zip(groups) {
        let k = group.class_set.len();
        let logits = g.value(pred.class_logits);
        let boxes = g.value(pred.boxes);
        for q in 0..pred.class_logits.rows() {
            let probs = softmax(&logits[q * (k + 1)..(q + 1) * (k + 1)]);
            let bbox = crate::geom::BoxCxCyWh {
                cx: boxes[q * 4],
                cy: boxes[q * 4 + 1],
                w: boxes[q * 4 + 2],
                h: boxes[q * 4 + 3],
            }
            .to_xyxy();
            for (slot, &class) in group.class_set.iter().enumerate() {
                out.push(Detection { image_id, class, score: probs[slot], bbox });
            }
        }
    }
    out
}

/// Runs the model over every scene and returns merged detections plus the
/// complete ground truth, both in normalized coordinates.
pub fn collect_detections(
    model: &Model,
    scenes: &[Scene],
) -> crate::Result<(Vec<Detection>, Vec<GtBox>)> {
    let mut detections = Vec::new();
    let mut gts = Vec::new();
    for scene in scenes {
        let image = scene.rasterize();
        let mut g = crate::autodiff::Graph::new();
        let (preds, _) = model.forward_all(&mut g, &image, AttentionMode::Disentangled)?;
        detections.extend(detections_from_predictions(
            &g,
            &model.bank.groups,
            &preds,
            scene.id,
        ));
        for t in scene.targets() {
            gts.push(GtBox { image_id: scene.id, class: t.class, bbox: t.bbox.to_xyxy() });
        }
    }
    Ok((detections, gts))
}

/// Keeps at most the 100 highest-scoring detections per image (ties by
/// class, then input order), preserving a deterministic global order.
fn cap_per_image(detections: &[Detection]) -> Vec<Detection> {
    let mut ids: Vec<usize> = detections.iter().map(|d| d.image_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut kept = Vec::with_capacity(detections.len());
    for id in ids {
        let mut per: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.image_id == id)
            .collect();
        per.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .expect("finite scores")
                .then(a.1.class.cmp(&b.1.class))
                .then(a.0.cmp(&b.0))
        });
        per.truncate(MAX_DETECTIONS_PER_IMAGE);
        per.sort_by_key(|(i, _)| *i);
        kept.extend(per.into_iter().map(|(_, d)| d.clone()));
    }
    kept
}

/// AP for one class at one IoU threshold; `None` when the class has no
/// ground truth.
fn ap_single(dets: &[&Detection], gts: &[&GtBox], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    if dets.is_empty() {
        return Some(0.0);
    }
    // score-descending global order, deterministic tie-break
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });
    let mut gt_matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &i in &order {
        let det = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if gt.image_id != det.image_id || gt_matched[j] {
                continue;
            }
            let overlap = iou(det.bbox, gt.bbox);
            if overlap >= threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((j, overlap));
            }
        }
        match best {
            Some((j, _)) => {
                gt_matched[j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // precision-recall and the 101-point interpolated mean
    let n_gt = gts.len() as f64;
    let mut cum_tp = 0.0;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (rank, &hit) in tp.iter().enumerate() {
        if hit {
            cum_tp += 1.0;
        }
        precision.push(cum_tp / (rank + 1) as f64);
        recall.push(cum_tp / n_gt);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|i| precision[i])
            .unwrap_or(0.0);
        total += p;
    }
    Some(total / 101.0)
}

/// Evaluates detections against complete ground truth over the listed
/// classes. Classes never seen in the ground truth are skipped in the
/// means; detections or annotations outside `classes` are an error.
pub fn evaluate(
    detections: &[Detection],
    gts: &[GtBox],
    classes: &[usize],
) -> crate::Result<EvalReport> {
    for d in detections {
        if !classes.contains(&d.class) {
            return Err(DetError::Data(format!("detection class {} unknown", d.class)));
        }
        if !d.score.is_finite() {
            return Err(DetError::NonFinite { context: format!("score on image {}", d.image_id) });
        }
    }
    for gt in gts {
        if !classes.contains(&gt.class) {
            return Err(DetError::Data(format!("annotation class {} unknown", gt.class)));
        }
    }
    let capped = cap_per_image(detections);

    let mut sorted_classes = classes.to_vec();
    sorted_classes.sort_unstable();
    sorted_classes.dedup();

    let mut per_class = Vec::new();
    for &class in &sorted_classes {
        let class_dets: Vec<&Detection> = capped.iter().filter(|d| d.class == class).collect();
        let class_gts: Vec<&GtBox> = gts.iter().filter(|g| g.class == class).collect();
        let per_threshold: Option<Vec<f64>> = IOU_THRESHOLDS
            .iter()
            .map(|&t| ap_single(&class_dets, &class_gts, t))
            .collect();
        if let Some(per_threshold) = per_threshold {
            per_class.push(ClassAp { class, per_threshold });
        }
    }
    let n = per_class.len() as f64;
    let (ap, ap50, ap75) = if per_class.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            per_class.iter().map(|c| c.mean()).sum::<f64>() / n,
            per_class.iter().map(|c| c.per_threshold[0]).sum::<f64>() / n,
            per_class.iter().map(|c| c.per_threshold[5]).sum::<f64>() / n,
        )
    };
    Ok(EvalReport { ap, ap50, ap75, per_class })
}

/// AP trajectory across incremental steps with old/new decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub after_phase: usize,
    pub overall: ApSummary,
    /// AP over each split's class set, in split order; `None` when the
    /// split has no ground truth in the evaluation set.
    pub per_split: Vec<Option<ApSummary>>,
    /// Classes of phases 1..t−1 (empty at t=1).
    pub old: Option<ApSummary>,
    /// Classes of phase t.
    pub new: Option<ApSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub splits: Vec<Vec<usize>>,
    pub rows: Vec<ForgettingRow>,
}

/// Decomposes one evaluation report per completed phase into per-split,
/// old-class, and new-class AP.
pub fn forgetting_report(splits: &[Vec<usize>], reports: &[EvalReport]) -> ForgettingReport {
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, report)| {
            let old_classes: Vec<usize> = splits[..i].iter().flatten().copied().collect();
            ForgettingRow {
                after_phase: i + 1,
                overall: ApSummary { ap: report.ap, ap50: report.ap50, ap75: report.ap75 },
                per_split: splits.iter().map(|s| report.subset(s)).collect(),
                old: if old_classes.is_empty() { None } else { report.subset(&old_classes) },
                new: report.subset(&splits[i]),
            }
        })
        .collect();
    ForgettingReport { splits: splits.to_vec(), rows }
}

/// Writes detections as line-delimited JSON records.
pub fn save_detections(path: &Path, detections: &[Detection]) -> crate::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in detections {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_detections(path: &Path) -> crate::Result<Vec<Detection>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
