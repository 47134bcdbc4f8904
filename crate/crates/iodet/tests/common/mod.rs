//! Independent reference implementations used to cross-check the
//! library: an exhaustive assignment solver and a from-the-definition
//! average-precision computation. Both are deliberately written on
//! different lines from the production code — no shared helpers — so a
//! bug has to be made twice to slip through.

use iodet::eval::{Detection, GtBox};
use iodet::geom::iou;

/// Exhaustive minimum-cost assignment for `rows <= cols`: every row is
/// matched to a distinct column. Enumerates candidate pair lists in
/// lexicographic order and keeps the first strictly cheapest one, so tie
/// handling (lexicographically smallest pair list) and the list-order
/// cost summation match the production solver's documented contract.
pub fn exhaustive_assignment(rows: usize, cols: usize, cost: &[f64]) -> (Vec<(usize, usize)>, f64) {
    assert!(rows <= cols, "reference solver expects rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    let mut used = vec![false; cols];
    let mut current = Vec::with_capacity(rows);
    let mut best: Option<(Vec<(usize, usize)>, f64)> = None;
    search(rows, cols, cost, 0, &mut used, &mut current, &mut best);
    best.expect("at least one assignment exists")
}

fn search(
    rows: usize,
    cols: usize,
    cost: &[f64],
    row: usize,
    used: &mut Vec<bool>,
    current: &mut Vec<(usize, usize)>,
    best: &mut Option<(Vec<(usize, usize)>, f64)>,
) {
    if row == rows {
        // sum in pair-list order, exactly as the contract states
        let total: f64 = current.iter().map(|&(r, c)| cost[r * cols + c]).sum();
        match best {
            Some((_, cheapest)) if total >= *cheapest => {}
            _ => *best = Some((current.clone(), total)),
        }
        return;
    }
    for col in 0..cols {
        if used[col] {
            continue;
        }
        used[col] = true;
        current.push((row, col));
        search(rows, cols, cost, row + 1, used, current, best);
        current.pop();
        used[col] = false;
    }
}

/// Average precision for one class at one IoU threshold, computed
/// directly from the definition: sort by score (descending, ties by
/// image id then input order), re-run the greedy highest-IoU matching
/// from scratch for every prefix length, and take the 101-point mean of
/// the best precision at or beyond each recall level. Quadratic and
/// proud of it.
pub fn definition_ap(dets: &[Detection], gts: &[GtBox], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });

    // matched count when only the first `k` detections exist
    let matched_in_prefix = |k: usize| -> usize {
        let mut taken = vec![false; gts.len()];
        let mut hits = 0;
        for &i in &order[..k] {
            let det = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] || gt.image_id != det.image_id {
                    continue;
                }
                let overlap = iou(det.bbox, gt.bbox);
                if overlap >= threshold && best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((j, overlap));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                hits += 1;
            }
        }
        hits
    };

    let n_gt = gts.len() as f64;
    let mut points = Vec::with_capacity(dets.len());
    for k in 1..=dets.len() {
        let hits = matched_in_prefix(k) as f64;
        points.push((hits / n_gt, hits / k as f64));
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let level = step as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall >= level - 1e-12)
            .map(|(_, precision)| *precision)
            .fold(0.0_f64, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

/// Mean of [`definition_ap`] over the ten standard IoU thresholds.
pub fn definition_ap_mean(dets: &[Detection], gts: &[GtBox]) -> Option<f64> {
    let per: Option<Vec<f64>> = iodet::eval::IOU_THRESHOLDS
        .iter()
        .map(|&t| definition_ap(dets, gts, t))
        .collect();
    per.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}
