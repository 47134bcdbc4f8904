//! Bipartite matching and the per-group set-prediction loss.
//!
//! Each query group is matched and supervised strictly against its own
//! targets: the assignment below never sees another group's predictions
//! or labels, which is what keeps supervision isolated across groups.
//!
//! The matching itself is discrete and treated as a constant during
//! backpropagation: costs are computed in plain `f64` outside the graph,
//! the optimal assignment is found, and only then is the differentiable
//! loss assembled at that fixed assignment.

use crate::autodiff::{Graph, Tensor};
use crate::geom::{boxes_to_xyxy, giou, giou_pairs, BoxCxCyWh};
use crate::DetError;
use serde::{Deserialize, Serialize};

/// A minimum-cost bipartite assignment. `pairs` holds
/// `(prediction index, target index)` sorted by prediction index, with
/// `min(#predictions, #targets)` entries; among all minimum-cost
/// assignments it is the lexicographically smallest pair list.
/// `total_cost` sums the pair costs in list order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Jonker-Volgenant shortest augmenting path on a dense r×c matrix with
/// r ≤ c. Returns the assigned column for every row. O(r²·c).
fn solve_rect(r: usize, c: usize, cost: &[f64]) -> Vec<usize> {
    debug_assert!(r <= c && cost.len() == r * c);
    let mut u = vec![0.0; r];
    let mut v = vec![0.0; c];
    let mut col4row = vec![usize::MAX; r];
    let mut row4col = vec![usize::MAX; c];
    let mut shortest = vec![0.0_f64; c];
    let mut path = vec![usize::MAX; c];
    let mut scanned_rows = vec![false; r];
    let mut scanned_cols = vec![false; c];

    for cur_row in 0..r {
        shortest.fill(f64::INFINITY);
        path.fill(usize::MAX);
        scanned_rows.fill(false);
        scanned_cols.fill(false);
        let mut min_val = 0.0;
        let mut i = cur_row;
        // Dijkstra over reduced costs until an unassigned column is reached.
        let sink = loop {
            scanned_rows[i] = true;
            let mut lowest = f64::INFINITY;
            let mut j_low = usize::MAX;
            for j in 0..c {
                if scanned_cols[j] {
                    continue;
                }
                let reduced = min_val + cost[i * c + j] - u[i] - v[j];
                if reduced < shortest[j] {
                    shortest[j] = reduced;
                    path[j] = i;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = shortest[j];
                    j_low = j;
                }
            }
            debug_assert!(lowest.is_finite(), "no augmenting path; costs must be finite");
            min_val = lowest;
            scanned_cols[j_low] = true;
            if row4col[j_low] == usize::MAX {
                break j_low;
            }
            i = row4col[j_low];
        };

        u[cur_row] += min_val;
        for i2 in 0..r {
            if scanned_rows[i2] && i2 != cur_row {
                u[i2] += min_val - shortest[col4row[i2]];
            }
        }
        for j in 0..c {
            if scanned_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row4col[j] = i;
            let freed = col4row[i];
            col4row[i] = j;
            if i == cur_row {
                break;
            }
            j = freed;
        }
    }
    col4row
}

/// Minimum-cost pairs over row/column index subsets of a full matrix,
/// returned sorted by row. Handles either side being the larger one.
fn optimal_pairs(rows_idx: &[usize], cols_idx: &[usize], cost: &[f64], stride: usize) -> Vec<(usize, usize)> {
    let (rn, cn) = (rows_idx.len(), cols_idx.len());
    if rn == 0 || cn == 0 {
        return Vec::new();
    }
    let mut pairs: Vec<(usize, usize)> = if rn <= cn {
        let sub: Vec<f64> = rows_idx
            .iter()
            .flat_map(|&ri| cols_idx.iter().map(move |&ci| cost[ri * stride + ci]))
            .collect();
        solve_rect(rn, cn, &sub)
            .iter()
            .enumerate()
            .map(|(i, &j)| (rows_idx[i], cols_idx[j]))
            .collect()
    } else {
        let sub: Vec<f64> = cols_idx
            .iter()
            .flat_map(|&ci| rows_idx.iter().map(move |&ri| cost[ri * stride + ci]))
            .collect();
        solve_rect(cn, rn, &sub)
            .iter()
            .enumerate()
            .map(|(j, &i)| (rows_idx[i], cols_idx[j]))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

fn pair_list_cost(pairs: &[(usize, usize)], cost: &[f64], stride: usize) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * stride + c]).sum()
}

/// Minimum-total-cost assignment of `min(rows, cols)` pairs for a dense
/// row-major cost matrix. Ties between equally cheap assignments are
/// broken by the lexicographically smallest pair list: the leading pair
/// is fixed to the smallest (row, column) that still reaches the optimum,
/// then the next, each time re-solving the remainder.
pub fn hungarian(rows: usize, cols: usize, cost: &[f64]) -> Assignment {
    assert_eq!(cost.len(), rows * cols, "hungarian: cost matrix is {}x{} but holds {} entries", rows, cols, cost.len());
    assert!(cost.iter().all(|x| x.is_finite()), "hungarian: costs must be finite");
    let k = rows.min(cols);
    if k == 0 {
        return Assignment { pairs: Vec::new(), total_cost: 0.0 };
    }

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut avail_cols: Vec<usize> = (0..cols).collect();
    let mut min_row = 0;
    for pos in 0..k {
        let need = k - pos;
        let mut best: Option<(f64, usize, usize)> = None;
        // Pair lists are sorted by row, so the pair at this position uses a
        // row after every fixed one, leaving enough rows for the rest.
        for r0 in min_row..=(rows - need) {
            let rem_rows: Vec<usize> = (r0 + 1..rows).collect();
            for &c0 in &avail_cols {
                let rem_cols: Vec<usize> = avail_cols.iter().copied().filter(|&c| c != c0).collect();
                let completion = optimal_pairs(&rem_rows, &rem_cols, cost, cols);
                let mut total = pair_list_cost(&pairs, cost, cols);
                total += cost[r0 * cols + c0];
                total += pair_list_cost(&completion, cost, cols);
                if best.map_or(true, |(t, _, _)| total < t) {
                    best = Some((total, r0, c0));
                }
            }
        }
        let (_, r0, c0) = best.expect("at least one candidate per position");
        pairs.push((r0, c0));
        avail_cols.retain(|&c| c != c0);
        min_row = r0 + 1;
    }
    let total_cost = pair_list_cost(&pairs, cost, cols);
    Assignment { pairs, total_cost }
}

/// Coefficients of the matching cost and loss. `lambda_cls` only enters
/// the matching cost; the classification part of the loss is the plain
/// weighted cross-entropy with `eos_coef` down-weighting the no-object
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoeffs {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub eos_coef: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        LossCoeffs { lambda_cls: 1.0, lambda_l1: 5.0, lambda_giou: 2.0, eos_coef: 0.1 }
    }
}

/// One supervision target: a class id (from the owning group's class set)
/// and a normalized center/size box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bbox: BoxCxCyWh,
}

/// Matching cost matrix (n predictions × m targets) in plain floats:
/// `λ_cls·(1−p(class)) + λ_L1·‖box−box‖₁ + λ_giou·(1−giou)`, with the
/// probability taken from a softmax over all `k+1` logits and the L1
/// distance in center/size coordinates.
pub fn matching_cost(
    n: usize,
    k: usize,
    logits: &[f64],
    boxes: &[f64],
    slot_targets: &[(usize, BoxCxCyWh)],
    coeffs: &LossCoeffs,
) -> Vec<f64> {
    debug_assert_eq!(logits.len(), n * (k + 1));
    debug_assert_eq!(boxes.len(), n * 4);
    let m = slot_targets.len();
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        let row = &logits[i * (k + 1)..(i + 1) * (k + 1)];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        let pred = BoxCxCyWh {
            cx: boxes[i * 4],
            cy: boxes[i * 4 + 1],
            w: boxes[i * 4 + 2],
            h: boxes[i * 4 + 3],
        };
        let pred_xy = pred.to_xyxy();
        for (j, &(slot, tb)) in slot_targets.iter().enumerate() {
            let p = (row[slot] - mx).exp() / denom;
            let l1 = (pred.cx - tb.cx).abs()
                + (pred.cy - tb.cy).abs()
                + (pred.w - tb.w).abs()
                + (pred.h - tb.h).abs();
            let gi = giou(pred_xy, tb.to_xyxy());
            cost[i * m + j] =
                coeffs.lambda_cls * (1.0 - p) + coeffs.lambda_l1 * l1 + coeffs.lambda_giou * (1.0 - gi);
        }
    }
    cost
}

/// The set loss at a fixed assignment: weighted cross-entropy over all
/// predictions (matched ones against their target class, the rest against
/// no-object, down-weighted by `eos_coef`) plus `λ_L1·L1` and
/// `λ_giou·(1−giou)` averaged over the matched pairs. With no pairs the
/// box terms vanish and the loss is pure no-object cross-entropy.
///
/// The assignment is an input, not a result: holding it fixed is what
/// makes the loss differentiable, and lets gradient checks perturb the
/// predictions without the discrete matching jumping underneath them.
pub fn set_loss_at_assignment(
    g: &mut Graph,
    class_logits: Tensor,
    boxes: Tensor,
    slot_targets: &[(usize, BoxCxCyWh)],
    pairs: &[(usize, usize)],
    coeffs: &LossCoeffs,
) -> Tensor {
    let n = class_logits.rows();
    let k = class_logits.cols() - 1;
    assert_eq!(boxes.rows(), n, "set_loss_at_assignment: incompatible shapes {}x{} and {}x{}", n, k + 1, boxes.rows(), boxes.cols());

    let mut target_slot = vec![k; n]; // default: no-object
    for &(pi, tj) in pairs {
        target_slot[pi] = slot_targets[tj].0;
    }
    let weights: Vec<f64> =
        target_slot.iter().map(|&t| if t == k { coeffs.eos_coef } else { 1.0 }).collect();
    let weight_sum: f64 = weights.iter().sum();
    let entries: Vec<(usize, usize)> = target_slot.iter().enumerate().map(|(i, &t)| (i, t)).collect();

    let logp = g.log_softmax_rows(class_logits);
    let picked = g.gather_entries(logp, &entries);
    let w = g.constant(n, 1, weights);
    let weighted = g.mul(picked, w);
    let summed = g.sum_all(weighted);
    let ce = g.scale(summed, -1.0 / weight_sum);

    if pairs.is_empty() {
        return ce;
    }
    let m = pairs.len() as f64;
    let pred_rows: Vec<usize> = pairs.iter().map(|&(pi, _)| pi).collect();
    let matched = g.gather_rows(boxes, &pred_rows);
    let tgt_data: Vec<f64> = pairs
        .iter()
        .flat_map(|&(_, tj)| {
            let b = slot_targets[tj].1;
            [b.cx, b.cy, b.w, b.h]
        })
        .collect();
    let tgt = g.constant(pairs.len(), 4, tgt_data);

    let diff = g.sub(matched, tgt);
    let abs_diff = g.abs(diff);
    let l1_sum = g.sum_all(abs_diff);
    let l1 = g.scale(l1_sum, coeffs.lambda_l1 / m);

    let matched_xy = boxes_to_xyxy(g, matched);
    let tgt_xy = boxes_to_xyxy(g, tgt);
    let gi = giou_pairs(g, matched_xy, tgt_xy);
    let neg_gi = g.neg(gi);
    let one_minus = g.add_scalar(neg_gi, 1.0);
    let gi_sum = g.sum_all(one_minus);
    let gterm = g.scale(gi_sum, coeffs.lambda_giou / m);

    let partial = g.add(ce, l1);
    g.add(partial, gterm)
}

/// Per-group set loss: validates that every target's class belongs to the
/// group's class set, finds the minimum-cost matching, and returns the
/// differentiable loss at that matching. `group` is only used to label
/// the error when a foreign class shows up — that always indicates a
/// protocol or labeling bug upstream.
pub fn group_set_loss(
    g: &mut Graph,
    group: usize,
    class_set: &[usize],
    class_logits: Tensor,
    boxes: Tensor,
    targets: &[Target],
    coeffs: &LossCoeffs,
) -> crate::Result<Tensor> {
    let n = class_logits.rows();
    let k = class_set.len();
    assert_eq!(
        class_logits.cols(),
        k + 1,
        "group_set_loss: incompatible shapes {}x{} and class set of {}",
        n,
        class_logits.cols(),
        k
    );
    let slot_targets: Vec<(usize, BoxCxCyWh)> = targets
        .iter()
        .map(|t| {
            class_set
                .iter()
                .position(|&c| c == t.class)
                .map(|slot| (slot, t.bbox))
                .ok_or(DetError::TargetOutsideClassSet { group, class: t.class })
        })
        .collect::<crate::Result<_>>()?;

    let cost = matching_cost(n, k, g.value(class_logits), g.value(boxes), &slot_targets, coeffs);
    let assignment = hungarian(n, slot_targets.len(), &cost);
    Ok(set_loss_at_assignment(g, class_logits, boxes, &slot_targets, &assignment.pairs, coeffs))
}

/// Per-group weights of the total loss: `w_τ = |C_τ| / |C_{1:t}|`, which
/// sum to 1 by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub weights: Vec<f64>,
}

impl LossWeights {
    pub fn from_counts(class_counts: &[usize]) -> Self {
        let total: usize = class_counts.iter().sum();
        assert!(total > 0, "from_counts: no classes");
        LossWeights {
            weights: class_counts.iter().map(|&c| c as f64 / total as f64).collect(),
        }
    }
}

/// Weighted sum of per-group losses: `Σ w_τ · L_τ`.
pub fn total_loss(g: &mut Graph, losses: &[Tensor], weights: &LossWeights) -> Tensor {
    assert_eq!(
        losses.len(),
        weights.weights.len(),
        "total_loss: {} losses but {} weights",
        losses.len(),
        weights.weights.len()
    );
    assert!(!losses.is_empty(), "total_loss: no losses");
    let mut acc = g.scale(losses[0], weights.weights[0]);
    for (&l, &w) in losses[1..].iter().zip(&weights.weights[1..]) {
        let term = g.scale(l, w);
        acc = g.add(acc, term);
    }
    acc
}
