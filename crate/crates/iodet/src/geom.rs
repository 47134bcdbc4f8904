//! Bounding boxes, IoU, and Generalized IoU.
//!
//! Two parallel implementations exist on purpose: plain `f64` functions
//! for matching costs and evaluation, and a graph-based path for the loss.
//! Both compose the same operations in the same order, so their values
//! agree to within rounding and the plain path can serve as the oracle
//! for the differentiable one.
//!
//! Degenerate-box conventions (synthetic data and early training hit
//! them): IoU of two zero-area boxes is 0; GIoU with a zero-area hull
//! (both boxes collapsed onto one point) is 0.

use crate::autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

/// Center/size box, normalized to [0,1] relative to the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box with `x0 ≤ x1`, `y0 ≤ y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCxCyWh {
    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
    }
}

impl BoxXyxy {
    pub fn to_cxcywh(self) -> BoxCxCyWh {
        BoxCxCyWh {
            cx: 0.5 * (self.x0 + self.x1),
            cy: 0.5 * (self.y0 + self.y1),
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Intersection over union, in [0,1]. Disjoint boxes give 0; so does a
/// zero-area union.
pub fn iou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU, in [-1,1]: `iou − (hull − union)/hull` where hull is
/// the smallest box enclosing both. Equals plain IoU exactly when the
/// union fills the hull (nested or identical boxes).
pub fn giou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let hw = a.x1.max(b.x1) - a.x0.min(b.x0);
    let hh = a.y1.max(b.y1) - a.y0.min(b.y0);
    let hull = hw * hh;
    if hull <= 0.0 {
        return 0.0;
    }
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (hull - union) / hull
}

/// Converts k×4 center/size rows to corner rows inside a graph. The map
/// is linear, so it is a single matmul with a constant matrix.
pub fn boxes_to_xyxy(g: &mut Graph, boxes: Tensor) -> Tensor {
    assert_eq!(boxes.cols(), 4, "boxes_to_xyxy: expected k x 4, got {}x{}", boxes.rows(), boxes.cols());
    #[rustfmt::skip]
    let m = g.constant(4, 4, vec![
        // x0   y0    x1   y1
         1.0,  0.0,  1.0,  0.0, // cx
         0.0,  1.0,  0.0,  1.0, // cy
        -0.5,  0.0,  0.5,  0.0, // w
         0.0, -0.5,  0.0,  0.5, // h
    ]);
    g.matmul(boxes, m)
}

/// Differentiable GIoU for k matched box pairs, both sides k×4 in corner
/// form; returns a k×1 column. Mirrors [`giou`] operation-for-operation.
///
/// Requires every pair's hull and union to have positive area — satisfied
/// in training because predicted widths/heights come out of a sigmoid and
/// are strictly positive. Gradients are undefined only where box edges
/// coincide exactly (min/max ties), a measure-zero set.
pub fn giou_pairs(g: &mut Graph, pred: Tensor, target: Tensor) -> Tensor {
    assert!(
        pred.rows() == target.rows() && pred.cols() == 4 && target.cols() == 4,
        "giou_pairs: incompatible shapes {}x{} and {}x{}",
        pred.rows(),
        pred.cols(),
        target.rows(),
        target.cols()
    );
    let [px0, py0, px1, py1] = split_coords(g, pred);
    let [tx0, ty0, tx1, ty1] = split_coords(g, target);

    let hx1 = g.max(px1, tx1);
    let hx0 = g.min(px0, tx0);
    let hw = g.sub(hx1, hx0);
    let hy1 = g.max(py1, ty1);
    let hy0 = g.min(py0, ty0);
    let hh = g.sub(hy1, hy0);
    let hull = g.mul(hw, hh);

    let ix1 = g.min(px1, tx1);
    let ix0 = g.max(px0, tx0);
    let iw_raw = g.sub(ix1, ix0);
    let iw = g.relu(iw_raw);
    let iy1 = g.min(py1, ty1);
    let iy0 = g.max(py0, ty0);
    let ih_raw = g.sub(iy1, iy0);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih);

    let pw = g.sub(px1, px0);
    let ph = g.sub(py1, py0);
    let area_p = g.mul(pw, ph);
    let tw = g.sub(tx1, tx0);
    let th = g.sub(ty1, ty0);
    let area_t = g.mul(tw, th);

    let areas = g.add(area_p, area_t);
    let union = g.sub(areas, inter);
    let iou = g.div(inter, union);
    let waste = g.sub(hull, union);
    let penalty = g.div(waste, hull);
    g.sub(iou, penalty)
}

fn split_coords(g: &mut Graph, boxes: Tensor) -> [Tensor; 4] {
    [
        g.gather_cols(boxes, &[0]),
        g.gather_cols(boxes, &[1]),
        g.gather_cols(boxes, &[2]),
        g.gather_cols(boxes, &[3]),
    ]
}
