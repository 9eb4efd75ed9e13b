//! Independent brute-force oracles used by the test suites.
//!
//! Everything here is deliberately written from first principles —
//! counting, enumeration, direct summation — and shares no code with the
//! implementations it cross-checks.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3};

/// IoU by counting sub-pixel grid cells inside each box over the joint
/// bounding region, at `res` cells per unit length.
pub fn pixel_grid_iou(a: &[f64; 4], b: &[f64; 4], res: usize) -> f64 {
    let x_min = a[0].min(b[0]);
    let x_max = a[2].max(b[2]);
    let y_min = a[1].min(b[1]);
    let y_max = a[3].max(b[3]);
    if x_max <= x_min || y_max <= y_min {
        return 0.0;
    }
    let nx = ((x_max - x_min) * res as f64).ceil() as usize + 1;
    let ny = ((y_max - y_min) * res as f64).ceil() as usize + 1;
    let dx = (x_max - x_min) / nx as f64;
    let dy = (y_max - y_min) / ny as f64;
    let mut inter = 0u64;
    let mut union = 0u64;
    for iy in 0..ny {
        let cy = y_min + (iy as f64 + 0.5) * dy;
        for ix in 0..nx {
            let cx = x_min + (ix as f64 + 0.5) * dx;
            let in_a = cx >= a[0] && cx <= a[2] && cy >= a[1] && cy <= a[3];
            let in_b = cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3];
            if in_a && in_b {
                inter += 1;
            }
            if in_a || in_b {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// GIoU assembled from the pixel-counting IoU plus directly measured
/// union/enclosing areas on the same grid.
pub fn pixel_grid_giou(a: &[f64; 4], b: &[f64; 4], res: usize) -> f64 {
    let iou = pixel_grid_iou(a, b, res);
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let inter_w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let inter_h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let union = area(a) + area(b) - inter_w * inter_h;
    let enclosing = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

/// Single-head softmax attention computed with plain loops:
/// `out[i] = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j`.
pub fn brute_force_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (n, d) = q.dim();
    let p = k.nrows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::<f64>::zeros((n, v.ncols()));
    for i in 0..n {
        let mut scores = vec![0.0f64; p];
        for j in 0..p {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[(i, c)] * k[(j, c)];
            }
            scores[j] = dot * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in scores.iter_mut() {
            *s /= total;
        }
        for (j, &w) in scores.iter().enumerate() {
            for c in 0..v.ncols() {
                out[(i, c)] += w * v[(j, c)];
            }
        }
    }
    out
}

/// Direct bilinear interpolation of `feat [h,w,c]` at one point with zero
/// padding outside the grid — the reference for RoI sampling.
pub fn bilinear_sample<T: Scalar>(feat: &Array3<T>, x: f64, y: f64) -> Array1<f64> {
    let (h, w, c) = feat.dim();
    let mut out = Array1::<f64>::zeros(c);
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let dx = x - x0 as f64;
    let dy = y - y0 as f64;
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1, dy)] {
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1, dx)] {
            if xx < 0 || xx >= w as isize {
                continue;
            }
            for ch in 0..c {
                out[ch] += wy * wx * feat[(yy as usize, xx as usize, ch)].to_f64();
            }
        }
    }
    out
}

/// Exhaustive best assignment (max total score) for small matrices,
/// used to validate the Hungarian solver. O(n!) — keep n <= 7.
pub fn brute_force_assignment(score: &Array2<f64>) -> (f64, Vec<Option<usize>>) {
    let n = score.nrows();
    let m = score.ncols();
    let mut best = (f64::NEG_INFINITY, vec![None; n]);
    let mut assigned = vec![None; n];
    let mut used = vec![false; m];
    fn recurse(
        i: usize,
        n: usize,
        m: usize,
        score: &Array2<f64>,
        assigned: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if i == n {
            let total: f64 = assigned
                .iter()
                .enumerate()
                .filter_map(|(r, c)| c.map(|c| score[(r, c)]))
                .sum();
            if total > best.0 {
                *best = (total, assigned.clone());
            }
            return;
        }
        // leave row i unassigned
        assigned[i] = None;
        recurse(i + 1, n, m, score, assigned, used, best);
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                assigned[i] = Some(j);
                recurse(i + 1, n, m, score, assigned, used, best);
                assigned[i] = None;
                used[j] = false;
            }
        }
    }
    recurse(0, n, m, score, &mut assigned, &mut used, &mut best);
    best
}

/// Success-AUC by an explicit sweep over the 21-point threshold grid.
/// Mirrors the documented boundary convention: strict `iou > tau`
/// everywhere except the top threshold, which uses `iou >= 1`.
pub fn success_auc_sweep(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for step in 0..=20 {
        let tau = step as f64 * 0.05;
        let hits = ious
            .iter()
            .filter(|&&v| if step == 20 { v >= 1.0 } else { v > tau })
            .count();
        acc += hits as f64 / ious.len() as f64;
    }
    acc / 21.0
}
