//! Differentiable counterparts of the box operations, composed from
//! autodiff primitives so the backward pass comes for free.

use crate::autodiff::{Graph, Var};
use crate::scalar::{real, Scalar};
use ndarray::{ArrayD, IxDyn};

fn col<T: Scalar>(g: &mut Graph<T>, boxes: Var, j: usize) -> Var {
    g.slice(boxes, 1, j, j + 1)
}

/// Row-paired generalized IoU of `[n,4]` box tensors, shape `[n]`.
///
/// Assumes at least one box of every pair has positive area (true for
/// losses against valid ground truth), so no epsilon is needed in the
/// union or enclosing-area denominators.
pub fn giou_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let n = g.value(a).shape()[0];
    let (ax1, ay1, ax2, ay2) = (col(g, a, 0), col(g, a, 1), col(g, a, 2), col(g, a, 3));
    let (bx1, by1, bx2, by2) = (col(g, b, 0), col(g, b, 1), col(g, b, 2), col(g, b, 3));

    let ix1 = g.maximum(ax1, bx1);
    let iy1 = g.maximum(ay1, by1);
    let ix2 = g.minimum(ax2, bx2);
    let iy2 = g.minimum(ay2, by2);
    let iw_raw = g.sub(ix2, ix1);
    let iw = g.relu(iw_raw);
    let ih_raw = g.sub(iy2, iy1);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih);

    let aw = g.sub(ax2, ax1);
    let ah = g.sub(ay2, ay1);
    let area_a = g.mul(aw, ah);
    let bw = g.sub(bx2, bx1);
    let bh = g.sub(by2, by1);
    let area_b = g.mul(bw, bh);
    let sum_areas = g.add(area_a, area_b);
    let union = g.sub(sum_areas, inter);
    let iou = g.div(inter, union);

    let cx1 = g.minimum(ax1, bx1);
    let cy1 = g.minimum(ay1, by1);
    let cx2 = g.maximum(ax2, bx2);
    let cy2 = g.maximum(ay2, by2);
    let cw = g.sub(cx2, cx1);
    let ch = g.sub(cy2, cy1);
    let enclosing = g.mul(cw, ch);
    let hole = g.sub(enclosing, union);
    let penalty = g.div(hole, enclosing);
    let giou = g.sub(iou, penalty);
    g.reshape(giou, &[n])
}

/// Expected corner coordinates of channel-major heatmaps `[n, 2, h*w]`
/// (already normalized), min/max-ordered, shape `[n, 4]` in the feature
/// frame.
pub fn soft_argmax_graph<T: Scalar>(g: &mut Graph<T>, heat: Var, h: usize, w: usize) -> Var {
    let hw = h * w;
    debug_assert_eq!(g.value(heat).shape(), &[g.value(heat).shape()[0], 2, hw]);
    let mut gx = ArrayD::<T>::zeros(IxDyn(&[hw]));
    let mut gy = ArrayD::<T>::zeros(IxDyn(&[hw]));
    for p in 0..hw {
        gx[p] = real((p % w) as f64);
        gy[p] = real((p / w) as f64);
    }
    let gx = g.constant(gx);
    let gy = g.constant(gy);

    let h0 = g.slice(heat, 1, 0, 1);
    let h1 = g.slice(heat, 1, 1, 2);
    let expect = |g: &mut Graph<T>, ch: Var, grid: Var| {
        let weighted = g.mul(ch, grid);
        g.sum_axis(weighted, 2, false) // [n, 1]
    };
    let x_tl = expect(g, h0, gx);
    let y_tl = expect(g, h0, gy);
    let x_br = expect(g, h1, gx);
    let y_br = expect(g, h1, gy);

    let x1 = g.minimum(x_tl, x_br);
    let y1 = g.minimum(y_tl, y_br);
    let x2 = g.maximum(x_tl, x_br);
    let y2 = g.maximum(y_tl, y_br);
    g.concat(1, &[x1, y1, x2, y2])
}

/// Differentiable center/log-size delta application, `[n,4]` each.
/// Zero deltas reproduce the proposals exactly (see the plain codec).
pub fn apply_deltas_graph<T: Scalar>(g: &mut Graph<T>, proposals: Var, deltas: Var) -> Var {
    let half = real::<T>(0.5);
    let neg_one = -T::one();
    let (px1, py1, px2, py2) = (
        col(g, proposals, 0),
        col(g, proposals, 1),
        col(g, proposals, 2),
        col(g, proposals, 3),
    );
    let (dx, dy, dw, dh) = (
        col(g, deltas, 0),
        col(g, deltas, 1),
        col(g, deltas, 2),
        col(g, deltas, 3),
    );
    let w = g.sub(px2, px1);
    let h = g.sub(py2, py1);
    let ew = g.exp(dw);
    let eh = g.exp(dh);
    let ew_m1 = g.add_scalar(ew, neg_one);
    let eh_m1 = g.add_scalar(eh, neg_one);
    let half_ew_m1 = g.scale(ew_m1, half);
    let half_eh_m1 = g.scale(eh_m1, half);
    let neg_half_ew = g.neg(half_ew_m1);
    let neg_half_eh = g.neg(half_eh_m1);

    let tx1 = g.add(dx, neg_half_ew);
    let tx2 = g.add(dx, half_ew_m1);
    let ty1 = g.add(dy, neg_half_eh);
    let ty2 = g.add(dy, half_eh_m1);

    let sx1 = g.mul(w, tx1);
    let sx2 = g.mul(w, tx2);
    let sy1 = g.mul(h, ty1);
    let sy2 = g.mul(h, ty2);

    let x1 = g.add(px1, sx1);
    let x2 = g.add(px2, sx2);
    let y1 = g.add(py1, sy1);
    let y2 = g.add(py2, sy2);
    g.concat(1, &[x1, y1, x2, y2])
}

/// Box centers `[n,2]` of an `[n,4]` corner tensor.
pub fn box_centers_graph<T: Scalar>(g: &mut Graph<T>, boxes: Var) -> Var {
    let half = real::<T>(0.5);
    let (x1, y1, x2, y2) = (
        col(g, boxes, 0),
        col(g, boxes, 1),
        col(g, boxes, 2),
        col(g, boxes, 3),
    );
    let sx = g.add(x1, x2);
    let sy = g.add(y1, y2);
    let cx = g.scale(sx, half);
    let cy = g.scale(sy, half);
    g.concat(1, &[cx, cy])
}

/// Mean absolute difference over all elements, shape `[]`.
pub fn l1_mean_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean_all(ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_rel_err, Graph};
    use crate::geometry::{apply_deltas, giou, soft_argmax_box, BoxSet, Frame, HeatmapPair};
    use ndarray::{Array2, Array3, ArrayD, IxDyn};

    #[test]
    fn giou_graph_matches_plain_and_finite_differences() {
        let a_rows = [[0.3, 0.7, 4.2, 5.1], [1.0, 1.0, 3.0, 3.0]];
        let b_rows = [[1.1, 0.2, 5.3, 4.4], [4.0, 4.0, 6.5, 7.0]];
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 4]), a_rows.concat()).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2, 4]), b_rows.concat()).unwrap();

        let mut g = Graph::<f64>::new();
        let av = g.leaf(a.clone());
        let bv = g.constant(b.clone());
        let gi = giou_graph(&mut g, av, bv);
        let plain = giou(
            &BoxSet::<f64>::from_rows(&a_rows, Frame::Image).unwrap(),
            &BoxSet::<f64>::from_rows(&b_rows, Frame::Image).unwrap(),
        )
        .unwrap();
        for i in 0..2 {
            assert!((g.value(gi)[[i]] - plain.values[i]).abs() < 1e-12);
        }

        let loss = g.sum_all(gi);
        let grads = g.backward(loss);
        let reference = finite_difference(&a, 1e-7, |ap| {
            let mut g = Graph::<f64>::new();
            let av = g.leaf(ap.clone());
            let bv = g.constant(b.clone());
            let gi = giou_graph(&mut g, av, bv);
            let loss = g.sum_all(gi);
            g.scalar(loss)
        });
        let err = max_rel_err(grads.get(av).unwrap(), &reference);
        assert!(err < 1e-4, "giou grad rel err {err}");
    }

    #[test]
    fn soft_argmax_graph_matches_plain_readout() {
        let (h, w) = (5, 7);
        let mut flat = Array3::<f64>::zeros((2, 2, h * w));
        // arbitrary normalized masses
        for n in 0..2 {
            for c in 0..2 {
                let mut total = 0.0;
                for p in 0..h * w {
                    let v = ((n + 1) * (c + 2) * (p + 3) % 11) as f64 + 0.5;
                    flat[(n, c, p)] = v;
                    total += v;
                }
                for p in 0..h * w {
                    flat[(n, c, p)] /= total;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let hv = g.leaf(flat.clone().into_dyn());
        let out = soft_argmax_graph(&mut g, hv, h, w);
        let pair = HeatmapPair::from_channel_major(&flat, h, w).unwrap();
        let plain = soft_argmax_box(&pair);
        for i in 0..2 {
            for j in 0..4 {
                assert!((g.value(out)[[i, j]] - plain.coords()[(i, j)]).abs() < 1e-12);
            }
        }
        // gradient flows
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        assert!(grads.get(hv).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn apply_deltas_graph_matches_plain_codec() {
        let p_rows = [[0.0, 0.0, 10.0, 10.0], [3.0, 4.0, 7.5, 9.0]];
        let d = Array2::from_shape_vec((2, 4), vec![0.1, -0.2, 0.3, 0.05, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 4]), p_rows.concat()).unwrap());
        let dv = g.leaf(d.clone().into_dyn());
        let out = apply_deltas_graph(&mut g, pv, dv);
        let plain = apply_deltas(
            &BoxSet::from_rows(&p_rows, Frame::Image).unwrap(),
            &d,
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(g.value(out)[[i, j]], plain.coords()[(i, j)]);
            }
        }
        // zero-delta row is reproduced bit for bit
        for j in 0..4 {
            assert_eq!(g.value(out)[[1, j]], p_rows[1][j]);
        }
    }
}
