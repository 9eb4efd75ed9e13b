//! Correlation attention: each target embedding acts as a 1x1,
//! one-output-channel filter over a feature grid, and the resulting
//! score map reweights that grid elementwise.

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;

/// Full-map variant: `filters [n, c]` against a shared flattened frame
/// feature `[p, c]`, producing `[n, p, c]`.
pub fn corr_att_full<T: Scalar>(g: &mut Graph<T>, filters: Var, feat_flat: Var) -> Var {
    let n = g.value(filters).shape()[0];
    let (p, c) = {
        let s = g.value(feat_flat).shape();
        (s[0], s[1])
    };
    let ft = g.permute(filters, &[1, 0]); // [c, n]
    let scores = g.matmul(feat_flat, ft); // [p, n]
    let scores = g.permute(scores, &[1, 0]); // [n, p]
    let scores = g.reshape(scores, &[n, p, 1]);
    let feat_b = g.reshape(feat_flat, &[1, p, c]);
    g.mul(scores, feat_b)
}

/// Per-target variant: `filters [n, c]` against per-target crops
/// `[n, p, c]` (p = k*k), producing `[n, p, c]`.
pub fn corr_att_per_target<T: Scalar>(g: &mut Graph<T>, filters: Var, feat: Var) -> Var {
    let n = g.value(filters).shape()[0];
    let c = g.value(filters).shape()[1];
    let f3 = g.reshape(filters, &[n, 1, c]);
    let prod = g.mul(f3, feat);
    let scores = g.sum_axis(prod, 2, true); // [n, p, 1]
    g.mul(scores, feat)
}

/// Exact multiply-add count of one correlation-attention evaluation over
/// `n` targets and `p` positions at channel width `c`: each score is a
/// dot product (c multiplies, c-1 adds), each position is then rescaled
/// (c multiplies).
pub fn corr_att_flop_count(n: usize, p: usize, c: usize) -> u64 {
    let (n, p, c) = (n as u64, p as u64, c as u64);
    n * p * (2 * c - 1) + n * p * c
}
