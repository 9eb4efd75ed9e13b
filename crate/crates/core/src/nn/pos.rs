//! Sine/cosine spatial positional encoding of box centers.

use crate::geometry::BoxSet;
use crate::scalar::{real, Scalar};
use ndarray::Array2;

/// Deterministic encoding of normalized box centers into `dim` channels:
/// the first half encodes cx, the second half cy, each as interleaved
/// sin/cos at geometrically spaced frequencies. `dim` must be a multiple
/// of 4. Equal boxes produce equal rows.
pub fn sine_pos_encoding<T: Scalar>(
    boxes: &BoxSet<T>,
    dim: usize,
    img_w: f64,
    img_h: f64,
) -> Array2<T> {
    assert!(dim % 4 == 0, "positional encoding dim must be divisible by 4");
    let half = dim / 2;
    let n = boxes.len();
    let centers = boxes.centers();
    let mut out = Array2::<T>::zeros((n, dim));
    let two_pi = std::f64::consts::TAU;
    for i in 0..n {
        let cx = centers[(i, 0)].to_f64() / img_w * two_pi;
        let cy = centers[(i, 1)].to_f64() / img_h * two_pi;
        for (offset, coord) in [(0usize, cx), (half, cy)] {
            for k in 0..half / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                out[(i, offset + 2 * k)] = real((coord * freq).sin());
                out[(i, offset + 2 * k + 1)] = real((coord * freq).cos());
            }
        }
    }
    out
}
