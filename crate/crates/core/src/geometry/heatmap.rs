//! Corner-probability heatmaps and the soft-argmax box readout.

use super::boxes::{BoxSet, Frame, GeometryError};
use crate::scalar::{real, Scalar};
use ndarray::{Array3, Array4};

/// N pairs of spatial probability maps, `[n, h, w, 2]`; channel 0 is the
/// top-left corner distribution, channel 1 the bottom-right. Each channel
/// slice is nonnegative and sums to 1 within 1e-5.
#[derive(Debug, Clone)]
pub struct HeatmapPair<T: Scalar> {
    values: Array4<T>,
}

impl<T: Scalar> HeatmapPair<T> {
    pub fn new(values: Array4<T>) -> Result<Self, GeometryError> {
        let (n, h, w, ch) = values.dim();
        if ch != 2 {
            return Err(GeometryError::InvalidHeatmap(format!(
                "expected 2 channels, got {ch}"
            )));
        }
        for i in 0..n {
            for c in 0..2 {
                let mut sum = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        let v = values[(i, y, x, c)].to_f64();
                        if v < 0.0 {
                            return Err(GeometryError::InvalidHeatmap(format!(
                                "negative mass at ({i},{y},{x},{c})"
                            )));
                        }
                        sum += v;
                    }
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(GeometryError::InvalidHeatmap(format!(
                        "channel ({i},{c}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(HeatmapPair { values })
    }

    /// Build from the channel-major `[n, 2, h*w]` layout used inside the
    /// proposal decoder.
    pub fn from_channel_major(flat: &Array3<T>, h: usize, w: usize) -> Result<Self, GeometryError> {
        let (n, ch, hw) = flat.dim();
        if ch != 2 || hw != h * w {
            return Err(GeometryError::InvalidHeatmap(format!(
                "bad channel-major shape [{n}, {ch}, {hw}] for {h}x{w}"
            )));
        }
        let mut values = Array4::zeros((n, h, w, 2));
        for i in 0..n {
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        values[(i, y, x, c)] = flat[(i, c, y * w + x)];
                    }
                }
            }
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Array4<T> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (n, h, w, _) = self.values.dim();
        (n, h, w)
    }
}

/// Expected corner coordinates under each heatmap channel, with
/// coordinate-wise min/max to restore corner order. Grid indices run
/// 0..w-1 horizontally (x) and 0..h-1 vertically (y); output is in the
/// feature frame.
pub fn soft_argmax_box<T: Scalar>(heat: &HeatmapPair<T>) -> BoxSet<T> {
    let (n, h, w) = heat.dims();
    let v = heat.values();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut e = [0.0f64; 4]; // x_tl, y_tl, x_br, y_br
        for y in 0..h {
            for x in 0..w {
                let h0 = v[(i, y, x, 0)].to_f64();
                let h1 = v[(i, y, x, 1)].to_f64();
                e[0] += x as f64 * h0;
                e[1] += y as f64 * h0;
                e[2] += x as f64 * h1;
                e[3] += y as f64 * h1;
            }
        }
        rows.push([e[0].min(e[2]), e[1].min(e[3]), e[0].max(e[2]), e[1].max(e[3])]);
    }
    let mut coords = ndarray::Array2::<T>::zeros((n, 4));
    for (i, r) in rows.iter().enumerate() {
        for j in 0..4 {
            coords[(i, j)] = real(r[j]);
        }
    }
    BoxSet::new(coords, Frame::Feature).expect("soft-argmax output is ordered and finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn delta_mass_reads_out_exact_corners() {
        let mut v = Array4::<f64>::zeros((1, 16, 16, 2));
        v[(0, 5, 3, 0)] = 1.0; // top-left at (x=3, y=5)
        v[(0, 12, 10, 1)] = 1.0; // bottom-right at (x=10, y=12)
        let h = HeatmapPair::new(v).unwrap();
        let b = soft_argmax_box(&h);
        assert_eq!(b.row_f64(0), [3.0, 5.0, 10.0, 12.0]);
    }

    #[test]
    fn uniform_heatmap_reads_out_grid_center() {
        let v = Array4::<f64>::from_elem((1, 4, 4, 2), 1.0 / 16.0);
        let h = HeatmapPair::new(v).unwrap();
        let b = soft_argmax_box(&h);
        assert_eq!(b.row_f64(0), [1.5, 1.5, 1.5, 1.5]);
    }

    #[test]
    fn split_mass_averages_positions() {
        let mut v = Array4::<f64>::zeros((1, 8, 8, 2));
        v[(0, 1, 1, 0)] = 0.5;
        v[(0, 3, 3, 0)] = 0.5;
        v[(0, 5, 5, 1)] = 1.0;
        let h = HeatmapPair::new(v).unwrap();
        let b = soft_argmax_box(&h);
        assert_eq!(b.row_f64(0), [2.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn output_stays_inside_grid() {
        // any normalized heatmap has its expectation inside [0, w-1]x[0, h-1]
        let mut v = Array4::<f64>::zeros((1, 6, 9, 2));
        v[(0, 0, 0, 0)] = 1.0;
        v[(0, 5, 8, 1)] = 1.0;
        let h = HeatmapPair::new(v).unwrap();
        let b = soft_argmax_box(&h);
        let r = b.row_f64(0);
        assert!(r[0] >= 0.0 && r[2] <= 8.0 && r[1] >= 0.0 && r[3] <= 5.0);
    }

    #[test]
    fn validation_rejects_bad_mass() {
        let v = Array4::<f64>::from_elem((1, 4, 4, 2), 0.9 / 16.0);
        assert!(HeatmapPair::new(v).is_err());
        let mut v = Array4::<f64>::zeros((1, 4, 4, 2));
        v[(0, 0, 0, 0)] = 2.0;
        v[(0, 1, 1, 0)] = -1.0;
        v[(0, 0, 0, 1)] = 1.0;
        assert!(HeatmapPair::new(v).is_err());
    }
}
