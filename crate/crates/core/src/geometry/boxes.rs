//! Axis-aligned boxes with a coordinate-frame tag, overlap measures and
//! the center/log-size delta codec used by the box head.

use crate::scalar::{real, Scalar};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinate frame a box lives in: image pixels or backbone grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Image,
    Feature,
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("coordinate frame mismatch: expected {0:?}, got {1:?}")]
    FrameMismatch(Frame, Frame),
    #[error("invalid box at row {row}: {reason}")]
    InvalidBox { row: usize, reason: String },
    #[error("non-finite delta at row {0}")]
    NonFiniteDelta(usize),
    #[error("box count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),
    #[error("roi_align output size must be >= 1")]
    ZeroRoiSize,
}

/// N boxes as (x1, y1, x2, y2) rows. Constructors enforce `x2 >= x1`,
/// `y2 >= y1` and finiteness for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<T: Scalar> {
    coords: Array2<T>,
    frame: Frame,
}

impl<T: Scalar> BoxSet<T> {
    pub fn new(coords: Array2<T>, frame: Frame) -> Result<Self, GeometryError> {
        if coords.ncols() != 4 {
            return Err(GeometryError::InvalidBox {
                row: 0,
                reason: format!("expected 4 columns, got {}", coords.ncols()),
            });
        }
        for (row, r) in coords.rows().into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::InvalidBox {
                    row,
                    reason: "non-finite coordinate".into(),
                });
            }
            if r[2] < r[0] || r[3] < r[1] {
                return Err(GeometryError::InvalidBox {
                    row,
                    reason: format!(
                        "corners out of order: ({}, {}, {}, {})",
                        r[0], r[1], r[2], r[3]
                    ),
                });
            }
        }
        Ok(BoxSet { coords, frame })
    }

    pub fn from_rows(rows: &[[f64; 4]], frame: Frame) -> Result<Self, GeometryError> {
        let mut coords = Array2::<T>::zeros((rows.len(), 4));
        for (i, r) in rows.iter().enumerate() {
            for j in 0..4 {
                coords[(i, j)] = real(r[j]);
            }
        }
        Self::new(coords, frame)
    }

    pub fn single(b: [f64; 4], frame: Frame) -> Result<Self, GeometryError> {
        Self::from_rows(&[b], frame)
    }

    pub fn empty(frame: Frame) -> Self {
        BoxSet {
            coords: Array2::zeros((0, 4)),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &Array2<T> {
        &self.coords
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn row(&self, i: usize) -> [T; 4] {
        [
            self.coords[(i, 0)],
            self.coords[(i, 1)],
            self.coords[(i, 2)],
            self.coords[(i, 3)],
        ]
    }

    pub fn row_f64(&self, i: usize) -> [f64; 4] {
        let r = self.row(i);
        [r[0].to_f64(), r[1].to_f64(), r[2].to_f64(), r[3].to_f64()]
    }

    /// Boxes for a subset of row indices, same frame.
    pub fn select(&self, rows: &[usize]) -> BoxSet<T> {
        let mut coords = Array2::<T>::zeros((rows.len(), 4));
        for (i, &r) in rows.iter().enumerate() {
            coords.row_mut(i).assign(&self.coords.row(r));
        }
        BoxSet {
            coords,
            frame: self.frame,
        }
    }

    pub fn areas(&self) -> Array1<T> {
        let mut out = Array1::zeros(self.len());
        for (i, r) in self.coords.rows().into_iter().enumerate() {
            out[i] = (r[2] - r[0]) * (r[3] - r[1]);
        }
        out
    }

    pub fn centers(&self) -> Array2<T> {
        let half = real::<T>(0.5);
        let mut out = Array2::zeros((self.len(), 2));
        for (i, r) in self.coords.rows().into_iter().enumerate() {
            out[(i, 0)] = (r[0] + r[2]) * half;
            out[(i, 1)] = (r[1] + r[3]) * half;
        }
        out
    }

    /// Divide coordinates by the backbone stride (image -> feature frame).
    pub fn image_to_feature(&self, stride: usize) -> Result<BoxSet<T>, GeometryError> {
        if self.frame != Frame::Image {
            return Err(GeometryError::FrameMismatch(Frame::Image, self.frame));
        }
        let s = real::<T>(1.0 / stride as f64);
        Ok(BoxSet {
            coords: self.coords.mapv(|v| v * s),
            frame: Frame::Feature,
        })
    }

    pub fn feature_to_image(&self, stride: usize) -> Result<BoxSet<T>, GeometryError> {
        if self.frame != Frame::Feature {
            return Err(GeometryError::FrameMismatch(Frame::Feature, self.frame));
        }
        let s = real::<T>(stride as f64);
        Ok(BoxSet {
            coords: self.coords.mapv(|v| v * s),
            frame: Frame::Image,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BoxSet<U> {
        BoxSet {
            coords: self.coords.mapv(|v| real::<U>(v.to_f64())),
            frame: self.frame,
        }
    }
}

pub(crate) fn pair_iou_f64(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pairwise IoU matrix between two sets in the same frame.
pub fn iou<T: Scalar>(a: &BoxSet<T>, b: &BoxSet<T>) -> Result<Array2<T>, GeometryError> {
    if a.frame() != b.frame() {
        return Err(GeometryError::FrameMismatch(a.frame(), b.frame()));
    }
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        let ra = a.row_f64(i);
        for j in 0..b.len() {
            out[(i, j)] = real(pair_iou_f64(&ra, &b.row_f64(j)));
        }
    }
    Ok(out)
}

/// Row-paired generalized IoU in [-1, 1], with zero-area rows reported.
pub struct GiouOutput<T: Scalar> {
    pub values: Array1<T>,
    /// Rows where either box had zero area (computed with area 0, no error).
    pub degenerate_rows: Vec<usize>,
}

pub fn giou<T: Scalar>(a: &BoxSet<T>, b: &BoxSet<T>) -> Result<GiouOutput<T>, GeometryError> {
    if a.frame() != b.frame() {
        return Err(GeometryError::FrameMismatch(a.frame(), b.frame()));
    }
    if a.len() != b.len() {
        return Err(GeometryError::CountMismatch(a.len(), b.len()));
    }
    let mut values = Array1::zeros(a.len());
    let mut degenerate_rows = Vec::new();
    for i in 0..a.len() {
        let ra = a.row_f64(i);
        let rb = b.row_f64(i);
        let area_a = (ra[2] - ra[0]) * (ra[3] - ra[1]);
        let area_b = (rb[2] - rb[0]) * (rb[3] - rb[1]);
        if area_a == 0.0 || area_b == 0.0 {
            degenerate_rows.push(i);
        }
        let iw = (ra[2].min(rb[2]) - ra[0].max(rb[0])).max(0.0);
        let ih = (ra[3].min(rb[3]) - ra[1].max(rb[1])).max(0.0);
        let inter = iw * ih;
        let union = area_a + area_b - inter;
        let iou = if union <= 0.0 { 0.0 } else { inter / union };
        let cw = ra[2].max(rb[2]) - ra[0].min(rb[0]);
        let ch = ra[3].max(rb[3]) - ra[1].min(rb[1]);
        let enclosing = cw * ch;
        let g = if enclosing <= 0.0 {
            iou
        } else {
            iou - (enclosing - union) / enclosing
        };
        values[i] = real(g);
    }
    Ok(GiouOutput {
        values,
        degenerate_rows,
    })
}

/// Apply center/log-size deltas to proposals.
///
/// Formulated so that zero deltas reproduce the proposals bit for bit:
/// `x1' = x1 + w*(dx + (1 - e^dw)/2)`, `x2' = x2 + w*(dx + (e^dw - 1)/2)`
/// and likewise for y, which is algebraically the usual
/// `cx' = cx + dx*w, w' = w*e^dw` written without the corner round trip.
pub fn apply_deltas<T: Scalar>(
    proposals: &BoxSet<T>,
    deltas: &Array2<T>,
) -> Result<BoxSet<T>, GeometryError> {
    if deltas.nrows() != proposals.len() || deltas.ncols() != 4 {
        return Err(GeometryError::CountMismatch(proposals.len(), deltas.nrows()));
    }
    let half = real::<T>(0.5);
    let one = T::one();
    let mut coords = proposals.coords().clone();
    for i in 0..proposals.len() {
        let d = [
            deltas[(i, 0)],
            deltas[(i, 1)],
            deltas[(i, 2)],
            deltas[(i, 3)],
        ];
        if d.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteDelta(i));
        }
        let r = proposals.row(i);
        let w = r[2] - r[0];
        let h = r[3] - r[1];
        let ew = d[2].exp();
        let eh = d[3].exp();
        coords[(i, 0)] = r[0] + w * (d[0] + (one - ew) * half);
        coords[(i, 1)] = r[1] + h * (d[1] + (one - eh) * half);
        coords[(i, 2)] = r[2] + w * (d[0] + (ew - one) * half);
        coords[(i, 3)] = r[3] + h * (d[1] + (eh - one) * half);
    }
    BoxSet::new(coords, proposals.frame())
}

/// Inverse of [`apply_deltas`] on positive-size box pairs.
pub fn encode_deltas<T: Scalar>(
    proposals: &BoxSet<T>,
    targets: &BoxSet<T>,
) -> Result<Array2<T>, GeometryError> {
    if proposals.len() != targets.len() {
        return Err(GeometryError::CountMismatch(proposals.len(), targets.len()));
    }
    if proposals.frame() != targets.frame() {
        return Err(GeometryError::FrameMismatch(proposals.frame(), targets.frame()));
    }
    let half = real::<T>(0.5);
    let mut out = Array2::zeros((proposals.len(), 4));
    for i in 0..proposals.len() {
        let p = proposals.row(i);
        let t = targets.row(i);
        let pw = p[2] - p[0];
        let ph = p[3] - p[1];
        let tw = t[2] - t[0];
        let th = t[3] - t[1];
        let pcx = (p[0] + p[2]) * half;
        let pcy = (p[1] + p[3]) * half;
        let tcx = (t[0] + t[2]) * half;
        let tcy = (t[1] + t[3]) * half;
        out[(i, 0)] = (tcx - pcx) / pw;
        out[(i, 1)] = (tcy - pcy) / ph;
        out[(i, 2)] = (tw / pw).ln();
        out[(i, 3)] = (th / ph).ln();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(rows: &[[f64; 4]]) -> BoxSet<f64> {
        BoxSet::from_rows(rows, Frame::Image).unwrap()
    }

    #[test]
    fn iou_identical_disjoint_and_partial() {
        let a = set(&[[0.0, 0.0, 2.0, 2.0]]);
        assert_eq!(iou(&a, &a).unwrap()[(0, 0)], 1.0);

        let b = set(&[[2.0, 2.0, 3.0, 3.0]]);
        let c = set(&[[0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(iou(&c, &b).unwrap()[(0, 0)], 0.0);

        let d = set(&[[1.0, 1.0, 3.0, 3.0]]);
        let v = iou(&a, &d).unwrap()[(0, 0)];
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_frame_mismatch() {
        let a = set(&[[0.0, 0.0, 2.0, 2.0]]);
        let f = BoxSet::<f64>::from_rows(&[[0.0, 0.0, 1.0, 1.0]], Frame::Feature).unwrap();
        assert!(matches!(
            iou(&a, &f),
            Err(GeometryError::FrameMismatch(_, _))
        ));
    }

    #[test]
    fn iou_zero_area_identical_is_zero() {
        let a = set(&[[1.0, 1.0, 1.0, 1.0]]);
        assert_eq!(iou(&a, &a).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn giou_hand_cases() {
        let a = set(&[[0.0, 0.0, 2.0, 2.0]]);
        assert_eq!(giou(&a, &a).unwrap().values[0], 1.0);

        let b = set(&[[0.0, 0.0, 1.0, 1.0]]);
        let c = set(&[[2.0, 2.0, 3.0, 3.0]]);
        let v = giou(&b, &c).unwrap().values[0];
        assert!((v - (-7.0 / 9.0)).abs() < 1e-12);

        let d = set(&[[1.0, 1.0, 3.0, 3.0]]);
        let v = giou(&a, &d).unwrap().values[0];
        assert!((v - (-5.0 / 63.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_flags_degenerate_rows_without_error() {
        let a = set(&[[0.0, 0.0, 0.0, 2.0], [0.0, 0.0, 1.0, 1.0]]);
        let b = set(&[[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]);
        let out = giou(&a, &b).unwrap();
        assert_eq!(out.degenerate_rows, vec![0]);
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let mut rng_state = 12345u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) * 8.0
        };
        for _ in 0..200 {
            let mk = |next: &mut dyn FnMut() -> f64| {
                let x1 = next();
                let y1 = next();
                [x1, y1, x1 + next() + 0.01, y1 + next() + 0.01]
            };
            let ra = mk(&mut next);
            let rb = mk(&mut next);
            let a = set(&[ra]);
            let b = set(&[rb]);
            let i = iou(&a, &b).unwrap()[(0, 0)];
            let g = giou(&a, &b).unwrap().values[0];
            assert!(g <= i + 1e-12);
            assert!((-1.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn deltas_zero_is_bitwise_identity() {
        let p = set(&[[0.1, 0.3, 10.7, 5.9], [2.0, 2.0, 4.5, 8.25]]);
        let zeros = Array2::<f64>::zeros((2, 4));
        let out = apply_deltas(&p, &zeros).unwrap();
        assert_eq!(out.coords(), p.coords());
    }

    #[test]
    fn deltas_hand_case() {
        // proposal [0,0,10,10], dx 0.1 shifts center to (6,5); dw ln 2
        // doubles the width -> [-4, 0, 16, 10]
        let p = set(&[[0.0, 0.0, 10.0, 10.0]]);
        let d = array![[0.1, 0.0, (2.0f64).ln(), 0.0]];
        let out = apply_deltas(&p, &d).unwrap();
        let r = out.row_f64(0);
        for (got, want) in r.iter().zip([-4.0, 0.0, 16.0, 10.0]) {
            assert!((got - want).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn deltas_roundtrip() {
        let p = set(&[[0.0, 0.0, 10.0, 10.0], [3.0, 4.0, 7.5, 9.0]]);
        let t = set(&[[1.0, 2.0, 5.0, 11.0], [2.5, 4.5, 9.0, 10.0]]);
        let d = encode_deltas(&p, &t).unwrap();
        let back = apply_deltas(&p, &d).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((back.coords()[(i, j)] - t.coords()[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_deltas_are_rejected() {
        let p = set(&[[0.0, 0.0, 10.0, 10.0]]);
        let d = array![[f64::NAN, 0.0, 0.0, 0.0]];
        assert!(matches!(
            apply_deltas(&p, &d),
            Err(GeometryError::NonFiniteDelta(0))
        ));
    }

    #[test]
    fn constructor_rejects_disordered_and_non_finite() {
        assert!(BoxSet::<f64>::from_rows(&[[2.0, 0.0, 1.0, 1.0]], Frame::Image).is_err());
        assert!(BoxSet::<f64>::from_rows(&[[0.0, 0.0, f64::INFINITY, 1.0]], Frame::Image).is_err());
    }

    #[test]
    fn frame_conversion_scales_coordinates() {
        let b = set(&[[8.0, 16.0, 24.0, 32.0]]);
        let f = b.image_to_feature(8).unwrap();
        assert_eq!(f.row_f64(0), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.frame(), Frame::Feature);
        let back = f.feature_to_image(8).unwrap();
        assert_eq!(back.row_f64(0), [8.0, 16.0, 24.0, 32.0]);
    }
}
