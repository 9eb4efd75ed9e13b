//! Box arithmetic, overlap measures, differentiable spatial sampling and
//! the proposal-delta codec.

mod boxes;
mod graph_ops;
mod heatmap;

pub use boxes::{
    apply_deltas, encode_deltas, giou, iou, BoxSet, Frame, GeometryError, GiouOutput,
};
pub use graph_ops::{
    apply_deltas_graph, box_centers_graph, giou_graph, l1_mean_graph, soft_argmax_graph,
};
pub use heatmap::{soft_argmax_box, HeatmapPair};

use crate::scalar::Scalar;
use ndarray::{Array4, ArrayD};

/// Bilinear RoI crop without gradient tracking. `boxes` must be in the
/// feature frame; `k == 0` is rejected.
pub fn roi_align<T: Scalar>(
    feat: &ndarray::Array3<T>,
    boxes: &BoxSet<T>,
    k: usize,
) -> Result<Array4<T>, GeometryError> {
    if k == 0 {
        return Err(GeometryError::ZeroRoiSize);
    }
    if boxes.frame() != Frame::Feature {
        return Err(GeometryError::FrameMismatch(Frame::Feature, boxes.frame()));
    }
    let feat_dyn: ArrayD<T> = feat.clone().into_dyn();
    let boxes_dyn: ArrayD<T> = boxes.coords().clone().into_dyn();
    let out = crate::autodiff::roi_align_plain(&feat_dyn, &boxes_dyn, k);
    Ok(out
        .into_dimensionality::<ndarray::Ix4>()
        .expect("roi_align output rank"))
}

pub(crate) fn boxes_to_dyn<T: Scalar>(b: &BoxSet<T>) -> ArrayD<T> {
    b.coords().clone().into_dyn()
}

pub(crate) fn dyn_to_array2<T: Scalar>(a: ArrayD<T>) -> ndarray::Array2<T> {
    a.into_dimensionality::<ndarray::Ix2>().expect("rank-2 array")
}
