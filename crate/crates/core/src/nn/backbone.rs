//! Small strided convolutional backbone producing one feature layer.

use super::layers::Conv2d;
use super::params::{ParamStore, Session};
use super::NnError;
use crate::autodiff::Var;
use crate::scalar::Scalar;
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Width schedule of the strided stages; the final stage maps to the
/// model dimension at stride 1. Total stride is 2^widths.len().
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: vec![16, 32, 64] }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

/// Dense feature grid with its stride and source image size, detached
/// from any graph. Used to cache reference-frame features.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar> {
    pub values: Array3<T>,
    pub stride: usize,
    pub img_h: usize,
    pub img_w: usize,
}

/// Graph-resident feature grid handle.
#[derive(Debug, Clone, Copy)]
pub struct FeatGrid {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub stride: usize,
    pub img_h: usize,
    pub img_w: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Conv2d>,
    final_conv: Conv2d,
    stride: usize,
}

impl Backbone {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BackboneConfig,
        out_dim: usize,
    ) -> Self {
        assert!(!cfg.widths.is_empty(), "backbone needs at least one stage");
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.stage{i}.conv"),
                in_ch,
                w,
                3,
                2,
                1,
            ));
            in_ch = w;
        }
        let final_conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.head.conv"),
            in_ch,
            out_dim,
            3,
            1,
            1,
        );
        Backbone { stages, final_conv, stride: cfg.stride() }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Extract the feature grid of one `[h, w, 3]` image. Output dims are
    /// ceil(h / stride) x ceil(w / stride); the stride-2 convolutions do
    /// the padding implicitly.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        image: &Array3<T>,
    ) -> Result<FeatGrid, NnError> {
        let (img_h, img_w, ch) = image.dim();
        if ch != 3 {
            return Err(NnError::BadImageChannels(ch));
        }
        let x = s
            .graph
            .constant(image.clone().into_dyn().into_shape_with_order(
                ndarray::IxDyn(&[1, img_h, img_w, 3]),
            ).expect("image reshape"));
        self.forward_var(s, x, img_h, img_w)
    }

    /// Same as [`Self::forward`] for an already-inserted `[1,h,w,3]` var
    /// (lets tests trace gradients through the image).
    pub fn forward_var<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        img_h: usize,
        img_w: usize,
    ) -> Result<FeatGrid, NnError> {
        let mut x = x;
        for stage in &self.stages {
            x = stage.forward(s, x);
            x = s.graph.relu(x);
        }
        let x = self.final_conv.forward(s, x);
        let shape = s.graph.value(x).shape().to_vec();
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        let var = s.graph.reshape(x, &[h, w, c]);
        Ok(FeatGrid {
            var,
            h,
            w,
            c,
            stride: self.stride,
            img_h,
            img_w,
        })
    }
}
