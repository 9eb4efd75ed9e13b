//! Basic differentiable layers: linear, per-token instance norm, FFN and
//! strided convolution.

use super::params::{uniform_fan_in, zeros, ParamStore, Session};
use crate::autodiff::Var;
use crate::scalar::{real, Scalar};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, uniform_fan_in(rng, &[in_dim, out_dim], in_dim));
        store.insert(&bias, uniform_fan_in(rng, &[out_dim], in_dim));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// Zero-initialized variant (box head: initial deltas are exactly 0).
    pub fn new_zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, zeros::<T>(&[in_dim, out_dim]));
        store.insert(&bias, zeros::<T>(&[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        debug_assert_eq!(*s.graph.value(x).shape().last().unwrap(), self.in_dim);
        let w = s.param(&self.weight);
        let b = s.param(&self.bias);
        let y = s.graph.matmul(x, w);
        s.graph.add(y, b)
    }
}

/// Per-token channel normalization with learned affine, eps 1e-5.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: String,
    beta: String,
    pub dim: usize,
}

impl InstanceNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, super::params::ones::<T>(&[dim]));
        store.insert(&beta, zeros::<T>(&[dim]));
        InstanceNorm { gamma, beta, dim }
    }

    /// Zero-mean unit-variance rows (population variance), before affine.
    pub fn normalize<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let g = &mut s.graph;
        let mu = g.mean_axis(x, 1, true);
        let centered = g.sub(x, mu);
        let sq = g.mul(centered, centered);
        let var = g.mean_axis(sq, 1, true);
        let var_eps = g.add_scalar(var, real::<T>(1e-5));
        let std = g.sqrt(var_eps);
        g.div(centered, std)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let normed = self.normalize(s, x);
        let gamma = s.param(&self.gamma);
        let beta = s.param(&self.beta);
        let scaled = s.graph.mul(normed, gamma);
        s.graph.add(scaled, beta)
    }
}

/// Two linear maps with a ReLU in between; callers wrap it as
/// `Norm(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct Ffn {
    lin1: Linear,
    lin2: Linear,
}

impl Ffn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Ffn {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), dim, hidden),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.lin1.forward(s, x);
        let a = s.graph.relu(h);
        self.lin2.forward(s, a)
    }
}

/// 2-d convolution over `[n, h, w, c]`, via im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = kernel * kernel * in_ch;
        store.insert(&weight, uniform_fan_in(rng, &[fan_in, out_ch], fan_in));
        store.insert(&bias, uniform_fan_in(rng, &[out_ch], fan_in));
        Conv2d { weight, bias, kernel, stride, pad, in_ch, out_ch }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let shape = s.graph.value(x).shape().to_vec();
        debug_assert_eq!(shape.len(), 4);
        debug_assert_eq!(shape[3], self.in_ch);
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let cols = s.graph.im2col(x, self.kernel, self.kernel, self.stride, self.pad);
        let wv = s.param(&self.weight);
        let bv = s.param(&self.bias);
        let y = s.graph.matmul(cols, wv);
        let y = s.graph.add(y, bv);
        s.graph.reshape(y, &[n, ho, wo, self.out_ch])
    }
}
