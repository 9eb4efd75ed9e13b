//! Multi-head softmax attention, used as cross attention in the target
//! decoder and self attention in the target transformer.

use super::layers::Linear;
use super::params::{ParamStore, Session};
use super::NnError;
use crate::autodiff::Var;
use crate::scalar::{real, Scalar};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            dim,
            heads,
        }
    }

    fn split_heads<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, rows: usize) -> Var {
        let d = self.dim / self.heads;
        let r = s.graph.reshape(x, &[rows, self.heads, d]);
        s.graph.permute(r, &[1, 0, 2]) // [heads, rows, d]
    }

    fn attend<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        n: usize,
        p: usize,
    ) -> (Var, Var) {
        let d = self.dim / self.heads;
        let qh = self.split_heads(s, q, n);
        let kh = self.split_heads(s, k, p);
        let vh = self.split_heads(s, v, p);
        let kt = s.graph.permute(kh, &[0, 2, 1]); // [heads, d, p]
        let scores = s.graph.matmul(qh, kt);
        let scaled = s.graph.scale(scores, real::<T>(1.0 / (d as f64).sqrt()));
        let weights = s.graph.softmax_last(scaled); // [heads, n, p]
        let ctx = s.graph.matmul(weights, vh); // [heads, n, d]
        let merged = s.graph.permute(ctx, &[1, 0, 2]);
        let flat = s.graph.reshape(merged, &[n, self.dim]);
        (self.wo.forward(s, flat), weights)
    }

    /// Cross attention: `query [n, c]` against flattened context
    /// `keyval [p, c]`, output before the caller's residual + norm.
    pub fn cross<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        query: Var,
        keyval: Var,
    ) -> Result<Var, NnError> {
        Ok(self.cross_with_weights(s, query, keyval)?.0)
    }

    /// Same as [`Self::cross`] but also returns attention weights
    /// `[heads, n, p]` for inspection.
    pub fn cross_with_weights<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        query: Var,
        keyval: Var,
    ) -> Result<(Var, Var), NnError> {
        let n = s.graph.value(query).shape()[0];
        let p = s.graph.value(keyval).shape()[0];
        if p == 0 {
            return Err(NnError::EmptyContext);
        }
        let q = self.wq.forward(s, query);
        let k = self.wk.forward(s, keyval);
        let v = self.wv.forward(s, keyval);
        Ok(self.attend(s, q, k, v, n, p))
    }

    /// Self attention with positional encoding on queries and keys only;
    /// values see the raw tokens.
    pub fn self_attend<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, pos: Var) -> Var {
        let n = s.graph.value(x).shape()[0];
        let xp = s.graph.add(x, pos);
        let q = self.wq.forward(s, xp);
        let k = self.wk.forward(s, xp);
        let v = self.wv.forward(s, x);
        self.attend(s, q, k, v, n, n).0
    }
}
