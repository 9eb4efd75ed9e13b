//! Tape-based reverse-mode automatic differentiation over dynamically
//! shaped arrays.
//!
//! A [`Graph`] records one forward evaluation; [`Graph::backward`] replays
//! the tape in reverse and accumulates gradients for every node that
//! requires them. Graphs are cheap and short-lived: a training step builds
//! one, reads the gradients out, and drops it.
//!
//! Primitives are kept deliberately small. Anything expressible as a
//! composition (instance norm, attention, GIoU, soft-argmax, box deltas)
//! is composed from these and inherits its backward pass; only `im2col`
//! and `roi_align` carry hand-written adjoints.

use crate::scalar::{real, Scalar};
use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice, Zip};

/// Handle to a node in a [`Graph`]. Only valid for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn<T> =
    Box<dyn Fn(&ArrayD<T>, &ArrayD<T>, &[ArrayViewD<'_, T>]) -> Vec<ArrayD<T>>>;

struct Node<T: Scalar> {
    value: ArrayD<T>,
    parents: Vec<Var>,
    back: Option<BackFn<T>>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<T>, parents: Vec<Var>, back: Option<BackFn<T>>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            back: if needs_grad { back } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value that does not take gradients.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value that accumulates gradients (parameter or traced input).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise binary (with numpy-style broadcasting) ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = bc_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, pv| {
                vec![
                    reduce_to_shape(g.view(), pv[0].shape()),
                    reduce_to_shape(g.view(), pv[1].shape()),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = bc_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, pv| {
                vec![
                    reduce_to_shape(g.view(), pv[0].shape()),
                    reduce_to_shape(g.mapv(|x| -x).view(), pv[1].shape()),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = bc_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, pv| {
                let ga = bc_map_view(g.view(), pv[1].view(), |x, y| x * y);
                let gb = bc_map_view(g.view(), pv[0].view(), |x, y| x * y);
                vec![
                    reduce_to_shape(ga.view(), pv[0].shape()),
                    reduce_to_shape(gb.view(), pv[1].shape()),
                ]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = bc_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, pv| {
                let ga = bc_map_view(g.view(), pv[1].view(), |x, y| x / y);
                // d(a/b)/db = -a / b^2
                let shape = broadcast_shape(pv[0].shape(), pv[1].shape());
                let av = pv[0].broadcast(IxDyn(&shape)).unwrap();
                let bv = pv[1].broadcast(IxDyn(&shape)).unwrap();
                let gv = g.broadcast(IxDyn(&shape)).unwrap();
                let mut gb = ArrayD::<T>::zeros(IxDyn(&shape));
                Zip::from(&mut gb)
                    .and(&gv)
                    .and(&av)
                    .and(&bv)
                    .for_each(|o, &g, &a, &b| *o = -g * a / (b * b));
                vec![
                    reduce_to_shape(ga.view(), pv[0].shape()),
                    reduce_to_shape(gb.view(), pv[1].shape()),
                ]
            })),
        )
    }

    /// Elementwise minimum; on ties the gradient routes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let value = bc_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| {
            if x <= y {
                x
            } else {
                y
            }
        });
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, pv| {
                let shape = broadcast_shape(pv[0].shape(), pv[1].shape());
                let av = pv[0].broadcast(IxDyn(&shape)).unwrap();
                let bv = pv[1].broadcast(IxDyn(&shape)).unwrap();
                let gv = g.broadcast(IxDyn(&shape)).unwrap();
                let mut ga = ArrayD::<T>::zeros(IxDyn(&shape));
                let mut gb = ArrayD::<T>::zeros(IxDyn(&shape));
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(&gv)
                    .and(&av)
                    .and(&bv)
                    .for_each(|ga, gb, &g, &a, &b| {
                        if a <= b {
                            *ga = g;
                        } else {
                            *gb = g;
                        }
                    });
                vec![
                    reduce_to_shape(ga.view(), pv[0].shape()),
                    reduce_to_shape(gb.view(), pv[1].shape()),
                ]
            })),
        )
    }

    /// Elementwise maximum; on ties the gradient routes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let value = bc_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| {
            if x >= y {
                x
            } else {
                y
            }
        });
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, pv| {
                let shape = broadcast_shape(pv[0].shape(), pv[1].shape());
                let av = pv[0].broadcast(IxDyn(&shape)).unwrap();
                let bv = pv[1].broadcast(IxDyn(&shape)).unwrap();
                let gv = g.broadcast(IxDyn(&shape)).unwrap();
                let mut ga = ArrayD::<T>::zeros(IxDyn(&shape));
                let mut gb = ArrayD::<T>::zeros(IxDyn(&shape));
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(&gv)
                    .and(&av)
                    .and(&bv)
                    .for_each(|ga, gb, &g, &a, &b| {
                        if a >= b {
                            *ga = g;
                        } else {
                            *gb = g;
                        }
                    });
                vec![
                    reduce_to_shape(ga.view(), pv[0].shape()),
                    reduce_to_shape(gb.view(), pv[1].shape()),
                ]
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| -x);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.mapv(|x| -x)])),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = T::zero();
        let value = self.nodes[a.0].value.mapv(|x| if x > zero { x } else { zero });
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, pv| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&pv[0]).for_each(|o, &x| {
                    if x <= zero {
                        *o = zero;
                    }
                });
                vec![out]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, y, _| {
                let mut out = g.clone();
                Zip::from(&mut out).and(y).for_each(|o, &y| *o = *o * y);
                vec![out]
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, y, _| {
                let half = real::<T>(0.5);
                let mut out = g.clone();
                Zip::from(&mut out).and(y).for_each(|o, &y| *o = *o * half / y);
                vec![out]
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, pv| {
                let zero = T::zero();
                let mut out = g.clone();
                Zip::from(&mut out).and(&pv[0]).for_each(|o, &x| {
                    if x < zero {
                        *o = -*o;
                    } else if x == zero {
                        *o = zero;
                    }
                });
                vec![out]
            })),
        )
    }

    // ---- matmul ----

    /// Matrix product. Accepts `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = matmul_values(va.view(), vb.view());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, pv| {
                let ga = matmul_values(g.view(), transpose_last2(&pv[1]).view());
                let gb = matmul_values(transpose_last2(&pv[0]).view(), g.view());
                vec![ga, gb]
            })),
        )
    }

    // ---- softmax ----

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = va.clone();
        let last = value.ndim() - 1;
        for mut lane in value.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in lane.iter_mut() {
                *x = *x / sum;
            }
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, y, _| {
                let mut out = g.clone();
                let last = out.ndim() - 1;
                for (mut glane, ylane) in out.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot = glane
                        .iter()
                        .zip(ylane.iter())
                        .fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                    for (g, &y) in glane.iter_mut().zip(ylane.iter()) {
                        *g = y * (*g - dot);
                    }
                }
                vec![out]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = va.sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, pv| {
                let g = if keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let out = g
                    .broadcast(IxDyn(pv[0].shape()))
                    .expect("sum_axis grad broadcast")
                    .to_owned();
                vec![out]
            })),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.nodes[a.0].value.shape()[axis];
        let s = self.sum_axis(a, axis, keepdim);
        self.scale(s, real::<T>(1.0 / n as f64))
    }

    /// Sum over every element; result has shape `[]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().cloned().fold(T::zero(), |x, y| x + y);
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, pv| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(pv[0].shape()), gs)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, real::<T>(1.0 / n as f64))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            va.shape(),
            shape
        );
        let value = reshape_to(va.view(), shape);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, pv| vec![reshape_to(g.view(), pv[0].shape())])),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let value = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes_owned = axes.to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &ax) in axes_owned.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let value = va
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, pv| {
                let mut out = ArrayD::<T>::zeros(IxDyn(pv[0].shape()));
                out.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![out]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<ArrayViewD<'_, T>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.shape()[axis])
            .collect();
        self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut outs = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &sz in &sizes {
                    outs.push(
                        g.slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                            .as_standard_layout()
                            .to_owned(),
                    );
                    offset += sz;
                }
                outs
            })),
        )
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let value = va
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", va.shape(), shape))
            .to_owned();
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, pv| {
                vec![reduce_to_shape(g.view(), pv[0].shape())]
            })),
        )
    }

    // ---- image/grid ops with hand-written adjoints ----

    /// Unfold `[n, h, w, c]` into `[n*ho*wo, kh*kw*c]` patches for convolution.
    pub fn im2col(&mut self, a: Var, kh: usize, kw: usize, stride: usize, pad: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let geom = ColGeom::new(va.shape(), kh, kw, stride, pad);
        let value = im2col_values(va, &geom);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, pv| {
                vec![col2im_values(g, pv[0].shape(), &geom)]
            })),
        )
    }

    /// Bilinear crop of `feat [h, w, c]` at `boxes [n, 4]` (feature-frame
    /// corners) into `[n, k, k, c]`, one centered sample per bin,
    /// zero-padded outside the grid. Differentiable in both arguments.
    pub fn roi_align(&mut self, feat: Var, boxes: Var, k: usize) -> Var {
        assert!(k >= 1, "roi_align output size must be >= 1");
        let vf = &self.nodes[feat.0].value;
        let vb = &self.nodes[boxes.0].value;
        let value = roi_align_values(vf, vb, k);
        self.push(
            value,
            vec![feat, boxes],
            Some(Box::new(move |g, _, pv| roi_align_backward(g, &pv[0], &pv[1], k))),
        )
    }

    // ---- backward ----

    /// Reverse pass seeded with ones at `root` (typically a scalar loss).
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(IxDyn(self.nodes[root.0].value.shape())));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let Some(back) = &self.nodes[id].back else {
                continue;
            };
            let gout = grads[id].take().unwrap();
            let node = &self.nodes[id];
            let pviews: Vec<ArrayViewD<'_, T>> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].value.view())
                .collect();
            let pgrads = back(&gout, &node.value, &pviews);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.zip_mut_with(&pg, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }
}

// ---- helpers ----

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn bc_map<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    bc_map_view(a.view(), b.view(), f)
}

fn bc_map_view<T: Scalar>(
    a: ArrayViewD<'_, T>,
    b: ArrayViewD<'_, T>,
    f: impl Fn(T, T) -> T,
) -> ArrayD<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `grad` down to `target` shape, inverting a numpy-style broadcast.
fn reduce_to_shape<T: Scalar>(grad: ArrayViewD<'_, T>, target: &[usize]) -> ArrayD<T> {
    let mut g = grad.to_owned();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &td)) in g.shape().to_vec().iter().zip(target).enumerate() {
        if td == 1 && gd != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn reshape_to<T: Scalar>(a: ArrayViewD<'_, T>, shape: &[usize]) -> ArrayD<T> {
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape")
}

fn transpose_last2<'a, T: Scalar>(a: &ArrayViewD<'a, T>) -> ArrayD<T> {
    let nd = a.ndim();
    assert!(nd >= 2);
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 1, nd - 2);
    a.view()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .to_owned()
}

fn matmul_values<T: Scalar>(a: ArrayViewD<'_, T>, b: ArrayViewD<'_, T>) -> ArrayD<T> {
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let a2 = a.into_dimensionality::<ndarray::Ix2>().unwrap();
            let b2 = b.into_dimensionality::<ndarray::Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        }
        (3, 3) => {
            let a3 = a.into_dimensionality::<ndarray::Ix3>().unwrap();
            let b3 = b.into_dimensionality::<ndarray::Ix3>().unwrap();
            let (ba, m, ka) = a3.dim();
            let (bb, kb, n) = b3.dim();
            assert_eq!(ba, bb, "batched matmul batch dims");
            assert_eq!(ka, kb, "batched matmul inner dims");
            let mut out = ndarray::Array3::<T>::zeros((ba, m, n));
            for i in 0..ba {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let mut oi = out.index_axis_mut(Axis(0), i);
                ndarray::linalg::general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut oi);
            }
            out.into_dyn()
        }
        (da, db) => panic!("matmul on {da}-d x {db}-d arrays"),
    }
}

// ---- im2col / col2im ----

#[derive(Clone, Copy)]
struct ColGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ColGeom {
    fn new(shape: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(shape.len(), 4, "im2col expects [n,h,w,c]");
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ColGeom { n, h, w, c, kh, kw, stride, pad, ho, wo }
    }
}

fn im2col_values<T: Scalar>(a: &ArrayD<T>, g: &ColGeom) -> ArrayD<T> {
    let src = a.as_slice().expect("standard layout");
    let rows = g.n * g.ho * g.wo;
    let cols = g.kh * g.kw * g.c;
    let mut out = vec![T::zero(); rows * cols];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * cols;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src_off = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst_off = row + (ky * g.kw + kx) * g.c;
                        out[dst_off..dst_off + g.c]
                            .copy_from_slice(&src[src_off..src_off + g.c]);
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), out).unwrap()
}

fn col2im_values<T: Scalar>(grad: &ArrayD<T>, in_shape: &[usize], g: &ColGeom) -> ArrayD<T> {
    let gs = grad.as_slice().expect("standard layout");
    let cols = g.kh * g.kw * g.c;
    let mut out = vec![T::zero(); in_shape.iter().product()];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * cols;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst_off = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src_off = row + (ky * g.kw + kx) * g.c;
                        for c in 0..g.c {
                            out[dst_off + c] = out[dst_off + c] + gs[src_off + c];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), out).unwrap()
}

// ---- roi_align ----

struct BinSample {
    x: f64,
    y: f64,
    // d(sample pos)/d(box corner) factors
    dx_dx1: f64,
    dx_dx2: f64,
    dy_dy1: f64,
    dy_dy2: f64,
}

fn bin_sample(bx: [f64; 4], k: usize, by_i: usize, bx_i: usize) -> BinSample {
    let [x1, y1, x2, y2] = bx;
    let fx = (bx_i as f64 + 0.5) / k as f64;
    let fy = (by_i as f64 + 0.5) / k as f64;
    BinSample {
        x: x1 + fx * (x2 - x1),
        y: y1 + fy * (y2 - y1),
        dx_dx1: 1.0 - fx,
        dx_dx2: fx,
        dy_dy1: 1.0 - fy,
        dy_dy2: fy,
    }
}

/// Bilinear neighborhood of a sample point: up to 4 (row, col, weight,
/// dw/dx, dw/dy) taps; out-of-grid taps are dropped (zero padding).
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Vec<(usize, usize, f64, f64, f64)> {
    let x0 = x.floor();
    let y0 = y.floor();
    let dx = x - x0;
    let dy = y - y0;
    let mut taps = Vec::with_capacity(4);
    for (yy, wy, dwy) in [(y0, 1.0 - dy, -1.0), (y0 + 1.0, dy, 1.0)] {
        if yy < 0.0 || yy > (h - 1) as f64 {
            continue;
        }
        for (xx, wx, dwx) in [(x0, 1.0 - dx, -1.0), (x0 + 1.0, dx, 1.0)] {
            if xx < 0.0 || xx > (w - 1) as f64 {
                continue;
            }
            taps.push((yy as usize, xx as usize, wy * wx, wy * dwx, dwy * wx));
        }
    }
    taps
}

/// Forward-only RoI align shared with the non-graph geometry surface.
pub(crate) fn roi_align_plain<T: Scalar>(feat: &ArrayD<T>, boxes: &ArrayD<T>, k: usize) -> ArrayD<T> {
    roi_align_values(feat, boxes, k)
}

fn roi_align_values<T: Scalar>(feat: &ArrayD<T>, boxes: &ArrayD<T>, k: usize) -> ArrayD<T> {
    let fs = feat.shape();
    assert_eq!(fs.len(), 3, "roi_align feature must be [h,w,c]");
    let (h, w, c) = (fs[0], fs[1], fs[2]);
    let bs = boxes.shape();
    assert_eq!(bs.len(), 2);
    assert_eq!(bs[1], 4, "boxes must be [n,4]");
    let n = bs[0];
    let f = feat.as_slice().expect("standard layout");
    let b = boxes.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); n * k * k * c];
    for i in 0..n {
        let bx = [
            b[i * 4].to_f64(),
            b[i * 4 + 1].to_f64(),
            b[i * 4 + 2].to_f64(),
            b[i * 4 + 3].to_f64(),
        ];
        for by_i in 0..k {
            for bx_i in 0..k {
                let s = bin_sample(bx, k, by_i, bx_i);
                let dst = ((i * k + by_i) * k + bx_i) * c;
                for (row, col, weight, _, _) in bilinear_taps(s.x, s.y, h, w) {
                    let src = (row * w + col) * c;
                    let wt = real::<T>(weight);
                    for ch in 0..c {
                        out[dst + ch] = out[dst + ch] + wt * f[src + ch];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, k, k, c]), out).unwrap()
}

fn roi_align_backward<T: Scalar>(
    grad: &ArrayD<T>,
    feat: &ArrayViewD<'_, T>,
    boxes: &ArrayViewD<'_, T>,
    k: usize,
) -> Vec<ArrayD<T>> {
    let fs = feat.shape();
    let (h, w, c) = (fs[0], fs[1], fs[2]);
    let n = boxes.shape()[0];
    let f = feat.as_slice().expect("standard layout");
    let b = boxes.as_slice().expect("standard layout");
    let g = grad.as_slice().expect("standard layout");
    let mut gfeat = vec![T::zero(); h * w * c];
    let mut gboxes = vec![T::zero(); n * 4];
    for i in 0..n {
        let bx = [
            b[i * 4].to_f64(),
            b[i * 4 + 1].to_f64(),
            b[i * 4 + 2].to_f64(),
            b[i * 4 + 3].to_f64(),
        ];
        for by_i in 0..k {
            for bx_i in 0..k {
                let s = bin_sample(bx, k, by_i, bx_i);
                let src = ((i * k + by_i) * k + bx_i) * c;
                let mut dval_dx = 0.0f64;
                let mut dval_dy = 0.0f64;
                for (row, col, weight, dw_dx, dw_dy) in bilinear_taps(s.x, s.y, h, w) {
                    let off = (row * w + col) * c;
                    let wt = real::<T>(weight);
                    for ch in 0..c {
                        let go = g[src + ch];
                        gfeat[off + ch] = gfeat[off + ch] + go * wt;
                        let gf = go.to_f64() * f[off + ch].to_f64();
                        dval_dx += gf * dw_dx;
                        dval_dy += gf * dw_dy;
                    }
                }
                gboxes[i * 4] = gboxes[i * 4] + real::<T>(dval_dx * s.dx_dx1);
                gboxes[i * 4 + 1] = gboxes[i * 4 + 1] + real::<T>(dval_dy * s.dy_dy1);
                gboxes[i * 4 + 2] = gboxes[i * 4 + 2] + real::<T>(dval_dx * s.dx_dx2);
                gboxes[i * 4 + 3] = gboxes[i * 4 + 3] + real::<T>(dval_dy * s.dy_dy2);
            }
        }
    }
    vec![
        ArrayD::from_shape_vec(IxDyn(&[h, w, c]), gfeat).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[n, 4]), gboxes).unwrap(),
    ]
}

// ---- finite differences (shared by gradient-check tests) ----

/// Central finite-difference gradient of `f` at `x`, one element at a time.
pub fn finite_difference<T: Scalar>(
    x: &ArrayD<T>,
    eps: f64,
    mut f: impl FnMut(&ArrayD<T>) -> f64,
) -> ArrayD<f64> {
    let mut out = ArrayD::<f64>::zeros(IxDyn(x.shape()));
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + real::<T>(eps);
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - real::<T>(eps);
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        out.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    out
}

/// Max relative error between an analytic gradient and a reference,
/// with an absolute floor to avoid blowing up near-zero entries.
pub fn max_rel_err<T: Scalar>(analytic: &ArrayD<T>, reference: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(&a, &r)| {
            let a = a.to_f64();
            let denom = a.abs().max(r.abs()).max(1e-4);
            (a - r).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Gradient-check a scalar-valued function of one input array.
    fn check_unary(
        x: &ArrayD<f64>,
        eps: f64,
        tol: f64,
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) {
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let out = build(&mut g, xv);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        let analytic = grads.get(xv).expect("input gradient");
        let reference = finite_difference(x, eps, |xp| {
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(xp.clone());
            let out = build(&mut g, xv);
            let loss = g.sum_all(out);
            g.scalar(loss)
        });
        let err = max_rel_err(analytic, &reference);
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = randn(&mut rng, &[3, 4]);
        check_unary(&x, 1e-6, 1e-6, |g, v| {
            let e = g.exp(v);
            let s = g.scale(e, 0.5);
            let a = g.add_scalar(s, 2.0);
            g.sqrt(a)
        });
        check_unary(&x, 1e-6, 1e-5, |g, v| {
            let r = g.relu(v);
            let n = g.neg(v);
            g.mul(r, n)
        });
        check_unary(&x, 1e-6, 1e-5, |g, v| g.abs(v));
    }

    #[test]
    fn broadcast_binary_ops_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[3, 1]).mapv(|v| v + 2.5); // keep away from 0 for div
        // grad wrt a with broadcast rhs
        let mut g = Graph::<f64>::new();
        let av = g.leaf(a.clone());
        let bv = g.leaf(b.clone());
        let m = g.mul(av, bv);
        let d = g.div(m, bv);
        let mn = g.minimum(d, av);
        let mx = g.maximum(mn, bv);
        let loss = g.sum_all(mx);
        let grads = g.backward(loss);
        for (leaf, arr) in [(av, &a), (bv, &b)] {
            let analytic = grads.get(leaf).unwrap();
            let reference = finite_difference(arr, 1e-6, |xp| {
                let mut g = Graph::<f64>::new();
                let avp = if leaf == av { g.leaf(xp.clone()) } else { g.leaf(a.clone()) };
                let bvp = if leaf == bv { g.leaf(xp.clone()) } else { g.leaf(b.clone()) };
                let m = g.mul(avp, bvp);
                let d = g.div(m, bvp);
                let mn = g.minimum(d, avp);
                let mx = g.maximum(mn, bvp);
                let loss = g.sum_all(mx);
                g.scalar(loss)
            });
            let err = max_rel_err(analytic, &reference);
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn matmul_2d_and_batched_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let mut g = Graph::<f64>::new();
        let av = g.leaf(a.clone());
        let bv = g.leaf(b.clone());
        let c = g.matmul(av, bv);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        for (leaf, arr, other, leaf_is_a) in [(av, &a, &b, true), (bv, &b, &a, false)] {
            let reference = finite_difference(arr, 1e-6, |xp| {
                let mut g = Graph::<f64>::new();
                let (avp, bvp) = if leaf_is_a {
                    (g.leaf(xp.clone()), g.leaf(other.to_owned().clone()))
                } else {
                    (g.leaf(other.to_owned().clone()), g.leaf(xp.clone()))
                };
                let c = g.matmul(avp, bvp);
                let loss = g.sum_all(c);
                g.scalar(loss)
            });
            let err = max_rel_err(grads.get(leaf).unwrap(), &reference);
            assert!(err < 1e-6, "rel err {err}");
        }

        // batched
        let a3 = randn(&mut rng, &[2, 3, 4]);
        let b3 = randn(&mut rng, &[2, 4, 5]);
        let mut g = Graph::<f64>::new();
        let av = g.leaf(a3.clone());
        let bv = g.leaf(b3.clone());
        let c = g.matmul(av, bv);
        assert_eq!(g.value(c).shape(), &[2, 3, 5]);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        let reference = finite_difference(&a3, 1e-6, |xp| {
            let mut g = Graph::<f64>::new();
            let av = g.leaf(xp.clone());
            let bv = g.leaf(b3.clone());
            let c = g.matmul(av, bv);
            let loss = g.sum_all(c);
            g.scalar(loss)
        });
        let err = max_rel_err(grads.get(av).unwrap(), &reference);
        assert!(err < 1e-6, "batched rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_checks() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = randn(&mut rng, &[4, 6]).mapv(|v| v * 3.0);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let y = g.softmax_last(xv);
        for row in g.value(y).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // weighted sum so the gradient is nontrivial
        let w = randn(&mut rng, &[4, 6]);
        check_unary(&x, 1e-6, 1e-6, |g, v| {
            let y = g.softmax_last(v);
            let wv = g.constant(w.clone());
            g.mul(y, wv)
        });
    }

    #[test]
    fn reductions_and_shape_ops_grad_check() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 4]);
        check_unary(&x, 1e-6, 1e-6, |g, v| {
            let s = g.sum_axis(v, 1, true);
            let m = g.mean_axis(v, 2, false);
            let r = g.reshape(m, &[6]);
            let p = g.permute(s, &[2, 0, 1]);
            let pf = g.reshape(p, &[8]);
            let c = g.concat(0, &[r, pf]);
            let sl = g.slice(c, 0, 2, 11);
            let b = g.broadcast(sl, &[3, 9]);
            g.mean_all(b)
        });
    }

    #[test]
    fn im2col_grad_checks() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = randn(&mut rng, &[2, 5, 6, 3]);
        let w = randn(&mut rng, &[27, 4]);
        check_unary(&x, 1e-6, 1e-6, |g, v| {
            let cols = g.im2col(v, 3, 3, 2, 1);
            let wv = g.constant(w.clone());
            g.matmul(cols, wv)
        });
    }

    #[test]
    fn roi_align_grad_checks_both_inputs() {
        let mut rng = StdRng::seed_from_u64(13);
        let feat = randn(&mut rng, &[8, 8, 3]);
        // boxes away from integer grid lines so bilinear kinks don't bite
        let boxes = ArrayD::from_shape_vec(
            IxDyn(&[2, 4]),
            vec![0.3, 0.7, 4.6, 5.2, 2.1, 1.4, 6.3, 6.9],
        )
        .unwrap();
        let weights = randn(&mut rng, &[2, 3, 3, 3]);

        let run = |f: &ArrayD<f64>, b: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let mut g = Graph::<f64>::new();
            let fv = g.leaf(f.clone());
            let bv = g.leaf(b.clone());
            let out = g.roi_align(fv, bv, 3);
            let wv = g.constant(weights.clone());
            let prod = g.mul(out, wv);
            let loss = g.sum_all(prod);
            let grads = g.backward(loss);
            (
                g.scalar(loss),
                grads.get(fv).unwrap().clone(),
                grads.get(bv).unwrap().clone(),
            )
        };
        let (_, gfeat, gboxes) = run(&feat, &boxes);
        let ref_feat = finite_difference(&feat, 1e-6, |fp| run(fp, &boxes).0);
        let err = max_rel_err(&gfeat, &ref_feat);
        assert!(err < 1e-5, "feat grad rel err {err}");
        let ref_boxes = finite_difference(&boxes, 1e-6, |bp| run(&feat, bp).0);
        let err = max_rel_err(&gboxes, &ref_boxes);
        assert!(err < 1e-5, "boxes grad rel err {err}");
    }

    #[test]
    fn roi_align_outside_grid_is_zero() {
        let feat = ArrayD::from_elem(IxDyn(&[4, 4, 2]), 1.0f64);
        let boxes = ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![10.0, 10.0, 12.0, 12.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let fv = g.constant(feat);
        let bv = g.constant(boxes);
        let out = g.roi_align(fv, bv, 2);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_accumulates_over_shared_nodes() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let sq = g.mul(xv, xv);
        let y = g.add(sq, xv);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let gx = grads.get(xv).unwrap();
        for (i, &xi) in x.iter().enumerate() {
            assert!((gx.as_slice().unwrap()[i] - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }
}
