//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records one computation graph: each operation evaluates
//! eagerly, stores its result, and remembers the indices of its inputs.
//! [`Tape::backward`] walks the nodes in reverse, accumulating gradients
//! into every node whose ancestry includes a differentiable leaf. Tapes are
//! built fresh for every training iteration; parameters enter as leaves and
//! their gradients are read back out after the backward pass.

pub mod conv;
pub mod gradcheck;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix4, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S: Scalar> {
    value: ArrayD<S>,
    grad: Option<ArrayD<S>>,
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Broadcast product of a `[N, 1, H, W]` mask with a `[N, C, H, W]` tensor.
    MulMask { mask: usize, x: usize },
    /// `a * x + b`; only `a` matters for the gradient.
    Affine { x: usize, a: S },
    Square(usize),
    Abs(usize),
    Sqrt(usize),
    Relu(usize),
    LeakyRelu { x: usize, slope: S },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    MeanAll(usize),
    /// Weighted sum of scalar nodes.
    WeightedSum(Vec<(usize, S)>),
    PadReflect { x: usize, pad: usize },
    PadZero { x: usize, pad: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    InstanceNorm { x: usize, inv_std: Array2<S> },
    MaxChannels { x: usize, argmax: Array3<usize> },
    UpsampleNearest { x: usize, target: (usize, usize) },
}

/// One computation graph with eagerly evaluated values.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, needs_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &ArrayD<S> {
        &self.nodes[i].value
    }

    /// Insert a leaf. `needs_grad` marks it as a differentiable parameter.
    pub fn leaf(&mut self, value: ArrayD<S>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// Insert a non-differentiable leaf.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.leaf(value, false)
    }

    /// Insert a 0-dimensional non-differentiable leaf.
    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Copy a node's value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-dimensional node.
    pub fn scalar_value(&self, v: Var) -> S {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "node is not a scalar");
        val[IxDyn(&[])]
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Diagnostic sweep after a backward pass: describes the lowest-index
    /// nodes with non-finite values (forward poison origin) and the
    /// highest-index nodes with non-finite gradients (backward origin,
    /// nearest the loss). Returns human-readable lines; empty if clean.
    pub fn debug_nonfinite_report(&self) -> Vec<String> {
        fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
            match op {
                Op::Leaf => "leaf",
                Op::Add(..) => "add",
                Op::Sub(..) => "sub",
                Op::Mul(..) => "mul",
                Op::MulMask { .. } => "mul_mask",
                Op::Affine { .. } => "affine",
                Op::Square(..) => "square",
                Op::Abs(..) => "abs",
                Op::Sqrt(..) => "sqrt",
                Op::Relu(..) => "relu",
                Op::LeakyRelu { .. } => "leaky_relu",
                Op::Tanh(..) => "tanh",
                Op::Sigmoid(..) => "sigmoid",
                Op::Softplus(..) => "softplus",
                Op::MeanAll(..) => "mean_all",
                Op::WeightedSum(..) => "weighted_sum",
                Op::PadReflect { .. } => "pad_reflect",
                Op::PadZero { .. } => "pad_zero",
                Op::Conv2d { .. } => "conv2d",
                Op::ConvTranspose2d { .. } => "conv_transpose2d",
                Op::InstanceNorm { .. } => "instance_norm",
                Op::MaxChannels { .. } => "max_channels",
                Op::UpsampleNearest { .. } => "upsample_nearest",
            }
        }
        fn span<S: Scalar>(a: &ArrayD<S>) -> (usize, f64, f64) {
            let (mut bad, mut lo, mut hi) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
            for &v in a.iter() {
                let v = v.to_f64();
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                } else {
                    bad += 1;
                }
            }
            (bad, lo, hi)
        }
        let mut lines = Vec::new();
        let mut shown = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            let (bad, lo, hi) = span(&n.value);
            if bad > 0 {
                lines.push(format!(
                    "value poison: node {i} ({}) {bad}/{} bad, finite range [{lo:.3e}, {hi:.3e}]",
                    op_name(&n.op),
                    n.value.len()
                ));
                shown += 1;
                if shown >= 4 {
                    break;
                }
            }
        }
        shown = 0;
        for (i, n) in self.nodes.iter().enumerate().rev() {
            let Some(g) = &n.grad else { continue };
            let (bad, _, _) = span(g);
            if bad > 0 {
                let (vbad, vlo, vhi) = span(&n.value);
                lines.push(format!(
                    "grad poison: node {i} ({}) {bad}/{} bad; own value {vbad} bad in [{vlo:.3e}, {vhi:.3e}]",
                    op_name(&n.op),
                    g.len()
                ));
                shown += 1;
                if shown >= 6 {
                    break;
                }
            }
        }
        lines
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a.0).shape(), self.val(b.0).shape());
        let value = self.val(a.0) + self.val(b.0);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a.0).shape(), self.val(b.0).shape());
        let value = self.val(a.0) - self.val(b.0);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a.0).shape(), self.val(b.0).shape());
        let value = self.val(a.0) * self.val(b.0);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Mul(a.0, b.0))
    }

    /// Broadcast product `mask ⊙ x` with `mask` of shape `[N, 1, H, W]` and
    /// `x` of shape `[N, C, H, W]`.
    pub fn mul_mask(&mut self, mask: Var, x: Var) -> Var {
        let ms = self.val(mask.0).shape().to_vec();
        let xs = self.val(x.0).shape().to_vec();
        assert_eq!(ms.len(), 4);
        assert_eq!(xs.len(), 4);
        assert_eq!(ms[1], 1, "mask must be single-channel");
        assert_eq!((ms[0], ms[2], ms[3]), (xs[0], xs[2], xs[3]));
        let value = self.val(x.0) * self.val(mask.0);
        let needs = self.needs(mask.0) || self.needs(x.0);
        self.push(value, needs, Op::MulMask { mask: mask.0, x: x.0 })
    }

    /// `a * x + b` with scalar coefficients.
    pub fn affine(&mut self, x: Var, a: S, b: S) -> Var {
        let value = self.val(x.0).mapv(|v| a * v + b);
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Affine { x: x.0, a })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.val(x.0).mapv(|v| v * v);
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Square(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.val(x.0).mapv(|v| v.abs());
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Abs(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.val(x.0).mapv(|v| v.sqrt());
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Sqrt(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let zero = S::zero();
        let value = self.val(x.0).mapv(|v| if v > zero { v } else { zero });
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let zero = S::zero();
        let value = self.val(x.0).mapv(|v| if v > zero { v } else { slope * v });
        let needs = self.needs(x.0);
        self.push(value, needs, Op::LeakyRelu { x: x.0, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.val(x.0).mapv(|v| v.tanh());
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let value = self.val(x.0).mapv(|v| one / (one + (-v).exp()));
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Sigmoid(x.0))
    }

    /// `ln(1 + e^x)`, computed in the overflow-safe form
    /// `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let zero = S::zero();
        let one = S::one();
        let value = self
            .val(x.0)
            .mapv(|v| v.max(zero) + (one + (-v.abs()).exp()).ln());
        let needs = self.needs(x.0);
        self.push(value, needs, Op::Softplus(x.0))
    }

    /// Mean over all elements, producing a 0-dimensional node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x.0).len();
        assert!(n > 0, "mean of an empty tensor");
        let mean = self.val(x.0).sum() / S::from_usize(n);
        let needs = self.needs(x.0);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            needs,
            Op::MeanAll(x.0),
        )
    }

    /// Weighted sum of 0-dimensional nodes, producing a 0-dimensional node.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Var {
        let mut acc = S::zero();
        let mut needs = false;
        for &(v, a) in terms {
            assert_eq!(self.val(v.0).ndim(), 0, "weighted_sum expects scalar nodes");
            acc = acc + a * self.scalar_value(v);
            needs = needs || self.needs(v.0);
        }
        let op = Op::WeightedSum(terms.iter().map(|&(v, a)| (v.0, a)).collect());
        self.push(ArrayD::from_elem(IxDyn(&[]), acc), needs, op)
    }

    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(pad < h && pad < w, "reflect pad {pad} too large for {h}x{w}");
        let map_i = reflect_map(h, pad);
        let map_j = reflect_map(w, pad);
        let mut y = Array4::zeros((n, c, h + 2 * pad, w + 2 * pad));
        for ni in 0..n {
            for ci in 0..c {
                for (i, &si) in map_i.iter().enumerate() {
                    for (j, &sj) in map_j.iter().enumerate() {
                        y[[ni, ci, i, j]] = xv[[ni, ci, si, sj]];
                    }
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(y.into_dyn(), needs, Op::PadReflect { x: x.0, pad })
    }

    pub fn pad_zero(&mut self, x: Var, pad: usize) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut y = Array4::zeros((n, c, h + 2 * pad, w + 2 * pad));
        y.slice_mut(s![.., .., pad..pad + h, pad..pad + w]).assign(&xv);
        let needs = self.needs(x.0);
        self.push(y.into_dyn(), needs, Op::PadZero { x: x.0, pad })
    }

    /// Valid convolution; pad explicitly beforehand when needed.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.val(w.0).view().into_dimensionality::<Ix4>().unwrap();
        let bv = b.map(|b| {
            self.val(b.0)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });
        let y = conv::conv2d_forward(&xv, &wv, bv.as_ref(), stride);
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map_or(false, |b| self.needs(b.0));
        self.push(
            y.into_dyn(),
            needs,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
            },
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.val(w.0).view().into_dimensionality::<Ix4>().unwrap();
        let bv = b.map(|b| {
            self.val(b.0)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });
        let y = conv::conv_transpose2d_forward(&xv, &wv, bv.as_ref(), stride, pad, out_pad);
        let needs =
            self.needs(x.0) || self.needs(w.0) || b.map_or(false, |b| self.needs(b.0));
        self.push(
            y.into_dyn(),
            needs,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
                out_pad,
            },
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes
    /// (no learned affine).
    pub fn instance_norm(&mut self, x: Var, eps: S) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(h * w > 0);
        let count = S::from_usize(h * w);
        let mut y = Array4::zeros((n, c, h, w));
        let mut inv_std = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.slice(s![ni, ci, .., ..]);
                let mean = plane.sum() / count;
                let mut var = S::zero();
                for &v in plane.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var /= count;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[[ni, ci]] = inv;
                let mut out = y.slice_mut(s![ni, ci, .., ..]);
                for (o, &v) in out.iter_mut().zip(plane.iter()) {
                    *o = (v - mean) * inv;
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(y.into_dyn(), needs, Op::InstanceNorm { x: x.0, inv_std })
    }

    /// Channel-wise maximum: `[N, C, H, W]` -> `[N, 1, H, W]`.
    pub fn max_channels(&mut self, x: Var) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(c > 0);
        let mut y = Array4::zeros((n, 1, h, w));
        let mut argmax = Array3::zeros((n, h, w));
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut best = xv[[ni, 0, i, j]];
                    let mut best_c = 0usize;
                    for ci in 1..c {
                        let v = xv[[ni, ci, i, j]];
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    y[[ni, 0, i, j]] = best;
                    argmax[[ni, i, j]] = best_c;
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(y.into_dyn(), needs, Op::MaxChannels { x: x.0, argmax })
    }

    /// Nearest-neighbor upsampling to a target spatial size (which must be
    /// at least the input size in each dimension).
    pub fn upsample_nearest(&mut self, x: Var, target: (usize, usize)) -> Var {
        let xv = self.val(x.0).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let (th, tw) = target;
        assert!(th >= h && tw >= w, "upsample target smaller than input");
        let mut y = Array4::zeros((n, c, th, tw));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..th {
                    for j in 0..tw {
                        y[[ni, ci, i, j]] = xv[[ni, ci, i * h / th, j * w / tw]];
                    }
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(y.into_dyn(), needs, Op::UpsampleNearest { x: x.0, target })
    }

    /// Reverse pass from a scalar root. Gradients of all reachable
    /// differentiable nodes become available through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward starts from a scalar node"
        );
        assert!(
            self.nodes[root.0].needs_grad,
            "root does not depend on any differentiable leaf"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(ArrayD::from_elem(IxDyn(&[]), S::one()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].grad.take().expect("checked above");
            let deltas = self.local_gradients(&op, i, &g);
            for (p, delta) in deltas {
                self.accumulate(p, delta);
            }
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn accumulate(&mut self, p: usize, delta: ArrayD<S>) {
        let node = &mut self.nodes[p];
        debug_assert_eq!(node.value.shape(), delta.shape());
        match &mut node.grad {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta),
        }
    }

    /// Per-op chain rule: gradient contributions to each differentiable input.
    fn local_gradients(&self, op: &Op<S>, i: usize, g: &ArrayD<S>) -> Vec<(usize, ArrayD<S>)> {
        let mut out: Vec<(usize, ArrayD<S>)> = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.mapv(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g * self.val(*b)));
                }
                if self.needs(*b) {
                    out.push((*b, g * self.val(*a)));
                }
            }
            Op::MulMask { mask, x } => {
                if self.needs(*x) {
                    out.push((*x, g * self.val(*mask)));
                }
                if self.needs(*mask) {
                    let prod = g * self.val(*x);
                    let summed = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
                    out.push((*mask, summed));
                }
            }
            Op::Affine { x, a } => {
                if self.needs(*x) {
                    out.push((*x, g.mapv(|v| *a * v)));
                }
            }
            Op::Square(x) => {
                if self.needs(*x) {
                    let two = S::from_f64(2.0);
                    let mut d = g * self.val(*x);
                    d.mapv_inplace(|v| two * v);
                    out.push((*x, d));
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    let zero = S::zero();
                    let sign = self.val(*x).mapv(|v| {
                        if v > zero {
                            S::one()
                        } else if v < zero {
                            -S::one()
                        } else {
                            zero
                        }
                    });
                    out.push((*x, g * &sign));
                }
            }
            Op::Sqrt(x) => {
                if self.needs(*x) {
                    let half = S::from_f64(0.5);
                    // d/dx sqrt(x) = 1 / (2 sqrt(x)); node value is sqrt(x).
                    let y = self.val(i);
                    let d = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| half * gv / yv);
                    out.push((*x, d));
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let zero = S::zero();
                    let d = ndarray::Zip::from(g)
                        .and(self.val(*x))
                        .map_collect(|&gv, &xv| if xv > zero { gv } else { zero });
                    out.push((*x, d));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let zero = S::zero();
                    let d = ndarray::Zip::from(g)
                        .and(self.val(*x))
                        .map_collect(|&gv, &xv| if xv > zero { gv } else { *slope * gv });
                    out.push((*x, d));
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let one = S::one();
                    let y = self.val(i);
                    let d = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * (one - yv * yv));
                    out.push((*x, d));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let one = S::one();
                    let y = self.val(i);
                    let d = ndarray::Zip::from(g)
                        .and(y)
                        .map_collect(|&gv, &yv| gv * yv * (one - yv));
                    out.push((*x, d));
                }
            }
            Op::Softplus(x) => {
                if self.needs(*x) {
                    let one = S::one();
                    let xv = self.val(*x);
                    let d = ndarray::Zip::from(g)
                        .and(xv)
                        .map_collect(|&gv, &v| gv * (one / (one + (-v).exp())));
                    out.push((*x, d));
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = self.val(*x).len();
                    let gs = g[IxDyn(&[])] / S::from_usize(n);
                    out.push((*x, ArrayD::from_elem(self.val(*x).raw_dim(), gs)));
                }
            }
            Op::WeightedSum(terms) => {
                let gs = g[IxDyn(&[])];
                for &(v, a) in terms {
                    if self.needs(v) {
                        out.push((v, ArrayD::from_elem(IxDyn(&[]), a * gs)));
                    }
                }
            }
            Op::PadReflect { x, pad } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xv = self.val(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = xv.dim();
                    let map_i = reflect_map(h, *pad);
                    let map_j = reflect_map(w, *pad);
                    let mut dx = Array4::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for (ii, &si) in map_i.iter().enumerate() {
                                for (jj, &sj) in map_j.iter().enumerate() {
                                    dx[[ni, ci, si, sj]] += gv[[ni, ci, ii, jj]];
                                }
                            }
                        }
                    }
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::PadZero { x, pad } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xv = self.val(*x).shape();
                    let (h, w) = (xv[2], xv[3]);
                    let dx = gv
                        .slice(s![.., .., *pad..*pad + h, *pad..*pad + w])
                        .to_owned();
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let xv = self.val(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.val(*w).view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = conv::conv2d_backward_masked(
                    &xv,
                    &wv,
                    &gv,
                    *stride,
                    self.needs(*x),
                    self.needs(*w),
                    b.map_or(false, |b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx.into_dyn()));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw.into_dyn()));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db.into_dyn()));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_pad,
            } => {
                let xv = self.val(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.val(*w).view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = conv::conv_transpose2d_backward_masked(
                    &xv,
                    &wv,
                    &gv,
                    *stride,
                    *pad,
                    *out_pad,
                    self.needs(*x),
                    self.needs(*w),
                    b.map_or(false, |b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx.into_dyn()));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw.into_dyn()));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db.into_dyn()));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let yv = self.val(i).view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = yv.dim();
                    let count = S::from_usize(h * w);
                    let mut dx = Array4::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gp = gv.slice(s![ni, ci, .., ..]);
                            let yp = yv.slice(s![ni, ci, .., ..]);
                            let g_mean = gp.sum() / count;
                            let mut gy_mean = S::zero();
                            for (&ge, &ye) in gp.iter().zip(yp.iter()) {
                                gy_mean += ge * ye;
                            }
                            gy_mean /= count;
                            let inv = inv_std[[ni, ci]];
                            let mut dp = dx.slice_mut(s![ni, ci, .., ..]);
                            for ((d, &ge), &ye) in
                                dp.iter_mut().zip(gp.iter()).zip(yp.iter())
                            {
                                *d = inv * (ge - g_mean - ye * gy_mean);
                            }
                        }
                    }
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::MaxChannels { x, argmax } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xs = self.val(*x).shape();
                    let mut dx = Array4::zeros((xs[0], xs[1], xs[2], xs[3]));
                    let (n, _, h, w) = dx.dim();
                    for ni in 0..n {
                        for ii in 0..h {
                            for jj in 0..w {
                                dx[[ni, argmax[[ni, ii, jj]], ii, jj]] += gv[[ni, 0, ii, jj]];
                            }
                        }
                    }
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::UpsampleNearest { x, target } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let xs = self.val(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let mut dx = Array4::zeros((xs[0], xs[1], h, w));
                    let (n, c, th, tw) = gv.dim();
                    debug_assert_eq!((th, tw), *target);
                    for ni in 0..n {
                        for ci in 0..c {
                            for ii in 0..th {
                                for jj in 0..tw {
                                    dx[[ni, ci, ii * h / th, jj * w / tw]] +=
                                        gv[[ni, ci, ii, jj]];
                                }
                            }
                        }
                    }
                    out.push((*x, dx.into_dyn()));
                }
            }
        }
        out
    }
}

/// Index map for reflection padding without edge repetition.
fn reflect_map(len: usize, pad: usize) -> Vec<usize> {
    (0..len + 2 * pad)
        .map(|i| {
            let j = (i as isize - pad as isize).unsigned_abs();
            if j >= len {
                2 * (len - 1) - j
            } else {
                j
            }
        })
        .collect()
}
