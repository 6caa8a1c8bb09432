//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Named parameters
//! are interned once per graph, so a weight used twice (a shared convolution
//! applied to two images) accumulates both gradient contributions.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::{self, ConvGeometry, ResampleMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    AddRowBias { a: Var, bias: Var, cols: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Exp(Var),
    SoftmaxRows { a: Var, cols: usize },
    RowL2Normalize { a: Var, cols: usize },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Resample { x: Var, map: Rc<ResampleMap>, channels: usize },
    Sum(Var),
    Mean(Var),
    FrobNorm(Var),
    ConcatRows(Var, Var),
    WeightedKl { u: Var, weights: Var, target: Rc<Tensor>, per_row: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | ConcatRows(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            AddRowBias { a, bias, .. } => vec![*a, *bias],
            Scale(a, _) | Relu(a) | Sigmoid(a) | Tanh(a) | Square(a) | Exp(a) | Reshape(a) => vec![*a],
            Sum(a) | Mean(a) | FrobNorm(a) => vec![*a],
            Transpose { a, .. } | SoftmaxRows { a, .. } | RowL2Normalize { a, .. } => vec![*a],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Resample { x, .. } => vec![*x],
            WeightedKl { u, weights, .. } => vec![*u, *weights],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, (Var, bool)>>,
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn unary(v: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    v.map(f)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf that receives gradient but is not a named parameter.
    pub fn input(&self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Interns a named parameter. Repeated calls with the same name return the
    /// same node.
    pub fn param(&self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&(v, _)) = self.params.borrow().get(name) {
            return v;
        }
        let v = self.push_leaf(t.clone(), trainable);
        self.params.borrow_mut().insert(name.to_string(), (v, trainable));
        v
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn map1(&self, a: Var, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var {
        let out = f(&self.nodes.borrow()[a.0].value);
        self.push(out, op)
    }

    fn map2(&self, a: Var, b: Var, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.map2(a, b, |x, y| zip(x, y, |p, q| p + q), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.map2(a, b, |x, y| zip(x, y, |p, q| p - q), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.map2(a, b, |x, y| zip(x, y, |p, q| p * q), Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.map1(a, |x| unary(x, |v| v * s), Op::Scale(a, s))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        self.map2(
            a,
            s,
            |x, y| {
                let k = y.data()[0];
                unary(x, |v| v * k)
            },
            Op::MulScalar(a, s),
        )
    }

    /// `[m,k] x [k,n]`; both operands must be rank 2.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.map2(
            a,
            b,
            |x, y| Tensor::from_parts(vec![m, n], tensor::matmul(x.data(), y.data(), m, k, n)),
            Op::MatMul { a, b, m, k, n },
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        self.map1(
            a,
            |x| Tensor::from_parts(vec![cols, rows], tensor::transpose(x.data(), rows, cols)),
            Op::Transpose { a, rows, cols },
        )
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Var {
        let cols = *self.shape(a).last().expect("rank >= 1");
        assert_eq!(self.shape(bias), vec![cols]);
        self.map2(
            a,
            bias,
            |x, b| {
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(cols) {
                    for (v, bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                out
            },
            Op::AddRowBias { a, bias, cols },
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.map1(a, |x| unary(x, |v| v.max(0.0)), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.map1(a, |x| unary(x, tensor::sigmoid), Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map1(a, |x| unary(x, f64::tanh), Op::Tanh(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.map1(a, |x| unary(x, |v| v * v), Op::Square(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.map1(a, |x| unary(x, f64::exp), Op::Exp(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let cols = *self.shape(a).last().expect("rank >= 1");
        self.map1(
            a,
            |x| {
                let mut out = x.clone();
                tensor::softmax_rows(out.data_mut(), cols);
                out
            },
            Op::SoftmaxRows { a, cols },
        )
    }

    /// Scales each row to unit Euclidean norm (zero rows stay zero).
    pub fn row_l2_normalize(&self, a: Var) -> Var {
        let cols = *self.shape(a).last().expect("rank >= 1");
        self.map1(
            a,
            |x| {
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(cols) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
                out
            },
            Op::RowL2Normalize { a, cols },
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        self.map1(
            a,
            |x| x.clone().reshape(&shape).expect("reshape size"),
            Op::Reshape(a),
        )
    }

    /// `x: [c, h, w]`, `w: [o, c, k, k]`, `b: [o]` -> `[o, oh, ow]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert_eq!(sx.len(), 3, "conv input must be [c,h,w]");
        assert_eq!(sw[1], sx[0], "conv channel mismatch");
        let geom = ConvGeometry {
            in_channels: sx[0],
            out_channels: sw[0],
            height: sx[1],
            width: sx[2],
            kernel: sw[2],
            stride,
            pad,
        };
        let out = {
            let nodes = self.nodes.borrow();
            tensor::conv2d(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                Some(nodes[b.0].value.data()),
                &geom,
            )
        };
        let shape = vec![geom.out_channels, geom.out_height(), geom.out_width()];
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom })
    }

    /// Resamples every plane of `x: [c, h, w]` with a fixed linear map.
    pub fn resample(&self, x: Var, map: Rc<ResampleMap>) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3);
        assert_eq!((s[1], s[2]), (map.in_h, map.in_w), "resample input size");
        let channels = s[0];
        let out = map.apply(self.nodes.borrow()[x.0].value.data(), channels);
        let shape = vec![channels, map.out_h, map.out_w];
        self.push(Tensor::from_parts(shape, out), Op::Resample { x, map, channels })
    }

    pub fn sum(&self, a: Var) -> Var {
        self.map1(a, |x| Tensor::scalar(x.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.map1(a, |x| Tensor::scalar(x.sum() / x.len() as f64), Op::Mean(a))
    }

    /// Frobenius norm. The gradient at the origin is taken to be zero.
    pub fn frob_norm(&self, a: Var) -> Var {
        self.map1(a, |x| Tensor::scalar(x.sq_norm().sqrt()), Op::FrobNorm(a))
    }

    /// Stacks `a: [m1, n]` on top of `b: [m2, n]`.
    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        self.map2(
            a,
            b,
            |x, y| {
                let n = *x.shape().last().unwrap();
                assert_eq!(n, *y.shape().last().unwrap());
                let mut data = x.data().to_vec();
                data.extend_from_slice(y.data());
                let rows = data.len() / n;
                Tensor::from_parts(vec![rows, n], data)
            },
            Op::ConcatRows(a, b),
        )
    }

    /// `(1/N) sum_n w_n * KL(target_n || u_n / sum(u_n))` for positive,
    /// unnormalised `u: [N, C]`, weights `w: [N]` and row-stochastic
    /// `target: [N, C]`. The target is treated as a constant.
    pub fn weighted_kl(&self, u: Var, weights: Var, target: Rc<Tensor>) -> Var {
        let (value, per_row) = {
            let nodes = self.nodes.borrow();
            let (uv, wv) = (&nodes[u.0].value, &nodes[weights.0].value);
            assert_eq!(uv.shape(), target.shape(), "kl shape mismatch");
            let cols = *uv.shape().last().unwrap();
            let rows = uv.len() / cols;
            assert_eq!(wv.len(), rows, "kl weight length");
            let mut per_row = Vec::with_capacity(rows);
            let mut total = 0.0;
            for (r, (urow, trow)) in uv
                .data()
                .chunks(cols)
                .zip(target.data().chunks(cols))
                .enumerate()
            {
                let s: f64 = urow.iter().sum();
                let mut kl = 0.0;
                for (&uc, &tc) in urow.iter().zip(trow) {
                    if tc > 0.0 {
                        kl += tc * (tc.ln() - (uc / s).ln());
                    }
                }
                per_row.push(kl);
                total += wv.data()[r] * kl;
            }
            (total / rows as f64, per_row)
        };
        self.push(
            Tensor::scalar(value),
            Op::WeightedKl {
                u,
                weights,
                target,
                per_row,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits: [R, K]` against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            let cols = *lv.shape().last().unwrap();
            let rows = lv.len() / cols;
            assert_eq!(rows, targets.len(), "one target per row");
            let mut probs = lv.data().to_vec();
            tensor::softmax_rows(&mut probs, cols);
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &lv.data()[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            (total / rows as f64, probs)
        };
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        assert_eq!(nodes[out.0].value.len(), 1, "backward needs a scalar output");
        if !nodes[out.0].requires_grad {
            return Gradients { grads };
        }
        grads[out.0] = Some(Tensor::from_parts(nodes[out.0].value.shape().to_vec(), vec![1.0]));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, contrib: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| nodes[v.0].requires_grad;

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, zip(&g, val(*b), |p, q| p * q));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, zip(&g, val(*a), |p, q| p * q));
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::MulScalar(a, s) => {
                    let k = val(*s).data()[0];
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.map(|v| v * k));
                    }
                    if needs(*s) {
                        let d: f64 = g.data().iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                        accumulate(&mut grads, *s, Tensor::scalar(d));
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    if needs(*a) {
                        let ga = tensor::matmul_nt(g.data(), val(*b).data(), *m, *n, *k);
                        accumulate(&mut grads, *a, Tensor::from_parts(vec![*m, *k], ga));
                    }
                    if needs(*b) {
                        let gb = tensor::matmul_tn(val(*a).data(), g.data(), *m, *k, *n);
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![*k, *n], gb));
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    let ga = tensor::transpose(g.data(), *cols, *rows);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![*rows, *cols], ga));
                }
                Op::AddRowBias { a, bias, cols } => {
                    if needs(*bias) {
                        let mut gb = vec![0.0; *cols];
                        for row in g.data().chunks(*cols) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::from_parts(vec![*cols], gb));
                    }
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Relu(a) => accumulate(&mut grads, *a, zip(&g, y, |p, q| if q > 0.0 { p } else { 0.0 })),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, zip(&g, y, |p, q| p * q * (1.0 - q))),
                Op::Tanh(a) => accumulate(&mut grads, *a, zip(&g, y, |p, q| p * (1.0 - q * q))),
                Op::Square(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |p, q| 2.0 * p * q)),
                Op::Exp(a) => accumulate(&mut grads, *a, zip(&g, y, |p, q| p * q)),
                Op::SoftmaxRows { a, cols } => {
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(*cols).zip(y.data().chunks(*cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowL2Normalize { a, cols } => {
                    let mut ga = g.clone();
                    let xin = val(*a);
                    for ((grow, yrow), xrow) in ga
                        .data_mut()
                        .chunks_mut(*cols)
                        .zip(y.data().chunks(*cols))
                        .zip(xin.data().chunks(*cols))
                    {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            grow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.clone().reshape(&shape).unwrap());
                }
                Op::Conv2d { x, w, b, geom } => {
                    if needs(*x) {
                        let gx = tensor::conv2d_backward_input(g.data(), val(*w).data(), geom);
                        let shape = val(*x).shape().to_vec();
                        accumulate(&mut grads, *x, Tensor::from_parts(shape, gx));
                    }
                    if needs(*w) || needs(*b) {
                        let (gw, gb) = tensor::conv2d_backward_params(g.data(), val(*x).data(), geom);
                        let wshape = val(*w).shape().to_vec();
                        accumulate(&mut grads, *w, Tensor::from_parts(wshape, gw));
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![geom.out_channels], gb));
                    }
                }
                Op::Resample { x, map, channels } => {
                    let gx = map.apply_transpose(g.data(), *channels);
                    let shape = val(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(shape, gx));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(val(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let s = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(x.shape(), s));
                }
                Op::FrobNorm(a) => {
                    let norm = y.data()[0];
                    let x = val(*a);
                    let ga = if norm > 0.0 {
                        let s = g.data()[0] / norm;
                        x.map(|v| v * s)
                    } else {
                        Tensor::zeros(x.shape())
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let (la, sa) = (val(*a).len(), val(*a).shape().to_vec());
                    let sb = val(*b).shape().to_vec();
                    let (ga, gb) = g.data().split_at(la);
                    accumulate(&mut grads, *a, Tensor::from_parts(sa, ga.to_vec()));
                    accumulate(&mut grads, *b, Tensor::from_parts(sb, gb.to_vec()));
                }
                Op::WeightedKl {
                    u,
                    weights,
                    target,
                    per_row,
                } => {
                    let s = g.data()[0] / per_row.len() as f64;
                    if needs(*weights) {
                        let gw = per_row.iter().map(|kl| kl * s).collect();
                        accumulate(&mut grads, *weights, Tensor::from_parts(val(*weights).shape().to_vec(), gw));
                    }
                    if needs(*u) {
                        let uv = val(*u);
                        let wv = val(*weights).data();
                        let cols = *uv.shape().last().unwrap();
                        let mut gu = vec![0.0; uv.len()];
                        for (r, ((grow, urow), trow)) in gu
                            .chunks_mut(cols)
                            .zip(uv.data().chunks(cols))
                            .zip(target.data().chunks(cols))
                            .enumerate()
                        {
                            let total: f64 = urow.iter().sum();
                            let k = s * wv[r];
                            for ((gv, &uc), &tc) in grow.iter_mut().zip(urow).zip(trow) {
                                *gv = k * (uc / total - tc) / uc;
                            }
                        }
                        accumulate(&mut grads, *u, Tensor::from_parts(uv.shape().to_vec(), gu));
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = val(*logits);
                    let cols = *lv.shape().last().unwrap();
                    let s = g.data()[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * cols + t] -= 1.0;
                    }
                    gl.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *logits, Tensor::from_parts(lv.shape().to_vec(), gl));
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every trainable parameter, zero-filled where no gradient
    /// reached the parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let nodes = self.nodes.borrow();
        self.params
            .borrow()
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, (v, _))| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Names of all parameters touched by this graph, with their trainability.
    pub fn param_names(&self) -> Vec<(String, bool)> {
        self.params
            .borrow()
            .iter()
            .map(|(k, (_, t))| (k.clone(), *t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d out / d input for a graph builder.
    fn check(shape: &[usize], seed: u64, positive: bool, build: impl Fn(&Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn(shape, 1.0, &mut rng);
        if positive {
            x = x.map(|v| v.abs() + 0.1);
        }
        let g = Graph::new();
        let xv = g.input(x.clone());
        let out = build(&g, xv);
        let grads = g.backward(out);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::new();
                let v = g.input(xp);
                let o = build(&g, v);
                g.scalar(o)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "elem {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        check(&[3, 4], 1, false, |g, x| {
            let t = g.tanh(x);
            let s = g.sigmoid(x);
            let m = g.mul(t, s);
            let q = g.square(m);
            let e = g.exp(g.scale(q, 0.3));
            g.add(g.sum(e), g.mean(g.sub(t, s)))
        });
    }

    #[test]
    fn matmul_transpose_bias_softmax() {
        check(&[3, 4], 2, false, |g, x| {
            let w = g.constant(Tensor::new(&[4, 2], vec![0.5, -1.0, 0.2, 0.3, 1.1, -0.4, 0.0, 0.7]).unwrap());
            let b = g.constant(Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
            let y = g.add_row_bias(g.matmul(x, w), b);
            let p = g.softmax_rows(y);
            let t = g.transpose(p);
            let xt = g.matmul(t, x);
            g.frob_norm(xt)
        });
    }

    #[test]
    fn normalize_concat_reshape() {
        check(&[2, 3], 3, false, |g, x| {
            let n = g.row_l2_normalize(x);
            let c = g.concat_rows(n, x);
            let r = g.reshape(c, &[3, 4]);
            let w = g.constant(Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap());
            g.sum(g.mul(r, w))
        });
    }

    #[test]
    fn conv_and_resample() {
        check(&[2, 5, 6], 4, false, |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let w = g.constant(Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng));
            let b = g.constant(Tensor::randn(&[3], 0.5, &mut rng));
            let y = g.conv2d(x, w, b, 2, 1);
            let map = Rc::new(ResampleMap::new(tensor::ResampleMode::Bilinear, 3, 3, 7, 5));
            let up = g.resample(y, map);
            g.sum(g.square(up))
        });
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        check(&[3, 2, 3, 3], 6, false, |g, w| {
            let xv = g.constant(x.clone());
            let b = g.constant(Tensor::zeros(&[3]));
            g.sum(g.square(g.conv2d(xv, w, b, 2, 1)))
        });
    }

    #[test]
    fn weighted_kl_gradient() {
        let target = Rc::new(Tensor::new(&[2, 3], vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0]).unwrap());
        check(&[2, 3], 7, true, |g, u| {
            let w = g.constant(Tensor::new(&[2], vec![0.7, 0.4]).unwrap());
            g.weighted_kl(u, w, target.clone())
        });
        let u = Tensor::new(&[2, 3], vec![0.3, 1.0, 0.6, 2.0, 0.5, 0.1]).unwrap();
        check(&[2], 8, true, |g, w| {
            let uv = g.constant(u.clone());
            g.weighted_kl(uv, w, target.clone())
        });
    }

    #[test]
    fn cross_entropy_and_scalar_mul() {
        check(&[4, 3], 9, false, |g, x| {
            let s = g.constant(Tensor::scalar(1.7));
            g.cross_entropy(g.mul_scalar(x, s), &[0, 2, 1, 1])
        });
        let x = Tensor::new(&[2, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        check(&[1], 10, false, |g, s| {
            let xv = g.constant(x.clone());
            g.cross_entropy(g.mul_scalar(xv, g.exp(s)), &[1, 0])
        });
    }

    #[test]
    fn frob_norm_at_zero_has_zero_gradient() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        let out = g.frob_norm(x);
        assert_eq!(g.scalar(out), 0.0);
        let grads = g.backward(out);
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_param_accumulates() {
        let g = Graph::new();
        let w = Tensor::scalar(2.0);
        let a = g.param("w", &w, true);
        let b = g.param("w", &w, true);
        assert_eq!(a, b);
        let out = g.add(g.square(a), g.scale(b, 3.0));
        let grads = g.param_grads(&g.backward(out));
        assert_eq!(grads["w"].data()[0], 7.0);
    }
}
