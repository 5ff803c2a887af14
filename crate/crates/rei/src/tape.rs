//! Reverse-mode differentiation on a flat operation tape.
//!
//! Nodes are whole tensors; every recorded op knows its vector-Jacobian
//! product. Values are computed eagerly at recording time, so a node's value
//! is always available to later ops and to the backward pass. Node inputs
//! always precede the node itself, which makes a single reverse sweep a valid
//! topological traversal.
//!
//! Fixed linear operators (measurement models, transforms, backprojections)
//! enter the tape through the [`LinearMap`] trait: the forward is arbitrary,
//! the VJP is the operator's adjoint.

use std::sync::Arc;

use crate::error::{ReiError, Result};
use crate::kernels;
use crate::tensor::{tensor_from, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// A fixed (non-trainable) linear operator with an explicit adjoint.
pub trait LinearMap: Send + Sync {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize>;
    fn forward(&self, x: &Tensor) -> Tensor;
    /// Transpose applied to a cotangent of the output.
    fn adjoint(&self, grad: &Tensor) -> Tensor;
    fn label(&self) -> &'static str {
        "linear-map"
    }
}

enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    SumSq(NodeId),
    Dot(NodeId, NodeId),
    Slice { src: NodeId, offset: usize },
    Reshape(NodeId),
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    ConcatC(NodeId, NodeId),
    Map { src: NodeId, map: Arc<dyn LinearMap> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Records a leaf holding the given tensor. Leaves receive gradients like
    /// any other node; whether they are parameters or data is the caller's
    /// business.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    fn shape2(&self, a: NodeId, b: NodeId, what: &str) -> &[usize] {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "{what}: shape {sa:?} vs {sb:?}");
        self.value(a).shape()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.shape2(a, b, "add");
        let v = self.value(a).add(self.value(b)).unwrap();
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.shape2(a, b, "sub");
        let v = self.value(a).sub(self.value(b)).unwrap();
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.shape2(a, b, "mul");
        let v = self.value(a).mul(self.value(b)).unwrap();
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(c));
        self.push(Op::ClampMin(a, c), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).norm_sq());
        self.push(Op::SumSq(a), v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.shape2(a, b, "dot");
        let v = Tensor::scalar(self.value(a).dot(self.value(b)).unwrap());
        self.push(Op::Dot(a, b), v)
    }

    /// Flat 1-D slice of the source data; the workhorse for carving parameter
    /// blocks out of a single flat parameter leaf.
    pub fn slice(&mut self, src: NodeId, offset: usize, len: usize) -> NodeId {
        let data = self.value(src).data();
        assert!(offset + len <= data.len(), "slice out of range");
        let v = tensor_from(vec![len], data[offset..offset + len].to_vec());
        self.push(Op::Slice { src, offset }, v)
    }

    pub fn reshape(&mut self, src: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(src).reshaped(shape).expect("reshape numel");
        self.push(Op::Reshape(src), v)
    }

    /// 3x3 same-padding convolution of x shaped (cin, h, w) with weights
    /// (cout, cin, 3, 3) and a cout-vector bias.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 3, "conv3x3 input must be [c,h,w]");
        assert_eq!(ws.len(), 4, "conv3x3 weight must be [cout,cin,3,3]");
        assert_eq!(ws[1], xs[0], "conv3x3 channel mismatch");
        assert_eq!((ws[2], ws[3]), (3, 3));
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        assert_eq!(self.value(b).numel(), cout, "conv3x3 bias length");
        let mut out = vec![0.0; cout * h * wd];
        kernels::conv3x3_forward(
            self.value(x).data(),
            cin,
            h,
            wd,
            self.value(w).data(),
            cout,
            self.value(b).data(),
            &mut out,
        );
        let v = tensor_from(vec![cout, h, wd], out);
        self.push(Op::Conv3x3 { x, w, b }, v)
    }

    pub fn avgpool2(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        assert!(s[1] % 2 == 0 && s[2] % 2 == 0, "avgpool2 needs even extents");
        let mut out = vec![0.0; s[0] * (s[1] / 2) * (s[2] / 2)];
        kernels::avgpool2_forward(self.value(a).data(), s[0], s[1], s[2], &mut out);
        let v = tensor_from(vec![s[0], s[1] / 2, s[2] / 2], out);
        self.push(Op::AvgPool2(a), v)
    }

    pub fn upsample2(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let mut out = vec![0.0; s[0] * 4 * s[1] * s[2]];
        kernels::upsample2_forward(self.value(a).data(), s[0], s[1], s[2], &mut out);
        let v = tensor_from(vec![s[0], 2 * s[1], 2 * s[2]], out);
        self.push(Op::Upsample2(a), v)
    }

    /// Concatenates two (c, h, w) tensors along the channel axis.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(&sa[1..], &sb[1..], "concat_c spatial mismatch");
        let mut out = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let v = tensor_from(vec![sa[0] + sb[0], sa[1], sa[2]], out);
        self.push(Op::ConcatC(a, b), v)
    }

    /// Applies a fixed linear operator; its adjoint supplies the VJP.
    pub fn apply_map(&mut self, src: NodeId, map: Arc<dyn LinearMap>) -> NodeId {
        let v = map.forward(self.value(src));
        debug_assert_eq!(v.shape(), map.out_shape(self.value(src).shape()).as_slice());
        self.push(Op::Map { src, map }, v)
    }

    /// Smallest absolute pre-activation over every kink op (relu, clamp)
    /// recorded so far. Gradient checks against finite differences are only
    /// meaningful away from the kinks; this lets callers filter instances.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for &v in self.nodes[a.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::ClampMin(a, c) => {
                    for &v in self.nodes[a.0].value.data() {
                        margin = margin.min((v - c).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar output. Returns per-node gradients; the
    /// tape itself is left unchanged and can be reused for further recording.
    pub fn backward(&mut self, out: NodeId) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(ReiError::shape(format!(
                "backward expects a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| tensor_from(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let numel = |id: NodeId| self.nodes[id.0].value.numel();
        let mut acc = |id: NodeId, contrib: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel(id)]);
            contrib(slot);
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g, 1.0));
                acc(*b, &mut |d| add_into(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g, 1.0));
                acc(*b, &mut |d| add_into(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| mul_add_into(d, g, bv));
                acc(*b, &mut |d| mul_add_into(d, g, av));
            }
            Op::Scale(a, c) => acc(*a, &mut |d| add_into(d, g, *c)),
            Op::Offset(a) => acc(*a, &mut |d| add_into(d, g, 1.0)),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(av) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let ov = self.nodes[i].value.data();
                acc(*a, &mut |d| mul_add_into(d, g, ov));
            }
            Op::Ln(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(av) {
                        *dv += gv / xv;
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(av) {
                        if *xv > *c {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let go = g[0];
                acc(*a, &mut |d| {
                    for dv in d.iter_mut() {
                        *dv += go;
                    }
                });
            }
            Op::SumSq(a) => {
                let go = 2.0 * g[0];
                let av = val(*a);
                acc(*a, &mut |d| {
                    for (dv, xv) in d.iter_mut().zip(av) {
                        *dv += go * xv;
                    }
                });
            }
            Op::Dot(a, b) => {
                let go = g[0];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for (dv, xv) in d.iter_mut().zip(bv) {
                        *dv += go * xv;
                    }
                });
                acc(*b, &mut |d| {
                    for (dv, xv) in d.iter_mut().zip(av) {
                        *dv += go * xv;
                    }
                });
            }
            Op::Slice { src, offset } => {
                acc(*src, &mut |d| add_into(&mut d[*offset..*offset + g.len()], g, 1.0));
            }
            Op::Reshape(src) => acc(*src, &mut |d| add_into(d, g, 1.0)),
            Op::Conv3x3 { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let cout = self.nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    kernels::conv3x3_grad_input(g, cin, h, wd, wv, cout, d)
                });
                // Weight and bias grads accumulate into separate slots, so the
                // two closures cannot run together; stage into locals first.
                let mut dw = vec![0.0; cout * cin * 9];
                let mut db = vec![0.0; cout];
                kernels::conv3x3_grad_weights(g, xv, cin, h, wd, cout, &mut dw, &mut db);
                acc(*w, &mut |d| add_into(d, &dw, 1.0));
                acc(*b, &mut |d| add_into(d, &db, 1.0));
            }
            Op::AvgPool2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (c, h, wd) = (s[0], s[1], s[2]);
                acc(*a, &mut |d| kernels::avgpool2_backward(g, c, h, wd, d));
            }
            Op::Upsample2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (c, h, wd) = (s[0], s[1], s[2]);
                acc(*a, &mut |d| kernels::upsample2_backward(g, c, h, wd, d));
            }
            Op::ConcatC(a, b) => {
                let na = numel(*a);
                acc(*a, &mut |d| add_into(d, &g[..na], 1.0));
                acc(*b, &mut |d| add_into(d, &g[na..], 1.0));
            }
            Op::Map { src, map } => {
                let gt = tensor_from(self.nodes[i].value.shape().to_vec(), g.to_vec());
                let back = map.adjoint(&gt);
                debug_assert_eq!(back.numel(), numel(*src), "bad adjoint of {}", map.label());
                acc(*src, &mut |d| add_into(d, back.data(), 1.0));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn mul_add_into(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for ((d, gv), ov) in dst.iter_mut().zip(g).zip(other) {
        *d += gv * ov;
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output with respect to the given node; zero
    /// if no path connects them.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

/// Central finite differences (f(x+h e_j) - f(x-h e_j)) / (2h) per coordinate.
///
/// Deliberately independent from the tape: this is the oracle the backward
/// pass is checked against.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite_diff_grad needs step > 0");
    let mut out = vec![0.0; x.numel()];
    for j in 0..x.numel() {
        let xj = x.data()[j];
        let fp = f(&x.with_entry(j, xj + step));
        let fm = f(&x.with_entry(j, xj - step));
        out[j] = (fp - fm) / (2.0 * step);
    }
    tensor_from(x.shape().to_vec(), out)
}

/// Largest relative disagreement between two gradient vectors, with an
/// absolute floor so that near-zero entries do not blow up the ratio.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
