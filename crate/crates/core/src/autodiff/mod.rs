//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass as a node in an
//! append-only list, so node order is a topological order. Leaves are either
//! plain inputs or model parameters tagged with a [`ParamId`].
//! [`Tape::backward`] walks the list in reverse from a scalar loss and returns
//! the accumulated gradient of every parameter leaf.
//!
//! Every op validates shapes and rejects non-finite outputs.

pub(crate) mod kernels;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Stable identifier of a trainable parameter in a model's registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: usize,
        scale: usize,
        shift: usize,
        eps: f64,
    },
    MatMul(usize, usize),
    Reshape(usize),
    SwapLeadingAxes(usize),
    CeDice {
        logits: usize,
        labels: Vec<u8>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to any leaf created on the tape.
    pub fn wrt(&self, leaf: Var) -> Option<&Tensor> {
        self.leaves.get(&leaf.index)
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op,
            what: "output".into(),
        })
    }
}

fn swap_leading(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (a, b) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    for i in 0..a {
        for j in 0..b {
            let from = (i * b + j) * inner;
            let to = (j * a + i) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape.swap(0, 1);
    Tensor::new(shape, out).expect("swap preserves element count")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable is not on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a non-parameter input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf(None))
    }

    /// Records a parameter value; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Leaf(Some(id)))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, "operand shape", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let mut v = self.nodes[ia].value.clone();
        v.add_assign(&self.nodes[ib].value);
        self.push("add", v, Op::Add(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", v, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x * factor);
        self.push("scale", v, Op::Scale(ia, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        self.push("sum", v, Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", v, Op::Mean(ia))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu { x: ia, slope })
    }

    /// 2×2 max pooling with stride 2 over an `[N, C, H, W]` tensor.
    pub fn max_pool2d(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.rank() != 4 {
            return Err(Error::shape("max_pool2d", "rank", 4, t.rank()));
        }
        let s = t.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
            return Err(Error::shape("max_pool2d", "H, W", "even and >= 2", format!("{h}x{w}")));
        }
        let (vals, argmax) = kernels::max_pool2x2(t.data(), n * c, h, w);
        let v = Tensor::new(vec![n, c, h / 2, w / 2], vals)?;
        self.push("max_pool2d", v, Op::MaxPool2d { x: ia, argmax })
    }

    /// Concatenates two `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() < 2 || ta.rank() != tb.rank() {
            return Err(Error::shape("concat", "rank", ta.rank(), tb.rank()));
        }
        for d in (0..ta.rank()).filter(|&d| d != 1) {
            if ta.dim(d) != tb.dim(d) {
                return Err(Error::shape("concat", format!("axis {d}"), ta.dim(d), tb.dim(d)));
            }
        }
        let n = ta.dim(0);
        let (la, lb) = (ta.numel() / n, tb.numel() / n);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&tb.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = ta.shape().to_vec();
        shape[1] += tb.dim(1);
        let v = Tensor::new(shape, data)?;
        self.push("concat", v, Op::Concat { a: ia, b: ib })
    }

    /// Softmax over axis 1 (the class/channel axis).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.rank() < 2 {
            return Err(Error::shape("softmax", "rank", ">= 2", t.rank()));
        }
        let (outer, classes) = (t.dim(0), t.dim(1));
        let inner = t.numel() / (outer * classes);
        let data = kernels::softmax_axis1(t.data(), outer, classes, inner);
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", v, Op::Softmax { x: ia })
    }

    fn conv_geom(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if stride == 0 {
            return Err(Error::shape(op, "stride", "positive", 0));
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if kh > ph {
            return Err(Error::shape(op, "kernel height", format!("<= {ph}"), kh));
        }
        if kw > pw {
            return Err(Error::shape(op, "kernel width", format!("<= {pw}"), kw));
        }
        if (ph - kh) % stride != 0 {
            return Err(Error::shape(
                op,
                "H (stride divisibility)",
                format!("(H+2p-kh) % {stride} == 0"),
                height,
            ));
        }
        if (pw - kw) % stride != 0 {
            return Err(Error::shape(
                op,
                "W (stride divisibility)",
                format!("(W+2p-kw) % {stride} == 0"),
                width,
            ));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    fn check_bias(&self, op: &'static str, b: Option<usize>, channels: usize) -> Result<()> {
        if let Some(ib) = b {
            let s = self.nodes[ib].value.shape();
            if s != [channels] {
                return Err(Error::shape(op, "bias", format!("[{channels}]"), format!("{s:?}")));
            }
        }
        Ok(())
    }

    /// Cross-correlation: input `[N, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if tx.rank() != 4 {
            return Err(Error::shape("conv2d", "input rank", 4, tx.rank()));
        }
        if tw.rank() != 4 {
            return Err(Error::shape("conv2d", "weight rank", 4, tw.rank()));
        }
        let (n, cin, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (cout, wcin, kh, kw) = (tw.dim(0), tw.dim(1), tw.dim(2), tw.dim(3));
        if wcin != cin {
            return Err(Error::shape("conv2d", "Cin", wcin, cin));
        }
        self.check_bias("conv2d", ib, cout)?;
        let geom = Self::conv_geom("conv2d", cin, h, wd, kh, kw, stride, padding)?;
        let bias = ib.map(|i| self.nodes[i].value.data());
        let out = kernels::conv_forward(tx.data(), n, &geom, tw.data(), bias, cout);
        let v = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
        )
    }

    /// Transposed convolution: input `[N, Cin, H, W]`, weight
    /// `[Cin, Cout, kh, kw]`; output extent `(H-1)·stride − 2·padding + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if tx.rank() != 4 {
            return Err(Error::shape("conv_transpose2d", "input rank", 4, tx.rank()));
        }
        if tw.rank() != 4 {
            return Err(Error::shape("conv_transpose2d", "weight rank", 4, tw.rank()));
        }
        let (n, cin, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (wcin, cout, kh, kw) = (tw.dim(0), tw.dim(1), tw.dim(2), tw.dim(3));
        if wcin != cin {
            return Err(Error::shape("conv_transpose2d", "Cin", wcin, cin));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d", "stride", "positive", 0));
        }
        self.check_bias("conv_transpose2d", ib, cout)?;
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape(
                "conv_transpose2d",
                "padding",
                "< output extent / 2",
                padding,
            ));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        let geom = Self::conv_geom("conv_transpose2d", cout, oh, ow, kh, kw, stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let bias = ib.map(|i| self.nodes[i].value.data());
        let out = kernels::conv_transpose_forward(tx.data(), n, cin, &geom, tw.data(), bias);
        let v = Tensor::new(vec![n, cout, oh, ow], out)?;
        self.push(
            "conv_transpose2d",
            v,
            Op::ConvTranspose2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
        )
    }

    /// Per-item, per-channel normalization over H×W with affine `scale`/`shift`.
    pub fn instance_norm2d(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (ix, is, ib) = (self.idx(x)?, self.idx(scale)?, self.idx(shift)?);
        let tx = &self.nodes[ix].value;
        if tx.rank() != 4 {
            return Err(Error::shape("instance_norm2d", "input rank", 4, tx.rank()));
        }
        let c = tx.dim(1);
        for (name, i) in [("scale", is), ("shift", ib)] {
            let s = self.nodes[i].value.shape();
            if s != [c] {
                return Err(Error::shape(
                    "instance_norm2d",
                    name,
                    format!("[{c}]"),
                    format!("{s:?}"),
                ));
            }
        }
        let hw = tx.dim(2) * tx.dim(3);
        let out = kernels::instance_norm_forward(
            tx.data(),
            c,
            hw,
            self.nodes[is].value.data(),
            self.nodes[ib].value.data(),
            eps,
        );
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "instance_norm2d",
            v,
            Op::InstanceNorm {
                x: ix,
                scale: is,
                shift: ib,
                eps,
            },
        )
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::shape("matmul", "rank", 2, ta.rank().max(tb.rank())));
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        if tb.dim(0) != k {
            return Err(Error::shape("matmul", "inner dimension", k, tb.dim(0)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul(ia, ib))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.reshape(shape)?;
        self.push("reshape", v, Op::Reshape(ia))
    }

    /// Swaps axes 0 and 1.
    pub fn swap_leading_axes(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.rank() < 2 {
            return Err(Error::shape("swap_leading_axes", "rank", ">= 2", t.rank()));
        }
        let v = swap_leading(t);
        self.push("swap_leading_axes", v, Op::SwapLeadingAxes(ia))
    }

    /// Combined cross-entropy + soft Dice loss; see [`crate::loss`].
    pub(crate) fn ce_dice(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let il = self.idx(logits)?;
        let t = &self.nodes[il].value;
        let (value, probs) = loss::ce_dice_forward(t, labels)?;
        self.push(
            "ce_dice_loss",
            Tensor::scalar(value),
            Op::CeDice {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Every parameter leaf on the tape
    /// gets an entry, zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::new(self.nodes[root].value.shape().to_vec(), vec![1.0])?);

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        let shaped = |i: usize, data: Vec<f64>| -> Tensor {
            Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("gradient shape")
        };

        let mut out = Gradients::default();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                if let Op::Leaf(p) = self.nodes[i].op {
                    let z = Tensor::zeros(self.nodes[i].value.shape());
                    if let Some(pid) = p {
                        out.params.entry(pid).or_insert_with(|| z.clone());
                    }
                    out.leaves.insert(i, z);
                }
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: "backward",
                    what: format!("gradient of node {i}"),
                });
            }
            let val = |j: usize| &self.nodes[j].value;
            match &self.nodes[i].op {
                Op::Leaf(p) => {
                    if let Some(pid) = p {
                        match out.params.get_mut(pid) {
                            Some(e) => e.add_assign(&g),
                            None => {
                                out.params.insert(*pid, g.clone());
                            }
                        }
                    }
                    out.leaves.insert(i, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.data().iter().zip(val(*b).data()).map(|(d, y)| d * y).collect();
                    let gb = g.data().iter().zip(val(*a).data()).map(|(d, x)| d * x).collect();
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *b, shaped(*b, gb));
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.map(|d| d * f)),
                Op::Sum(a) => {
                    let d = g.item();
                    acc(&mut grads, *a, Tensor::full(val(*a).shape(), d));
                }
                Op::Mean(a) => {
                    let d = g.item() / val(*a).numel() as f64;
                    acc(&mut grads, *a, Tensor::full(val(*a).shape(), d));
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(d, &v)| if v > 0.0 { *d } else { slope * d })
                        .collect();
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut gx = vec![0.0; val(*x).numel()];
                    for (d, &src) in g.data().iter().zip(argmax) {
                        gx[src] += d;
                    }
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::Concat { a, b } => {
                    let n = g.dim(0);
                    let (la, lb) = (val(*a).numel() / n, val(*b).numel() / n);
                    let mut ga = Vec::with_capacity(val(*a).numel());
                    let mut gb = Vec::with_capacity(val(*b).numel());
                    for item in g.data().chunks_exact(la + lb) {
                        ga.extend_from_slice(&item[..la]);
                        gb.extend_from_slice(&item[la..]);
                    }
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *b, shaped(*b, gb));
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[i].value;
                    let (outer, classes) = (y.dim(0), y.dim(1));
                    let inner = y.numel() / (outer * classes);
                    let mut gx = vec![0.0; y.numel()];
                    for o in 0..outer {
                        for p in 0..inner {
                            let at = |c: usize| (o * classes + c) * inner + p;
                            let dot: f64 = (0..classes).map(|c| g.data()[at(c)] * y.data()[at(c)]).sum();
                            for c in 0..classes {
                                gx[at(c)] = y.data()[at(c)] * (g.data()[at(c)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let cg = kernels::conv_backward(
                        val(*x).data(),
                        val(*x).dim(0),
                        geom,
                        val(*w).data(),
                        val(*w).dim(0),
                        g.data(),
                    );
                    acc(&mut grads, *x, shaped(*x, cg.input));
                    acc(&mut grads, *w, shaped(*w, cg.weight));
                    if let Some(b) = b {
                        acc(&mut grads, *b, shaped(*b, cg.bias));
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let cg = kernels::conv_transpose_backward(
                        val(*x).data(),
                        val(*x).dim(0),
                        val(*x).dim(1),
                        geom,
                        val(*w).data(),
                        g.data(),
                    );
                    acc(&mut grads, *x, shaped(*x, cg.input));
                    acc(&mut grads, *w, shaped(*w, cg.weight));
                    if let Some(b) = b {
                        acc(&mut grads, *b, shaped(*b, cg.bias));
                    }
                }
                Op::InstanceNorm { x, scale, shift, eps } => {
                    let tx = val(*x);
                    let ng = kernels::instance_norm_backward(
                        tx.data(),
                        tx.dim(1),
                        tx.dim(2) * tx.dim(3),
                        val(*scale).data(),
                        *eps,
                        g.data(),
                    );
                    acc(&mut grads, *x, shaped(*x, ng.input));
                    acc(&mut grads, *scale, shaped(*scale, ng.scale));
                    acc(&mut grads, *shift, shaped(*shift, ng.shift));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *b, shaped(*b, gb));
                }
                Op::Reshape(a) => {
                    let ga = g.into_data();
                    acc(&mut grads, *a, shaped(*a, ga));
                }
                Op::SwapLeadingAxes(a) => acc(&mut grads, *a, swap_leading(&g)),
                Op::CeDice { logits, labels, probs } => {
                    let tl = val(*logits);
                    let gl = loss::ce_dice_backward(tl.shape(), labels, probs, g.item());
                    acc(&mut grads, *logits, shaped(*logits, gl));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let input = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let x = tape.leaf(input.clone()).unwrap();
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn conv_channel_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 2, 2])).unwrap();
        let w = tape.leaf(Tensor::ones(&[1, 2, 1, 1])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 2.0));
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64).sin())).unwrap();
        let w = tape.leaf(Tensor::zeros(&[4, 3, 3, 3])).unwrap();
        let b = tape.leaf(Tensor::full(&[4], 0.75)).unwrap();
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[2, 4, 5, 5], 0.75));
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("Cin"), "{err}");

        let w = tape.leaf(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let err = tape.conv2d(x, w, None, 2, 0).unwrap_err().to_string();
        assert!(err.contains("stride divisibility"), "{err}");

        let w = tape.leaf(Tensor::zeros(&[1, 2, 7, 3])).unwrap();
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
    }

    #[test]
    fn conv_transpose_identity_and_expansion() {
        let mut tape = Tape::new();
        let input = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let x = tape.leaf(input.clone()).unwrap();
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let y = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &input);

        let x = tape.leaf(Tensor::full(&[1, 1, 1, 1], 2.5)).unwrap();
        let w = tape.leaf(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 2.5));
    }

    #[test]
    fn instance_norm_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 3, 3], 4.0)).unwrap();
        let s = tape.leaf(Tensor::full(&[2], 1.7)).unwrap();
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0, -0.3]).unwrap()).unwrap();
        let y = tape.instance_norm2d(x, s, b, DEFAULT_NORM_EPS).unwrap();
        let v = tape.value(y).data();
        assert!(v[..9].iter().all(|&e| e == 0.0));
        assert!(v[9..].iter().all(|&e| e == -0.3));

        let x = tape.leaf(t(&[1, 1, 1, 2], &[0.0, 2.0])).unwrap();
        let s = tape.leaf(Tensor::ones(&[1])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1])).unwrap();
        let y = tape.instance_norm2d(x, s, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let xv = t(&[3], &[1.0, -2.0, 0.5]);
        let x = tape.param(ParamId(0), xv.clone()).unwrap();
        let other = tape.param(ParamId(1), Tensor::ones(&[2])).unwrap();
        let _unused = tape.scale(other, 3.0).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap(), &xv.map(|v| 2.0 * v));
        assert_eq!(g.param(ParamId(1)).unwrap(), &Tensor::zeros(&[2]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(t(&[2], &[1.0, f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let x = tape.leaf(t(&[1], &[1e308])).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn swap_leading_axes_roundtrip() {
        let mut tape = Tape::new();
        let v = Tensor::from_fn(&[2, 3, 2, 1], |i| i as f64);
        let x = tape.leaf(v.clone()).unwrap();
        let y = tape.swap_leading_axes(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2, 2, 1]);
        assert_eq!(tape.value(y).data()[2..4], [6.0, 7.0]);
        let z = tape.swap_leading_axes(y).unwrap();
        assert_eq!(tape.value(z), &v);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64 * 0.13).sin()))
                .unwrap();
            let w = tape
                .leaf(Tensor::from_fn(&[5, 3, 3, 3], |i| (i as f64 * 0.7).cos()))
                .unwrap();
            let y = tape.conv2d(x, w, None, 1, 1).unwrap();
            tape.value(y).clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
