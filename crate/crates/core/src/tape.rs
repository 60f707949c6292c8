//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its local backward rule. Nodes are only ever appended, so the
//! tape is always in topological order and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, matmul_into, matmul_nt_into, matmul_tn_into, softmax_axis_inplace, transpose_raw,
    Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate corruption of one backward rule. Used as a negative control for
/// the finite-difference checker; never enabled in normal operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Multiply the gradient passed through every ReLU by this factor.
    ScaleRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Standardize {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when a gradient must flow into this node during backward.
    needs_grad: bool,
    /// Accumulated gradient, only kept for leaves that require it.
    grad: Option<Tensor>,
}

/// Records operations for one forward pass.
///
/// A tape is confined to one thread; independent forward passes use
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_backward_fault(fault: BackwardFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::MeanRows(x)
            | Op::Sum(x) => vec![x],
            Op::Softmax { x, .. }
            | Op::Standardize { x, .. }
            | Op::MaxPool { x, .. }
            | Op::SliceCols { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::LayerNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![x, w];
                v.extend(bias);
                v
            }
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is accumulated by `backward`.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a gradient-tracking leaf. Binding the same
    /// parameter twice returns the same node, so shared weights accumulate
    /// gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.input(store.value(id).clone())?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                for (dst, src) in store.grad_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a bias vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = *x.shape().last().unwrap();
        if b.numel() != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias of {} values for rows of width {n}", b.numel()),
            ));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::AddBias(a, bias), "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * c).collect())?;
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        self.push(out, Op::Softmax { x: a, axis }, "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", format!("affine parameters must have {n} values")));
        }
        let rows = x.numel() / n;
        let (xhat, inv_std) = normalize_slices(x.data(), rows, eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % n] + b[i % n])
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Group normalization of a `[C, H, W]` activation with per-channel affine.
    pub fn group_norm(&mut self, a: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::dim("group_norm", format!("expected [C, H, W], got {:?}", x.shape())));
        };
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("{c} channels cannot be split into {groups} groups")));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("group_norm", format!("affine parameters must have {c} values")));
        }
        let (xhat, inv_std) = normalize_slices(x.data(), groups, eps);
        let hw = h * w;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i / hw] + b[i / hw])
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(
            out,
            Op::GroupNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "group_norm",
        )
    }

    /// Standardizes each slice along the leading axis to zero mean and unit
    /// variance (weight standardization of a `[Cout, Cin, kh, kw]` kernel).
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let slices = x.shape()[0];
        let (xhat, inv_std) = normalize_slices(x.data(), slices, eps);
        let out = Tensor::new(x.shape(), xhat.clone())?;
        self.push(out, Op::Standardize { x: a, xhat, inv_std }, "weight_standardize")
    }

    /// Cross-correlation of `[Cin, H, W]` input with a `[Cout, Cin, kh, kw]`
    /// kernel plus optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let ([cin, h, wd], [cout, wcin, kh, kw]) = (xv.shape(), wv.shape()) else {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} / kernel {:?} ranks", xv.shape(), wv.shape()),
            ));
        };
        let (cin, h, wd, cout, kh, kw) = (*cin, *h, *wd, *cout, *kh, *kw);
        if *wcin != cin {
            return Err(Error::dim("conv2d", format!("kernel expects {wcin} channels, input has {cin}")));
        }
        if stride == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (padding {padding})"),
            ));
        }
        let geom = ConvGeometry {
            in_channels: cin,
            height: h,
            width: wd,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::dim("conv2d", format!("bias must have {cout} values")));
            }
        }
        let cols = im2col(xv.data(), &geom);
        let p = geom.positions();
        let mut out = vec![0.0; cout * p];
        matmul_into(wv.data(), &cols, &mut out, cout, geom.patch_len(), p);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (co, chunk) in out.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let out = Tensor::new(&[cout, geom.out_h, geom.out_w], out)?;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            "conv2d",
        )
    }

    /// Max pooling with a square window and no padding.
    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = self.value(a);
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::dim("max_pool2d", format!("expected [C, H, W], got {:?}", x.shape())));
        };
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::dim("max_pool2d", format!("window {kernel} on {h}x{w}")));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let xd = x.data();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for dy in 0..kernel {
                        for dx in 0..kernel {
                            let idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                            if best == usize::MAX || xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        self.push(out, Op::MaxPool { x: a, argmax }, "max_pool2d")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// `[n, p] ‖ [n, q] → [n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ((n, p), (n2, q)) = (x.dims2()?, y.dims2()?);
        if n != n2 {
            return Err(Error::dim("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let out = Tensor::new(&[n, p + q], data)?;
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    /// `[m, d] ‖ [n, d] → [m + n, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ((m, d), (n, d2)) = (x.dims2()?, y.dims2()?);
        if d != d2 {
            return Err(Error::dim("concat_rows", format!("width {d} vs {d2}")));
        }
        let data = [x.data(), y.data()].concat();
        let out = Tensor::new(&[m + n, d], data)?;
        self.push(out, Op::ConcatRows(a, b), "concat_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims2()?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("range {start}..{end} of {c} columns")));
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let out = Tensor::new(&[n, end - start], data)?;
        self.push(out, Op::SliceCols { x: a, start }, "slice_cols")
    }

    /// Mean over rows: `[n, d] → [1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.dims2()?;
        let mut data = vec![0.0; d];
        for i in 0..n {
            for (acc, v) in data.iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let out = Tensor::new(&[1, d], data)?;
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    /// `−log softmax(logits)[label]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits).data();
        if label >= x.len() {
            return Err(Error::Usage(format!("label {label} for {} classes", x.len())));
        }
        let mut probs = x.to_vec();
        let n = probs.len();
        softmax_axis_inplace(&mut probs, 1, n, 1);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Tensor::scalar(lse - x[label]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            "cross_entropy",
        )
    }

    /// Inverted dropout. With `rng == None` (evaluation) or `p == 0` the
    /// input node is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(&shape, mask)?)?;
        self.mul(a, mask)
    }

    /// Back-propagates from a scalar `loss`, adding d(loss)/d(leaf) into the
    /// gradient of every gradient-tracking leaf. Calling it twice without
    /// [`Tape::zero_grads`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if let Some(g) = self.nodes[idx].grad.as_mut() {
                    for (dst, src) in g.data_mut().iter_mut().zip(&dy) {
                        *dst += src;
                    }
                }
                continue;
            }
            self.backward_node(idx, &dy, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, idx: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                if self.wants(a) {
                    let bd = self.value(b).data();
                    acc(a, &mut |g| matmul_nt_into(dy, bd, g, m, n, k));
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    acc(b, &mut |g| matmul_tn_into(ad, dy, g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().unwrap();
                let t = transpose_raw(dy, c, r);
                acc(a, &mut |g| add_into(g, &t));
            }
            Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, dy));
                acc(b, &mut |g| add_into(g, dy));
            }
            Op::AddBias(a, b) => {
                acc(a, &mut |g| add_into(g, dy));
                acc(b, &mut |g| {
                    let n = g.len();
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += c * d;
                }
            }),
            Op::Relu(a) => {
                let factor = match self.fault {
                    Some(BackwardFault::ScaleRelu(f)) => f,
                    None => 1.0,
                };
                let xv = self.value(a).data();
                acc(a, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += factor * dy[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                acc(x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let n = self.value(gamma).numel();
                let gv = self.value(gamma).data();
                let dxhat: Vec<f64> = dy.iter().enumerate().map(|(i, d)| d * gv[i % n]).collect();
                acc(x, &mut |g| normalize_backward(&dxhat, xhat, inv_std, g));
                acc(gamma, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d * xhat[i];
                    }
                });
                acc(beta, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                ..
            } => {
                let shape = node.value.shape();
                let hw = shape[1] * shape[2];
                let gv = self.value(gamma).data();
                let dxhat: Vec<f64> = dy.iter().enumerate().map(|(i, d)| d * gv[i / hw]).collect();
                acc(x, &mut |g| normalize_backward(&dxhat, xhat, inv_std, g));
                acc(gamma, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / hw] += d * xhat[i];
                    }
                });
                acc(beta, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / hw] += d;
                    }
                });
            }
            Op::Standardize {
                x,
                ref xhat,
                ref inv_std,
            } => acc(x, &mut |g| normalize_backward(dy, xhat, inv_std, g)),
            Op::Conv2d {
                x,
                w,
                bias,
                ref geom,
                ref cols,
            } => {
                let (cout, r, p) = (geom.out_channels, geom.patch_len(), geom.positions());
                if self.wants(w) {
                    acc(w, &mut |g| matmul_nt_into(dy, cols, g, cout, p, r));
                }
                if self.wants(x) {
                    let mut dcols = vec![0.0; r * p];
                    matmul_tn_into(self.value(w).data(), dy, &mut dcols, cout, r, p);
                    acc(x, &mut |g| col2im_add(&dcols, geom, g));
                }
                if let Some(b) = bias {
                    acc(b, &mut |g| {
                        for (co, chunk) in dy.chunks(p).enumerate() {
                            g[co] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MaxPool { x, ref argmax } => acc(x, &mut |g| {
                for (d, &src) in dy.iter().zip(argmax) {
                    g[src] += d;
                }
            }),
            Op::Reshape(a) => acc(a, &mut |g| add_into(g, dy)),
            Op::ConcatCols(a, b) => {
                let p = self.value(a).shape()[1];
                let q = self.value(b).shape()[1];
                acc(a, &mut |g| {
                    for (i, row) in g.chunks_mut(p).enumerate() {
                        add_into(row, &dy[i * (p + q)..i * (p + q) + p]);
                    }
                });
                acc(b, &mut |g| {
                    for (i, row) in g.chunks_mut(q).enumerate() {
                        add_into(row, &dy[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(a).numel();
                acc(a, &mut |g| add_into(g, &dy[..split]));
                acc(b, &mut |g| add_into(g, &dy[split..]));
            }
            Op::SliceCols { x, start } => {
                let c = self.value(x).shape()[1];
                let width = node.value.shape()[1];
                acc(x, &mut |g| {
                    for (i, row) in dy.chunks(width).enumerate() {
                        add_into(&mut g[i * c + start..i * c + start + width], row);
                    }
                });
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(a).dims2().unwrap();
                acc(a, &mut |g| {
                    for row in g.chunks_mut(d) {
                        for (gi, di) in row.iter_mut().zip(dy) {
                            *gi += di / n as f64;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(a, &mut |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::CrossEntropy {
                logits,
                label,
                ref probs,
            } => acc(logits, &mut |g| {
                for (i, p) in probs.iter().enumerate() {
                    let target = if i == label { 1.0 } else { 0.0 };
                    g[i] += dy[0] * (p - target);
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Normalizes `slices` equal contiguous chunks of `x` to zero mean and unit
/// (population) variance. Returns the normalized values and per-slice
/// `1/sqrt(var + eps)`.
fn normalize_slices(x: &[f64], slices: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let len = x.len() / slices;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(slices);
    for chunk in x.chunks(len) {
        let mean = chunk.iter().sum::<f64>() / len as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let inv = 1.0 / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], g: &mut [f64]) {
    let len = xhat.len() / inv_std.len();
    for (s, &inv) in inv_std.iter().enumerate() {
        let range = s * len..(s + 1) * len;
        let (dh, xh) = (&dxhat[range.clone()], &xhat[range.clone()]);
        let mean_dh = dh.iter().sum::<f64>() / len as f64;
        let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for (j, gi) in g[range].iter_mut().enumerate() {
            *gi += inv * (dh[j] - mean_dh - xh[j] * mean_dhx);
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * g.out_w + ox] =
                            x[c * g.height * g.width + iy as usize * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dx[c * g.height * g.width + iy as usize * g.width + ix as usize] +=
                            src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}
