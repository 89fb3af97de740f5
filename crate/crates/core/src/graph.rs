//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] is built forward: every operation appends a node holding its
//! value and enough saved context to run its vector-Jacobian product. Nodes can
//! only reference earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. `backward` borrows the graph
//! immutably; calling it twice recomputes the same gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::TensorError;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Conv1d,
    AdaptiveAvgPool1d,
    AdaptiveMaxPool1d,
    Softmax,
    LayerNorm,
    BceLoss,
    Sum,
    Mean,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SliceCols,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Conv1d,
        OpKind::AdaptiveAvgPool1d,
        OpKind::AdaptiveMaxPool1d,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::BceLoss,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceCols,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Conv1d => "conv1d",
            OpKind::AdaptiveAvgPool1d => "adaptive_avg_pool1d",
            OpKind::AdaptiveMaxPool1d => "adaptive_max_pool1d",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BceLoss => "bce_loss",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    AvgPool1d(Var),
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Bce {
        p: Var,
        targets: Vec<T>,
        eps: T,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::AvgPool1d(..) => OpKind::AdaptiveAvgPool1d,
            Op::MaxPool1d { .. } => OpKind::AdaptiveMaxPool1d,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Bce { .. } => OpKind::BceLoss,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    in_len: usize,
    out_len: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Segment `[start, end)` of output position `i` when pooling `len` steps to
/// `out_len` outputs.
pub fn adaptive_segment(i: usize, len: usize, out_len: usize) -> (usize, usize) {
    let start = (i * len) / out_len;
    let end = ((i + 1) * len).div_ceil(out_len);
    (start, end)
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: the backward rule of `kind` returns deliberately wrong
    /// gradients (scaled by 1.5). Gradient checks must catch it.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(TensorError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose()?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).len() != n || self.value(bias).rank() != 1 {
            return Err(TensorError::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh);
        let rg = self.needs(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu(v).0);
        let rg = self.needs(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Grouped 1-D cross-correlation along the last axis.
    ///
    /// `x` is `C×T`, `kernel` is `C_out × (C/groups) × k`, `bias` is `C_out`.
    /// `groups = 1` is a full convolution, `groups = C = C_out` is depthwise.
    pub fn conv1d_grouped(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        let (c, t) = self.dims2(x)?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 {
            return Err(TensorError::RankMismatch {
                expected: 3,
                shape: ks,
            });
        }
        let (c_out, c_per_group, k) = (ks[0], ks[1], ks[2]);
        if stride == 0 {
            return Err(TensorError::arg("conv1d", "stride must be at least 1"));
        }
        if groups == 0 || c % groups != 0 || c_out % groups != 0 || c_per_group != c / groups {
            return Err(TensorError::dim("conv1d", self.shape(x), &ks));
        }
        if self.shape(bias) != [c_out] {
            return Err(TensorError::dim("conv1d", &ks, self.shape(bias)));
        }
        if k > t + 2 * padding {
            return Err(TensorError::dim("conv1d", self.shape(x), &ks));
        }
        let out_len = (t + 2 * padding - k) / stride + 1;
        let geom = ConvGeometry {
            in_channels: c,
            out_channels: c_out,
            groups,
            kernel: k,
            stride,
            padding,
            in_len: t,
            out_len,
        };
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let out_per_group = c_out / groups;
        let mut out = vec![T::zero(); c_out * out_len];
        for o in 0..c_out {
            let g = o / out_per_group;
            for s in 0..out_len {
                let mut acc = bd[o];
                for ci in 0..c_per_group {
                    let xc = g * c_per_group + ci;
                    let w = &wd[(o * c_per_group + ci) * k..(o * c_per_group + ci + 1) * k];
                    for (j, &wv) in w.iter().enumerate() {
                        let pos = (s * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < t {
                            acc += wv * xd[xc * t + pos as usize];
                        }
                    }
                }
                out[o * out_len + s] = acc;
            }
        }
        let rg = self.needs(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, out_len], out),
            Op::Conv1d {
                x,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Full (channel-mixing) 1-D cross-correlation.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        self.conv1d_grouped(x, kernel, bias, stride, padding, 1)
    }

    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var, TensorError> {
        if out_len < 1 {
            return Err(TensorError::arg(
                "adaptive_avg_pool1d",
                "output length must be at least 1",
            ));
        }
        let (c, t) = self.dims2(x)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * out_len];
        for ch in 0..c {
            let row = &xd[ch * t..(ch + 1) * t];
            for i in 0..out_len {
                let (s, e) = adaptive_segment(i, t, out_len);
                let total: T = row[s..e].iter().copied().sum();
                out[ch * out_len + i] = total / T::of((e - s) as f64);
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, out_len], out),
            Op::AvgPool1d(x),
            rg,
        ))
    }

    pub fn adaptive_max_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var, TensorError> {
        if out_len < 1 {
            return Err(TensorError::arg(
                "adaptive_max_pool1d",
                "output length must be at least 1",
            ));
        }
        let (c, t) = self.dims2(x)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * out_len];
        let mut argmax = vec![0; c * out_len];
        for ch in 0..c {
            for i in 0..out_len {
                let (s, e) = adaptive_segment(i, t, out_len);
                let mut best = ch * t + s;
                for p in ch * t + s..ch * t + e {
                    if xd[p] > xd[best] {
                        best = p;
                    }
                }
                out[ch * out_len + i] = xd[best];
                argmax[ch * out_len + i] = best;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, out_len], out),
            Op::MaxPool1d { x, argmax },
            rg,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::arg(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::arg("layer_norm", "eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / d;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`.
    /// Probabilities are clamped to `[eps, 1 - eps]`; clamped entries get no
    /// gradient.
    pub fn bce_loss(&mut self, p: Var, targets: &[T], eps: f64) -> Result<Var, TensorError> {
        if self.value(p).len() != targets.len() {
            return Err(TensorError::dim(
                "bce_loss",
                self.shape(p),
                &[targets.len()],
            ));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::arg(
                "bce_loss",
                format!("target {bad} is not 0 or 1"),
            ));
        }
        let eps = T::of(eps);
        let n = T::of(targets.len() as f64);
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(targets)
            .map(|(&pv, &y)| {
                let pc = pv.max(eps).min(T::one() - eps);
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .sum();
        let rg = self.needs(&[p]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.needs(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Column means of `x[m×n]`, shaped `1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&xd[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::arg("concat_rows", "no inputs"))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2(p)?;
            if n2 != n {
                return Err(TensorError::dim(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::arg("concat_cols", "no inputs"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.dims2(p)?;
            if m2 != m {
                return Err(TensorError::dim(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &n) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * n..(r + 1) * n]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(TensorError::arg(
                "slice_cols",
                format!("range {start}..{end} invalid for {n} columns"),
            ));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&xd[r * n + start..r * n + end]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, end - start], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// `softmax(Q Kᵀ / √d) V`. Returns the output and the attention weights.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var), TensorError> {
        let (_, d) = self.dims2(q)?;
        let (lk, dk) = self.dims2(k)?;
        let (lv, _) = self.dims2(v)?;
        if d != dk {
            return Err(TensorError::dim(
                "scaled_dot_attention",
                self.shape(q),
                self.shape(k),
            ));
        }
        if lk != lv {
            return Err(TensorError::dim(
                "scaled_dot_attention",
                self.shape(k),
                self.shape(v),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, T::one() / T::of(d as f64).sqrt());
        let weights = self.softmax(scaled, 1)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::arg(
                "backward",
                "loss is not a node of this graph",
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let factor = if self.fault == Some(node.op.kind()) {
                T::of(1.5)
            } else {
                T::one()
            };
            let mut acc = Accumulator {
                graph: self,
                grads: &mut grads,
                factor,
            };
            self.node_vjp(node, &upstream, &mut acc);
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn node_vjp(&self, node: &Node<T>, g: &[T], acc: &mut Accumulator<'_, T>) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let (_, n) = self.dims2(*b).unwrap();
                if acc.wants(*a) {
                    acc.add(*a, matmul_nt_raw(g, self.value(*b).data(), m, n, k));
                }
                if acc.wants(*b) {
                    acc.add(*b, matmul_tn_raw(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a).unwrap();
                let gt = Tensor::from_parts(vec![c, r], g.to_vec())
                    .transpose()
                    .unwrap();
                acc.add(*a, gt.into_vec());
            }
            Op::Add(a, b) => {
                acc.add(*a, g.to_vec());
                acc.add(*b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                acc.add(*x, g.to_vec());
                if acc.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc.add(*bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if acc.wants(*a) {
                    let bd = self.value(*b).data();
                    acc.add(*a, g.iter().zip(bd).map(|(&u, &v)| u * v).collect());
                }
                if acc.wants(*b) {
                    let ad = self.value(*a).data();
                    acc.add(*b, g.iter().zip(ad).map(|(&u, &v)| u * v).collect());
                }
            }
            Op::Scale(x, f) => acc.add(*x, g.iter().map(|&u| u * *f).collect()),
            Op::Tanh(x) => acc.add(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&u, &y)| u * (T::one() - y * y))
                    .collect(),
            ),
            Op::Sigmoid(x) => acc.add(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&u, &y)| u * y * (T::one() - y))
                    .collect(),
            ),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc.add(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                        .collect(),
                );
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc.add(*x, g.iter().zip(xd).map(|(&u, &v)| u * gelu(v).1).collect());
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                geom,
            } => self.conv_vjp(*x, *kernel, *bias, geom, g, acc),
            Op::AvgPool1d(x) => {
                let (c, t) = self.dims2(*x).unwrap();
                let out_len = node.value.shape()[1];
                let mut gx = vec![T::zero(); c * t];
                for ch in 0..c {
                    for i in 0..out_len {
                        let (s, e) = adaptive_segment(i, t, out_len);
                        let share = g[ch * out_len + i] / T::of((e - s) as f64);
                        for v in &mut gx[ch * t + s..ch * t + e] {
                            *v += share;
                        }
                    }
                }
                acc.add(*x, gx);
            }
            Op::MaxPool1d { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&src, &u) in argmax.iter().zip(g) {
                    gx[src] += u;
                }
                acc.add(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc.add(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gd = self.value(*gamma).data();
                let d = gd.len();
                let dn = T::of(d as f64);
                if acc.wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<T> = g[row.clone()]
                            .iter()
                            .zip(gd)
                            .map(|(&u, &w)| u * w)
                            .collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for j in 0..d {
                            gx[r * d + j] =
                                rs / dn * (dn * dxhat[j] - sum_d - xhat[r * d + j] * sum_dx);
                        }
                    }
                    acc.add(*x, gx);
                }
                if acc.wants(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (i, (&u, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += u * h;
                    }
                    acc.add(*gamma, gg);
                }
                if acc.wants(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for (i, &u) in g.iter().enumerate() {
                        gb[i % d] += u;
                    }
                    acc.add(*beta, gb);
                }
            }
            Op::Bce { p, targets, eps } => {
                let n = T::of(targets.len() as f64);
                let pd = self.value(*p).data();
                let gp = pd
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &y)| {
                        if pv < *eps || pv > T::one() - *eps {
                            T::zero()
                        } else {
                            g[0] * (-y / pv + (T::one() - y) / (T::one() - pv)) / n
                        }
                    })
                    .collect();
                acc.add(*p, gp);
            }
            Op::Sum(x) => acc.add(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc.add(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MeanRows(x) => {
                let (m, _) = self.dims2(*x).unwrap();
                let inv = T::one() / T::of(m as f64);
                let row: Vec<T> = g.iter().map(|&u| u * inv).collect();
                acc.add(*x, row.repeat(m));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if acc.wants(p) {
                        acc.add(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, n) = self.dims2(p).unwrap();
                    if acc.wants(p) {
                        let mut gp = Vec::with_capacity(m * n);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + col..r * total + col + n]);
                        }
                        acc.add(p, gp);
                    }
                    col += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x).unwrap();
                let w = node.value.shape()[1];
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc.add(*x, gx);
            }
        }
    }

    fn conv_vjp(
        &self,
        x: Var,
        kernel: Var,
        bias: Var,
        geom: &ConvGeometry,
        g: &[T],
        acc: &mut Accumulator<'_, T>,
    ) {
        let ConvGeometry {
            in_channels: _,
            out_channels,
            groups,
            kernel: k,
            stride,
            padding,
            in_len: t,
            out_len,
        } = *geom;
        let c_per_group = self.shape(kernel)[1];
        let out_per_group = out_channels / groups;
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        let want_x = acc.wants(x);
        let want_w = acc.wants(kernel);
        let mut gx = vec![T::zero(); xd.len()];
        let mut gw = vec![T::zero(); wd.len()];
        for o in 0..out_channels {
            let grp = o / out_per_group;
            for s in 0..out_len {
                let u = g[o * out_len + s];
                if u == T::zero() {
                    continue;
                }
                for ci in 0..c_per_group {
                    let xc = grp * c_per_group + ci;
                    let wbase = (o * c_per_group + ci) * k;
                    for j in 0..k {
                        let pos = (s * stride + j) as isize - padding as isize;
                        if pos < 0 || pos as usize >= t {
                            continue;
                        }
                        let xi = xc * t + pos as usize;
                        if want_x {
                            gx[xi] += u * wd[wbase + j];
                        }
                        if want_w {
                            gw[wbase + j] += u * xd[xi];
                        }
                    }
                }
            }
        }
        if want_x {
            acc.add(x, gx);
        }
        if want_w {
            acc.add(kernel, gw);
        }
        if acc.wants(bias) {
            acc.add(
                bias,
                g.chunks(out_len)
                    .map(|row| row.iter().copied().sum())
                    .collect(),
            );
        }
    }
}

struct Accumulator<'a, T> {
    graph: &'a Graph<T>,
    grads: &'a mut Vec<Option<Vec<T>>>,
    factor: T,
}

impl<T: Scalar> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.graph.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, mut contribution: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        if self.factor != T::one() {
            contribution.iter_mut().for_each(|c| *c *= self.factor);
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }
}

/// Gradients of the leaves that requested one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for constants and for leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when the loss does not
    /// reach `v`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let value = half * x * (T::one() + th);
    let deriv = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x);
    (value, deriv)
}
