//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so
//! a single reverse sweep visits each operation exactly once.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Train/eval switch for batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What to do with a trailing odd row or column before 2×2 pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolPolicy {
    /// Odd extents are rejected.
    Strict,
    /// The trailing row/column is dropped.
    Floor,
}

/// Per-feature batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Deconv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Combine(Vec<(Var, f64)>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    Mse(Var, Var),
    SumCorrelation {
        a: Var,
        b: Var,
        centered_a: Vec<f64>,
        centered_b: Vec<f64>,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
        cross: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// `input · weight + bias` with `input: [B, in]`, `weight: [in, out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return dim_err(format!(
                "dense expects [batch,in]·[in,out]+[out], got {xs:?}·{ws:?}+{bs:?}"
            ));
        }
        let (b, k, n) = (xs[0], xs[1], ws[1]);
        if ws[0] != k {
            return dim_err(format!("dense: input axis 1 ({k}) != weight axis 0 ({})", ws[0]));
        }
        if bs[0] != n {
            return dim_err(format!("dense: weight axis 1 ({n}) != bias axis 0 ({})", bs[0]));
        }
        let mut out = vec![0.0; b * n];
        let bias_v = self.value(bias).data();
        for row in out.chunks_mut(n) {
            row.copy_from_slice(bias_v);
        }
        kernels::gemm(
            b,
            k,
            n,
            self.value(input).data(),
            (k, 1),
            self.value(weight).data(),
            (n, 1),
            1.0,
            &mut out,
            (n, 1),
        );
        let value = Tensor::new(&[b, n], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err(format!("transpose expects a matrix, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], kernels::transpose(self.value(a).data(), r, c))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Stride-1 convolution with symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return dim_err(format!(
                "conv2d expects [B,C,H,W], [Co,Ci,kh,kw], [Co]; got {xs:?}, {ks:?}, {bs:?}"
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, ci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ci != c {
            return dim_err(format!("conv2d: input channels {c} != kernel axis 1 ({ci})"));
        }
        if bs[0] != co {
            return dim_err(format!("conv2d: bias length {} != output channels {co}", bs[0]));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return dim_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, pad);
        let out = kernels::conv2d(
            self.value(input).data(),
            b,
            &geom,
            self.value(kernel).data(),
            self.value(bias).data(),
            co,
        );
        let value = Tensor::new(&[b, co, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Transposed convolution: `[B,Ci,H,W]` with kernel `[Ci,Co,kh,kw]` gives
    /// `[B,Co,H+kh-1,W+kw-1]`.
    pub fn deconv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return dim_err(format!(
                "deconv2d expects [B,Ci,H,W], [Ci,Co,kh,kw], [Co]; got {xs:?}, {ks:?}, {bs:?}"
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ci, co, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ci != c {
            return dim_err(format!("deconv2d: input channels {c} != kernel axis 0 ({ci})"));
        }
        if bs[0] != co {
            return dim_err(format!("deconv2d: bias length {} != output channels {co}", bs[0]));
        }
        let geom = ConvGeom::new(co, h + kh - 1, w + kw - 1, kh, kw, 0);
        let out = kernels::deconv2d(
            self.value(input).data(),
            b,
            c,
            &geom,
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&[b, co, geom.h, geom.w], out)?;
        Ok(self.push(
            value,
            Op::Deconv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var, policy: PoolPolicy) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return dim_err(format!("maxpool expects [B,C,H,W], got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        if policy == PoolPolicy::Strict && (h % 2 != 0 || w % 2 != 0) {
            return dim_err(format!("maxpool: odd spatial extent {h}x{w}"));
        }
        if h < 2 || w < 2 {
            return dim_err(format!("maxpool: extent {h}x{w} smaller than the 2x2 window"));
        }
        let (out, argmax) = kernels::maxpool2x2(self.value(input).data(), s[0] * s[1], h, w);
        let value = Tensor::new(&[s[0], s[1], h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return dim_err(format!("upsample expects [B,C,H,W], got {s:?}"));
        }
        let out = kernels::upsample2x(self.value(input).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(value, Op::Upsample { input }, &[input]))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                let value = self.value(input).map(|v| v.max(0.0));
                self.push(value, Op::Relu(input), &[input])
            }
            Activation::Sigmoid => {
                let value = self.value(input).map(kernels::sigmoid);
                self.push(value, Op::Sigmoid(input), &[input])
            }
            Activation::Identity => input,
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Train-mode batch normalization over axis 0 of a `[batch, features]`
    /// input. Returns the output and the batch statistics so the caller can
    /// fold them into running averages.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, f) = self.check_bn(input, gamma, beta)?;
        if n < 2 {
            return Err(Error::Config(
                "batch norm in train mode needs a batch of at least 2".into(),
            ));
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0; f];
        for row in x.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in x.chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let var_out = self.bn_apply(input, gamma, beta, &mean, inv_std, true);
        Ok((
            var_out,
            BatchStats {
                mean,
                var,
                count: n,
            },
        ))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        epsilon: f64,
    ) -> Result<Var> {
        let (_, f) = self.check_bn(input, gamma, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return dim_err("batch norm running statistics do not match the feature axis");
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + epsilon).sqrt())
            .collect();
        Ok(self.bn_apply(input, gamma, beta, running_mean, inv_std, false))
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(input);
        if s.len() != 2 {
            return dim_err(format!("batch norm expects [batch, features], got {s:?}"));
        }
        let f = s[1];
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return dim_err(format!(
                "batch norm: gamma {:?} / beta {:?} must be [{f}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok((s[0], f))
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let xt = self.value(input);
        let shape = xt.shape().to_vec();
        let f = shape[1];
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data().chunks(f) {
            for j in 0..f {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat.push(xh);
                out.push(g[j] * xh + bt[j]);
            }
        }
        let value = Tensor::new(&shape, out).expect("shape preserved");
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in train mode;
    /// eval mode and `rate == 0` return the input unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(input).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xt = self.value(input);
        let out: Vec<f64> = xt.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(xt.shape(), out)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let shape = [t.rows(), t.row_len()];
        if t.shape() == shape {
            return Ok(input);
        }
        self.reshape(input, &shape)
    }

    /// Weighted sum `Σ cᵢ·xᵢ` of same-shaped tensors.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Usage("combine needs at least one term".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return dim_err(format!(
                    "combine: shape {:?} differs from {shape:?}",
                    self.shape(v)
                ));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Combine(terms.to_vec()), &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(&[(a, 1.0), (b, 1.0)])
    }

    /// Concatenates `[B, *]` tensors along axis 1 after flattening each.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols: row counts differ");
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks tensors along axis 0; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return dim_err(format!(
                    "concat_rows: trailing shape {:?} differs from {tail:?}",
                    &t.shape()[1..]
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        if start >= end || end > t.rows() {
            return dim_err(format!("slice_rows {start}..{end} out of range for {:?}", t.shape()));
        }
        let w = t.row_len();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(&shape, t.data()[start * w..end * w].to_vec())?;
        Ok(self.push(value, Op::SliceRows { input, start }, &[input]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "mse: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(s / x.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Σⱼ Pearson(a[:,j], b[:,j]) over the batch, with `epsilon` added under
    /// each square root of the denominator.
    pub fn sum_correlation(&mut self, a: Var, b: Var, epsilon: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return dim_err(format!("sum_correlation: shapes {sa:?} and {sb:?} must be equal [batch, d]"));
        }
        let (n, d) = (sa[0], sa[1]);
        if n < 2 {
            return Err(Error::Config(
                "correlation needs a batch of at least 2 samples".into(),
            ));
        }
        let centered = |t: &Tensor| {
            let mut mean = vec![0.0; d];
            for row in t.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut c = t.data().to_vec();
            for row in c.chunks_mut(d) {
                for (v, m) in row.iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
            c
        };
        let ca = centered(self.value(a));
        let cb = centered(self.value(b));
        let mut saa = vec![0.0; d];
        let mut sbb = vec![0.0; d];
        let mut sab = vec![0.0; d];
        for (ra, rb) in ca.chunks(d).zip(cb.chunks(d)) {
            for j in 0..d {
                saa[j] += ra[j] * ra[j];
                sbb[j] += rb[j] * rb[j];
                sab[j] += ra[j] * rb[j];
            }
        }
        let norm_a: Vec<f64> = saa.iter().map(|s| (s + epsilon).sqrt()).collect();
        let norm_b: Vec<f64> = sbb.iter().map(|s| (s + epsilon).sqrt()).collect();
        let total: f64 = (0..d).map(|j| sab[j] / (norm_a[j] * norm_b[j])).sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::SumCorrelation {
                a,
                b,
                centered_a: ca,
                centered_b: cb,
                norm_a,
                norm_b,
                cross: sab,
            },
            &[a, b],
        ))
    }

    /// Fingerprint of every piecewise branch taken in the forward pass
    /// (relu signs, pooling winners). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        mix(u64::from(*v > 0.0));
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar node. Returns gradients for every leaf that
    /// requires them; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = Tensor::new(self.shape(v), g).expect("gradient shape mirrors value");
        self.accumulate(grads, v, t);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (b, k) = (xs[0], xs[1]);
                let n = self.shape(*weight)[1];
                if self.requires_grad(*input) {
                    let dx = kernels::matmul_nt(gd, self.value(*weight).data(), b, n, k);
                    self.accumulate_vec(grads, *input, dx);
                }
                if self.requires_grad(*weight) {
                    let dw = kernels::matmul_tn(self.value(*input).data(), gd, b, k, n);
                    self.accumulate_vec(grads, *weight, dw);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate_vec(grads, *bias, db);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let dt = kernels::transpose(gd, s[0], s[1]);
                self.accumulate_vec(grads, *a, dt);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let batch = self.shape(*input)[0];
                let c_out = self.shape(*kernel)[0];
                let (dx, dk, db) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    batch,
                    geom,
                    self.value(*kernel).data(),
                    c_out,
                    gd,
                    self.requires_grad(*input),
                );
                if let Some(dx) = dx {
                    self.accumulate_vec(grads, *input, dx);
                }
                self.accumulate_vec(grads, *kernel, dk);
                self.accumulate_vec(grads, *bias, db);
            }
            Op::Deconv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let s = self.shape(*input);
                let (dx, dk, db) = kernels::deconv2d_backward(
                    self.value(*input).data(),
                    s[0],
                    s[1],
                    geom,
                    self.value(*kernel).data(),
                    gd,
                    self.requires_grad(*input),
                );
                if let Some(dx) = dx {
                    self.accumulate_vec(grads, *input, dx);
                }
                self.accumulate_vec(grads, *kernel, dk);
                self.accumulate_vec(grads, *bias, db);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (&idx, &d) in argmax.iter().zip(gd) {
                    dx[idx] += d;
                }
                self.accumulate_vec(grads, *input, dx);
            }
            Op::Upsample { input } => {
                let s = self.shape(*input);
                let dx = kernels::upsample2x_backward(gd, s[0] * s[1], s[2], s[3]);
                self.accumulate_vec(grads, *input, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &d)| d * s * (1.0 - s))
                    .collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (n, f) = (s[0], s[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (row, xr) in gd.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        dgamma[j] += row[j] * xr[j];
                        dbeta[j] += row[j];
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; n * f];
                    if *batch_stats {
                        let nf = n as f64;
                        for (i, (row, xr)) in gd.chunks(f).zip(xhat.chunks(f)).enumerate() {
                            for j in 0..f {
                                dx[i * f + j] = gam[j] * inv_std[j] / nf
                                    * (nf * row[j] - dbeta[j] - xr[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (i, row) in gd.chunks(f).enumerate() {
                            for j in 0..f {
                                dx[i * f + j] = row[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate_vec(grads, *input, dx);
                }
                self.accumulate_vec(grads, *gamma, dgamma);
                self.accumulate_vec(grads, *beta, dbeta);
            }
            Op::Dropout { input, mask } => {
                let dx = gd.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accumulate_vec(grads, *input, dx);
            }
            Op::Reshape(x) => {
                self.accumulate_vec(grads, *x, gd.to_vec());
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    self.accumulate_vec(grads, v, gd.iter().map(|d| c * d).collect());
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.row_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate_vec(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate_vec(grads, p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                if self.requires_grad(*input) {
                    let t = self.value(*input);
                    let w = t.row_len();
                    let mut d = vec![0.0; t.len()];
                    d[start * w..start * w + gd.len()].copy_from_slice(gd);
                    self.accumulate_vec(grads, *input, d);
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * gd[0] / x.len() as f64;
                let da: Vec<f64> = x.iter().zip(y).map(|(p, q)| scale * (p - q)).collect();
                if self.requires_grad(*b) {
                    self.accumulate_vec(grads, *b, da.iter().map(|v| -v).collect());
                }
                self.accumulate_vec(grads, *a, da);
            }
            Op::SumCorrelation {
                a,
                b,
                centered_a,
                centered_b,
                norm_a,
                norm_b,
                cross,
            } => {
                let s = self.shape(*a);
                let (n, d) = (s[0], s[1]);
                let up = gd[0];
                let grad_side = |mine: &[f64], other: &[f64], my_norm: &[f64], other_norm: &[f64]| {
                    let mut out = vec![0.0; n * d];
                    for j in 0..d {
                        let ab = my_norm[j] * other_norm[j];
                        let coef = cross[j] / (my_norm[j] * my_norm[j] * ab);
                        let mut mean = 0.0;
                        for i in 0..n {
                            let v = up * (other[i * d + j] / ab - coef * mine[i * d + j]);
                            out[i * d + j] = v;
                            mean += v;
                        }
                        mean /= n as f64;
                        for i in 0..n {
                            out[i * d + j] -= mean;
                        }
                    }
                    out
                };
                if self.requires_grad(*a) {
                    let da = grad_side(centered_a, centered_b, norm_a, norm_b);
                    self.accumulate_vec(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = grad_side(centered_b, centered_a, norm_b, norm_a);
                    self.accumulate_vec(grads, *b, db);
                }
            }
        }
        Ok(())
    }
}
