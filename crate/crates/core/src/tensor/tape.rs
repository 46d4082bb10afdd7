use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// The fixed operation set understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Linear,
    Relu,
    MaxPool2d,
    AvgPool2d,
    BatchNorm2d,
    Flatten,
    Reshape,
    Add,
    Sub,
    Mul,
    Matmul,
    Scale,
    AddScalar,
    Square,
    Sum,
    Mean,
    SoftmaxCrossEntropy,
    CosineSimilarity,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::Relu,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::BatchNorm2d,
        OpKind::Flatten,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Matmul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SoftmaxCrossEntropy,
        OpKind::CosineSimilarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::BatchNorm2d => "batch_norm2d",
            OpKind::Flatten => "flatten",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::CosineSimilarity => "cosine_similarity",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnsupportedOp(s.to_string()))
    }
}

/// Exponential moving averages of batch-norm moments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + momentum * b;
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch moments; the unbiased moments are returned for the caller to fold in.
    Train,
    Eval(&'a RunningStats<T>),
}

/// Per-channel batch moments produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var },
    MaxPool2d { input: Var, geom: PoolGeom, argmax: Vec<u32> },
    AvgPool2d { input: Var, geom: PoolGeom },
    BatchNorm2d { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Reshape { input: Var, flatten: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Matmul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    AddScalar { input: Var },
    Square { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    CosineSimilarity { input: Var, pooled: bool, eps: T, norms: Vec<T>, gram: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::BatchNorm2d { .. } => OpKind::BatchNorm2d,
            Op::Reshape { flatten: true, .. } => OpKind::Flatten,
            Op::Reshape { flatten: false, .. } => OpKind::Reshape,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Square { .. } => OpKind::Square,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::CosineSimilarity { .. } => OpKind::CosineSimilarity,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Wengert list of values and the operations that produced them.
///
/// Nodes are appended in evaluation order, so the list is always
/// topologically sorted and one reverse sweep visits each node once.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of recorded leaves, keyed by [`Var`].
pub struct Gradients<T> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.remove(&var.index)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.node(var).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn op_kind(&self, var: Var) -> Option<OpKind> {
        self.node(var).ok().map(|n| n.op.kind())
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Backward("variable was not produced by this tape".into()));
        }
        Ok(&self.nodes[var.index])
    }

    fn check(&self, var: Var) -> Result<&Tensor<T>> {
        self.node(var)
            .map(|n| &n.value)
            .map_err(|_| Error::invalid("operand was not produced by this tape"))
    }

    fn push_raw(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let index = self.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var { tape: self.id, index }
    }

    fn push(&mut self, inputs: &[Var], value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let kind = op.kind();
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|&v| self.nodes[v.index].value.all_finite())
        {
            return Err(Error::NonFinite(format!("output of {kind} on finite inputs")));
        }
        let rg = inputs.iter().any(|&v| self.nodes[v.index].requires_grad);
        Ok(self.push_raw(value, rg, op))
    }

    // ---- forward operations ----

    /// 2-D cross-correlation of `(B, C_in, H, W)` with `(C_out, C_in, kH, kW)` plus optional bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let x = self.check(input)?;
        let w = self.check(weight)?;
        let [batch, in_channels, height, width] = x.dims4("conv2d")?;
        let [out_channels, w_in, kh, kw] = w.dims4("conv2d")?;
        if w_in != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_channels} channels but kernel {:?} expects {w_in}", w.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::window_extent(height, kh, stride, padding),
            kernels::window_extent(width, kw, stride, padding),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {height}x{width} with padding {padding}"),
            ));
        };
        let bias_data = match bias {
            Some(b) => {
                let b = self.check(b)?;
                if b.shape() != [out_channels] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias shape {:?} does not match {out_channels} output channels", b.shape()),
                    ));
                }
                Some(b.data())
            }
            None => None,
        };
        let geom = ConvGeom {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), bias_data, &geom);
        let value = Tensor::from_parts(vec![batch, out_channels, out_h, out_w], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(&inputs, value, Op::Conv2d { input, weight, bias, geom })
    }

    /// `x W^T + b` with `x: (B, in)`, `W: (out, in)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.check(input)?;
        let w = self.check(weight)?;
        let [batch, fan_in] = x.dims2("linear")?;
        let [fan_out, w_in] = w.dims2("linear")?;
        if w_in != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input features {fan_in} do not match weight {:?}", w.shape()),
            ));
        }
        let mut out = vec![T::zero(); batch * fan_out];
        let mut beta = T::zero();
        if let Some(b) = bias {
            let b = self.check(b)?;
            if b.shape() != [fan_out] {
                return Err(Error::shape("linear", format!("bias shape {:?} vs {fan_out} outputs", b.shape())));
            }
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b.data());
            }
            beta = T::one();
        }
        T::gemm(batch, fan_in, fan_out, T::one(), x.data(), fan_in as isize, 1, w.data(), 1, fan_in as isize, beta, &mut out, fan_out as isize, 1);
        let value = Tensor::from_parts(vec![batch, fan_out], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(&inputs, value, Op::Linear { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.check(input)?.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(&[input], value, Op::Relu { input })
    }

    fn pool_geom(&self, input: Var, kernel: usize, stride: usize, op: &'static str) -> Result<(PoolGeom, [usize; 4])> {
        let dims = self.check(input)?.dims4(op)?;
        let [b, c, h, w] = dims;
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!("{op}: kernel and stride must be positive")));
        }
        let (Some(out_h), Some(out_w)) =
            (kernels::window_extent(h, kernel, stride, 0), kernels::window_extent(w, kernel, stride, 0))
        else {
            return Err(Error::shape(op, format!("window {kernel} does not fit {h}x{w}")));
        };
        Ok((PoolGeom { planes: b * c, height: h, width: w, kernel, stride, out_h, out_w }, dims))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, [b, c, _, _]) = self.pool_geom(input, kernel, stride, "max_pool2d")?;
        let (out, argmax) = kernels::max_pool_forward(self.nodes[input.index].value.data(), &geom);
        let value = Tensor::from_parts(vec![b, c, geom.out_h, geom.out_w], out);
        self.push(&[input], value, Op::MaxPool2d { input, geom, argmax })
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, [b, c, _, _]) = self.pool_geom(input, kernel, stride, "avg_pool2d")?;
        let out = kernels::avg_pool_forward(self.nodes[input.index].value.data(), &geom);
        let value = Tensor::from_parts(vec![b, c, geom.out_h, geom.out_w], out);
        self.push(&[input], value, Op::AvgPool2d { input, geom })
    }

    /// Batch normalization over `(B, H, W)` for each channel of a rank-4 input.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let x = self.check(input)?;
        let [b, c, h, w] = x.dims4("batch_norm2d")?;
        let g = self.check(gamma)?;
        let be = self.check(beta)?;
        if g.shape() != [c] || be.shape() != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!("affine parameters {:?}/{:?} do not match {c} channels", g.shape(), be.shape()),
            ));
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::lit(eps);
        let xd = x.data();
        let (mean, var, moments, training) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..b {
                        acc += xd[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / T::lit(count as f64);
                    let mut sq = T::zero();
                    for s in 0..b {
                        for &v in &xd[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / T::lit(count as f64);
                }
                let unbiased = if count > 1 {
                    var.iter().map(|&v| v * T::lit(count as f64 / (count - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                let moments = BatchMoments { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(moments), true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::shape("batch_norm2d", "running statistics do not match channel count"));
                }
                (stats.mean.clone(), stats.var.clone(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..b {
            for ch in 0..c {
                let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for i in range {
                    let n = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = n;
                    out[i] = n * g.data()[ch] + be.data()[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, h, w], out);
        let var_out = self.push(
            &[input, gamma, beta],
            value,
            Op::BatchNorm2d { input, gamma, beta, xhat, inv_std, training },
        )?;
        Ok((var_out, moments))
    }

    /// `(B, ...) -> (B, prod(...))`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let b = x.shape()[0];
        let rest = x.numel() / b;
        let value = x.clone().reshape([b, rest])?;
        self.push(&[input], value, Op::Reshape { input, flatten: true })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(input)?.clone().reshape(shape.to_vec())?;
        self.push(&[input], value, Op::Reshape { input, flatten: false })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_map(a, b, |p, q| p + q);
        self.push(&[a, b], value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_map(a, b, |p, q| p - q);
        self.push(&[a, b], value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_map(a, b, |p, q| p * q);
        self.push(&[a, b], value, Op::Mul { a, b })
    }

    /// `(M, K) x (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.check(a)?.dims2("matmul")?;
        let [k2, n] = self.check(b)?.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}, {k}) x ({k2}, {n})")));
        }
        let mut out = vec![T::zero(); m * n];
        let (x, y) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        T::gemm(m, k, n, T::one(), x.data(), k as isize, 1, y.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        self.push(&[a, b], Tensor::from_parts(vec![m, n], out), Op::Matmul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::lit(factor);
        let value = self.check(input)?.map(|v| v * factor);
        self.push(&[input], value, Op::Scale { input, factor })
    }

    pub fn add_scalar(&mut self, input: Var, value: f64) -> Result<Var> {
        let c = T::lit(value);
        let out = self.check(input)?.map(|v| v + c);
        self.push(&[input], out, Op::AddScalar { input })
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let value = self.check(input)?.map(|v| v * v);
        self.push(&[input], value, Op::Square { input })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.check(input)?.sum());
        self.push(&[input], value, Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.check(input)?;
        let value = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        self.push(&[input], value, Op::Mean { input })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.check(logits)?;
        let [batch, classes] = x.dims2("softmax_cross_entropy")?;
        if labels.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for (s, row) in x.data().chunks_exact(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[s * classes..(s + 1) * classes];
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            loss += z.ln() + max - row[labels[s]];
        }
        let value = Tensor::scalar(loss / T::lit(batch as f64));
        self.push(&[logits], value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Channel-by-channel cosine similarity.
    ///
    /// `input` is `(B, C, ...)`; each channel is flattened over the trailing axes.
    /// With `pooled == false` the result is `(B, C, C)`, one matrix per sample. With
    /// `pooled == true` all samples are concatenated along the feature axis and the
    /// result is `(1, C, C)`. Entries are `<y_i, y_j> / (|y_i| |y_j| + eps)`.
    pub fn cosine_similarity(&mut self, input: Var, pooled: bool, eps: f64) -> Result<Var> {
        let x = self.check(input)?;
        if x.rank() < 3 {
            return Err(Error::shape("cosine_similarity", format!("expected (B, C, ...), got {:?}", x.shape())));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let f = x.numel() / (b * c);
        let eps_t = T::lit(eps);
        let groups = if pooled { 1 } else { b };
        let mut out = vec![T::zero(); groups * c * c];
        let mut gram = vec![T::zero(); groups * c * c];
        let mut norms = vec![T::zero(); groups * c];
        let pooled_rows;
        let (rows, width): (&[T], usize) = if pooled {
            pooled_rows = pool_channels(x.data(), b, c, f);
            (&pooled_rows, b * f)
        } else {
            (x.data(), f)
        };
        for gi in 0..groups {
            let y = &rows[gi * c * width..(gi + 1) * c * width];
            let gm = &mut gram[gi * c * c..(gi + 1) * c * c];
            T::gemm(c, width, c, T::one(), y, width as isize, 1, y, 1, width as isize, T::zero(), gm, c as isize, 1);
            let nm = &mut norms[gi * c..(gi + 1) * c];
            for (i, n) in nm.iter_mut().enumerate() {
                *n = y[i * width..(i + 1) * width].iter().map(|&v| v * v).sum::<T>().sqrt();
            }
            let s = &mut out[gi * c * c..(gi + 1) * c * c];
            for i in 0..c {
                for j in 0..c {
                    s[i * c + j] = gm[i * c + j] / (nm[i] * nm[j] + eps_t);
                }
            }
        }
        let value = Tensor::from_parts(vec![groups, c, c], out);
        self.push(&[input], value, Op::CosineSimilarity { input, pooled, eps: eps_t, norms, gram })
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU signs
    /// and max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.index].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---- reverse sweep ----

    /// Reverse-mode sweep from a scalar `loss`, returning gradients for every
    /// leaf that requires them. Contributions from multiple consumers add.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", node.value.shape())));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        let mut out = HashMap::new();
        if !node.requires_grad {
            return Ok(Gradients { tape: self.id, grads: out });
        }
        pending[loss.index] = Some(vec![T::one()]);
        for idx in (0..=loss.index).rev() {
            let Some(g) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.insert(idx, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(node, &g, &mut pending);
        }
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    val(*input).data(),
                    val(*weight).data(),
                    g,
                    geom,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = grads.dx {
                    accumulate(pending, *input, dx);
                }
                if let Some(dw) = grads.dw {
                    accumulate(pending, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, grads.db) {
                    accumulate(pending, *b, db);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let w = val(*weight);
                let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
                let fan_out = w.shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    T::gemm(batch, fan_out, fan_in, T::one(), g, fan_out as isize, 1, w.data(), fan_in as isize, 1, T::zero(), &mut dx, fan_in as isize, 1);
                    accumulate(pending, *input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(fan_out, batch, fan_in, T::one(), g, 1, fan_out as isize, x.data(), fan_in as isize, 1, T::zero(), &mut dw, fan_in as isize, 1);
                    accumulate(pending, *weight, dw);
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in g.chunks_exact(fan_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(pending, b, db);
                }
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(pending, *input, dx);
            }
            Op::MaxPool2d { input, geom, argmax } => {
                accumulate(pending, *input, kernels::max_pool_backward(g, argmax, geom));
            }
            Op::AvgPool2d { input, geom } => {
                accumulate(pending, *input, kernels::avg_pool_backward(g, geom));
            }
            Op::BatchNorm2d { input, gamma, beta, xhat, inv_std, training } => {
                let [b, c, h, w] = val(*input).dims4("batch_norm2d").expect("recorded rank 4");
                let plane = h * w;
                let count = T::lit((b * plane) as f64);
                let gm = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..b {
                    for ch in 0..c {
                        for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..b {
                        for ch in 0..c {
                            let scale = gm[ch] * inv_std[ch];
                            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                                dx[i] = if *training {
                                    scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    accumulate(pending, *input, dx);
                }
                if self.wants(*gamma) {
                    accumulate(pending, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(pending, *beta, dbeta);
                }
            }
            Op::Reshape { input, .. } => accumulate(pending, *input, g.to_vec()),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(pending, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(pending, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(pending, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(pending, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(&d, &y)| d * y).collect();
                    accumulate(pending, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(&d, &x)| d * x).collect();
                    accumulate(pending, *b, d);
                }
            }
            Op::Matmul { a, b } => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, y.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    accumulate(pending, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), x.data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    accumulate(pending, *b, db);
                }
            }
            Op::Scale { input, factor } => {
                accumulate(pending, *input, g.iter().map(|&d| d * *factor).collect());
            }
            Op::AddScalar { input } => accumulate(pending, *input, g.to_vec()),
            Op::Square { input } => {
                let two = T::lit(2.0);
                let d = g.iter().zip(val(*input).data()).map(|(&d, &x)| two * x * d).collect();
                accumulate(pending, *input, d);
            }
            Op::Sum { input } => {
                accumulate(pending, *input, vec![g[0]; val(*input).numel()]);
            }
            Op::Mean { input } => {
                let n = val(*input).numel();
                accumulate(pending, *input, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / T::lit(batch as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * classes + l] -= scale;
                }
                accumulate(pending, *logits, d);
            }
            Op::CosineSimilarity { input, pooled, eps, norms, gram } => {
                let x = val(*input);
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let f = x.numel() / (b * c);
                let groups = if *pooled { 1 } else { b };
                let width = if *pooled { b * f } else { f };
                let pooled_rows;
                let rows: &[T] = if *pooled {
                    pooled_rows = pool_channels(x.data(), b, c, f);
                    &pooled_rows
                } else {
                    x.data()
                };
                let mut dy = vec![T::zero(); groups * c * width];
                let mut gbar = vec![T::zero(); c * c];
                let mut nbar = vec![T::zero(); c];
                for gi in 0..groups {
                    let y = &rows[gi * c * width..(gi + 1) * c * width];
                    let sbar = &g[gi * c * c..(gi + 1) * c * c];
                    let gm = &gram[gi * c * c..(gi + 1) * c * c];
                    let nm = &norms[gi * c..(gi + 1) * c];
                    nbar.fill(T::zero());
                    for i in 0..c {
                        for j in 0..c {
                            let dij = nm[i] * nm[j] + *eps;
                            let gij = sbar[i * c + j] / dij;
                            // symmetric contribution of G_ij = <y_i, y_j>
                            gbar[i * c + j] = gij;
                            let dbar = -sbar[i * c + j] * gm[i * c + j] / (dij * dij);
                            nbar[i] += dbar * nm[j];
                            nbar[j] += dbar * nm[i];
                        }
                    }
                    let sym: Vec<T> = (0..c * c).map(|ij| gbar[ij] + gbar[(ij % c) * c + ij / c]).collect();
                    let dyg = &mut dy[gi * c * width..(gi + 1) * c * width];
                    T::gemm(c, c, width, T::one(), &sym, c as isize, 1, y, width as isize, 1, T::zero(), dyg, width as isize, 1);
                    for i in 0..c {
                        if nm[i] > T::zero() {
                            let k = nbar[i] / nm[i];
                            for (d, &v) in dyg[i * width..(i + 1) * width].iter_mut().zip(&y[i * width..(i + 1) * width]) {
                                *d += k * v;
                            }
                        }
                    }
                }
                let dx = if *pooled { unpool_channels(&dy, b, c, f) } else { dy };
                accumulate(pending, *input, dx);
            }
        }
    }
}

/// `(B, C, F)` -> `(C, B*F)`.
fn pool_channels<T: Scalar>(x: &[T], b: usize, c: usize, f: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..b {
        for ch in 0..c {
            out[ch * b * f + s * f..ch * b * f + (s + 1) * f].copy_from_slice(&x[(s * c + ch) * f..(s * c + ch + 1) * f]);
        }
    }
    out
}

/// Inverse of [`pool_channels`].
fn unpool_channels<T: Scalar>(x: &[T], b: usize, c: usize, f: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..b {
        for ch in 0..c {
            out[(s * c + ch) * f..(s * c + ch + 1) * f].copy_from_slice(&x[ch * b * f + s * f..ch * b * f + (s + 1) * f]);
        }
    }
    out
}

fn accumulate<T: Scalar>(pending: &mut [Option<Vec<T>>], var: Var, contribution: Vec<T>) {
    match &mut pending[var.index] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn same_padding_conv_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 3, 32, 32]));
        let w = tape.constant(Tensor::zeros([64, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 64, 32, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros([4, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[-3.0]), true);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]), true);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_foreign_and_nonscalar() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = a.sum(x).unwrap();
        let _ = b.leaf(t(&[1], &[0.0]), true);
        assert!(b.backward(loss).is_err());
        assert!(a.backward(x).is_err());
    }

    #[test]
    fn op_kind_parsing() {
        assert_eq!("conv2d".parse::<OpKind>().unwrap(), OpKind::Conv2d);
        assert!(matches!("depthwise".parse::<OpKind>(), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros([2, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[3, 7]).unwrap();
        assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pooled_layout_round_trips() {
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let p = pool_channels(&x, 2, 3, 4);
        assert_eq!(&p[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(unpool_channels(&p, 2, 3, 4), x);
    }

    #[test]
    fn zero_channel_has_zero_similarity_row_and_finite_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2, 2], &[0.0, 0.0, 1.0, 2.0]), true);
        let s = tape.cosine_similarity(x, false, 1e-12).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert_eq!(tape.value(s).data()[1], 0.0);
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().all_finite());
    }
}
