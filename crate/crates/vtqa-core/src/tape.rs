//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! Every operation appends one node, so node order is already topological;
//! [`Tape::backward`] replays the nodes once in reverse. The tape is rebuilt
//! for each forward pass and never reused.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    SoftmaxLast { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Sum { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, src: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<(Var, usize)> },
    ConcatCols { parts: Vec<(Var, usize)> },
    SliceCols { x: Var, start: usize, len: usize },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations with their backward rules.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    min_relu_input_abs: f64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), min_relu_input_abs: f64::INFINITY }
    }

    /// Smallest |x| that reached a ReLU this pass; finite-difference
    /// harnesses use it to reject instances sitting on a kink.
    pub fn min_relu_input_abs(&self) -> f64 {
        self.min_relu_input_abs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor; it participates in backward when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.clone();
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = false;
        Ok(self.push(t, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert!(self.nodes[v.0].tensor.is_scalar());
        self.nodes[v.0].tensor.data()[0]
    }

    /// Gradient accumulated by [`Tape::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Gradient as an owned vector, zeros when the node was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match self.nodes[v.0].tensor.grad.as_deref() {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.nodes[v.0].tensor.numel()],
        }
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(
            tensor.data().iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<T>, requires: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut tensor = Tensor::zeros(shape);
        tensor.data_mut().copy_from_slice(&data);
        tensor.requires_grad = requires;
        self.push(tensor, op)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    // ── Forward operations ────────────────────────────────────────────

    /// Matrix product over the last two axes. Leading axes must match
    /// exactly, or be absent on one side (that side is broadcast).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::dim("matmul", format!("need rank >= 2, got {ash:?} x {bsh:?}")));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let batch_a = &ash[..ash.len() - 2];
        let batch_b = &bsh[..bsh.len() - 2];
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents differ: {ash:?} x {bsh:?}")));
        }
        if !batch_a.is_empty() && !batch_b.is_empty() && batch_a != batch_b {
            return Err(Error::dim("matmul", format!("leading extents differ: {ash:?} x {bsh:?}")));
        }
        let batch: Vec<usize> = if batch_a.is_empty() { batch_b.to_vec() } else { batch_a.to_vec() };
        let nb: usize = batch.iter().product();
        let mut out = vec![T::zero(); nb * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for t in 0..nb {
                let asl = if batch_a.is_empty() { ad } else { &ad[t * m * k..(t + 1) * m * k] };
                let bsl = if batch_b.is_empty() { bd } else { &bd[t * k * n..(t + 1) * k * n] };
                mm_nn_acc(asl, bsl, &mut out[t * m * n..(t + 1) * m * n], m, k, n);
            }
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_result(shape, out, req, Op::Matmul { a, b }))
    }

    /// Elementwise sum of two equally-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_result(shape, data, req, Op::Add { a, b }))
    }

    /// Adds a vector over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(bias).numel() != d {
            return Err(Error::dim(
                "add_bias",
                format!("bias numel {} vs last extent {}", self.value(bias).numel(), d),
            ));
        }
        let bd = self.data(bias).to_vec();
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push_result(shape, data, req, Op::AddBias { x, bias }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_result(shape, data, req, Op::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_result(shape, data, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_result(shape, data, req, Op::Scale { x, c })
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: Var) -> Var {
        let margin = self
            .data(x)
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(f64::INFINITY, f64::min);
        self.min_relu_input_abs = self.min_relu_input_abs.min(margin);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_result(shape, data, req, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let data: Vec<T> = self.data(x).iter().map(|&v| one / (one + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_result(shape, data, req, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_result(shape, data, req, Op::Tanh { x })
    }

    /// Numerically stable softmax over the last axis.
    ///
    /// `mask` marks positions to keep (`true` = attend). Its length must be
    /// either the last extent (broadcast over rows) or the full element
    /// count. Masked positions come out exactly zero; each row must keep at
    /// least one position.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let rows = self.value(x).numel() / d;
        if let Some(m) = mask {
            if m.len() != d && m.len() != rows * d {
                return Err(Error::dim(
                    "softmax_lastdim",
                    format!("mask len {} fits neither last extent {} nor numel {}", m.len(), d, rows * d),
                ));
            }
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let keep = |j: usize| -> bool {
                match mask {
                    None => true,
                    Some(m) if m.len() == d => m[j],
                    Some(m) => m[r * d + j],
                }
            };
            let mut max = T::neg_infinity();
            for j in 0..d {
                if keep(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::InvalidMask(format!("softmax row {r} has every position masked")));
            }
            let mut sum = T::zero();
            for j in 0..d {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[r * d + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..d {
                out[r * d + j] = out[r * d + j] / sum;
            }
        }
        let req = self.requires(x);
        Ok(self.push_result(shape, out, req, Op::SoftmaxLast { x }))
    }

    /// Per-last-axis standardization (population variance) with affine output.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma/beta numel {}/{} vs last extent {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel(),
                    d
                ),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm: eps must be positive"));
        }
        let rows = self.value(x).numel() / d;
        let dt = T::cast(d as f64);
        let mut out = vec![T::zero(); rows * d];
        let mut means = vec![T::zero(); rows];
        let mut inv_stds = vec![T::zero(); rows];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mean = T::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean / dt;
                let mut var = T::zero();
                for &v in row {
                    var = var + (v - mean) * (v - mean);
                }
                var = var / dt;
                let inv_std = T::one() / (var + eps).sqrt();
                means[r] = mean;
                inv_stds[r] = inv_std;
                for j in 0..d {
                    out[r * d + j] = gd[j] * (row[j] - mean) * inv_std + bd[j];
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push_result(
            shape,
            out,
            req,
            Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv_stds },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let req = self.requires(x);
        self.push_result(vec![1], vec![s], req, Op::Sum { x })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(Error::dim("transpose", format!("need rank 2, got {sh:?}")));
        }
        let (r, c) = (sh[0], sh[1]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push_result(vec![c, r], out, req, Op::Transpose { x }))
    }

    /// Reinterpret the element buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        let req = self.requires(x);
        Ok(self.push_result(shape, data, req, Op::Reshape { x }))
    }

    /// Select rows of a 2-D tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(Error::dim("gather_rows", format!("need rank 2, got {sh:?}")));
        }
        let (n, d) = (sh[0], sh[1]);
        if idx.is_empty() {
            return Err(Error::contract("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather_rows: index {bad} out of range 0..{n}")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let req = self.requires(x);
        Ok(self.push_result(vec![idx.len(), d], out, req, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Copy `base`, overwriting row `idx[r]` with row `r` of `src`.
    /// Rows not named in `idx` are copied bit-for-bit.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let bsh = self.shape(base).to_vec();
        let ssh = self.shape(src).to_vec();
        if bsh.len() != 2 || ssh.len() != 2 || bsh[1] != ssh[1] {
            return Err(Error::dim(
                "scatter_rows",
                format!("base {bsh:?} vs src {ssh:?}"),
            ));
        }
        if ssh[0] != idx.len() {
            return Err(Error::dim(
                "scatter_rows",
                format!("src has {} rows but idx names {}", ssh[0], idx.len()),
            ));
        }
        let (n, d) = (bsh[0], bsh[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("scatter_rows: index {bad} out of range 0..{n}")));
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if seen[i] {
                return Err(Error::contract(format!("scatter_rows: duplicate index {i}")));
            }
            seen[i] = true;
        }
        let mut out = self.data(base).to_vec();
        {
            let sd = self.data(src);
            for (r, &i) in idx.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&sd[r * d..(r + 1) * d]);
            }
        }
        let req = self.requires(base) || self.requires(src);
        Ok(self.push_result(bsh, out, req, Op::ScatterRows { base, src, idx: idx.to_vec() }))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts"));
        }
        let d = {
            let sh = self.shape(parts[0]);
            if sh.len() != 2 {
                return Err(Error::dim("concat_rows", format!("need rank 2, got {sh:?}")));
            }
            sh[1]
        };
        let mut rows = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != 2 || sh[1] != d {
                return Err(Error::dim("concat_rows", format!("column mismatch: {sh:?} vs d={d}")));
            }
            rows += sh[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            out.extend_from_slice(self.data(p));
            meta.push((p, self.shape(p)[0]));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push_result(vec![rows, d], out, req, Op::ConcatRows { parts: meta }))
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let n = {
            let sh = self.shape(parts[0]);
            if sh.len() != 2 {
                return Err(Error::dim("concat_cols", format!("need rank 2, got {sh:?}")));
            }
            sh[0]
        };
        let mut width = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != 2 || sh[0] != n {
                return Err(Error::dim("concat_cols", format!("row mismatch: {sh:?} vs n={n}")));
            }
            width += sh[1];
        }
        let mut out = vec![T::zero(); n * width];
        let mut meta = Vec::with_capacity(parts.len());
        let mut col = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let pd = self.data(p);
            for r in 0..n {
                out[r * width + col..r * width + col + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            col += w;
            meta.push((p, w));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push_result(vec![n, width], out, req, Op::ConcatCols { parts: meta }))
    }

    /// Contiguous column slice of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(Error::dim("slice_cols", format!("need rank 2, got {sh:?}")));
        }
        let (n, d) = (sh[0], sh[1]);
        if start + len > d || len == 0 {
            return Err(Error::dim(
                "slice_cols",
                format!("slice {start}..{} outside width {d}", start + len),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let req = self.requires(x);
        Ok(self.push_result(vec![n, len], out, req, Op::SliceCols { x, start, len }))
    }

    /// Softmax cross-entropy of a single logit row against a class index.
    /// Accepts `[c]` or `[1, c]` logits; returns a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let numel = self.value(logits).numel();
        let sh = self.shape(logits);
        let c = *sh.last().unwrap();
        if numel != c {
            return Err(Error::dim(
                "cross_entropy",
                format!("expected one logit row, got shape {sh:?}"),
            ));
        }
        if target >= c {
            return Err(Error::contract(format!("cross_entropy: target {target} out of range 0..{c}")));
        }
        let xd = self.data(logits);
        let mut max = T::neg_infinity();
        for &v in xd {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        let mut probs = vec![T::zero(); c];
        for j in 0..c {
            let e = (xd[j] - max).exp();
            probs[j] = e;
            sum = sum + e;
        }
        for p in probs.iter_mut() {
            *p = *p / sum;
        }
        let loss = sum.ln() + max - xd[target];
        let req = self.requires(logits);
        Ok(self.push_result(vec![1], vec![loss], req, Op::CrossEntropy { logits, target, probs }))
    }

    /// Inverted dropout. Identity when not training or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng, training: bool) -> Result<Var> {
        if !training || rate <= 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep_scale = T::cast(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        let mask_var = self.constant(self.shape(x).to_vec(), mask)?;
        self.mul(x, mask_var)
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Leaves created with
    /// `requires_grad` and reachable from `loss` receive gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].tensor.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].tensor.grad.is_none() || !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Vec<T> {
        let numel = self.nodes[v.0].tensor.numel();
        self.nodes[v.0]
            .tensor
            .grad
            .get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn add_grad(&mut self, v: Var, delta: &[T]) {
        if !self.requires(v) {
            return;
        }
        let g = self.ensure_grad(v);
        for (gi, &di) in g.iter_mut().zip(delta) {
            *gi = *gi + di;
        }
    }

    fn step_backward(&mut self, i: usize) {
        let grad = self.nodes[i].tensor.grad.clone().expect("grad present");
        // Ops are matched by value where their metadata is cheap; tensors are
        // read through the borrow on self.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let ash = self.shape(a).to_vec();
                let bsh = self.shape(b).to_vec();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch_a = ash.len() > 2;
                let batch_b = bsh.len() > 2;
                let nb: usize = self.shape(Var(i)).iter().rev().skip(2).product();
                if self.requires(a) {
                    let mut da = vec![T::zero(); self.nodes[a.0].tensor.numel()];
                    let bd = self.data(b);
                    for t in 0..nb {
                        let gsl = &grad[t * m * n..(t + 1) * m * n];
                        let bsl = if batch_b { &bd[t * k * n..(t + 1) * k * n] } else { bd };
                        let dsl = if batch_a {
                            &mut da[t * m * k..(t + 1) * m * k]
                        } else {
                            &mut da[..]
                        };
                        mm_nt_acc(gsl, bsl, dsl, m, n, k);
                    }
                    self.add_grad(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![T::zero(); self.nodes[b.0].tensor.numel()];
                    let ad = self.data(a);
                    for t in 0..nb {
                        let gsl = &grad[t * m * n..(t + 1) * m * n];
                        let asl = if batch_a { &ad[t * m * k..(t + 1) * m * k] } else { ad };
                        let dsl = if batch_b {
                            &mut db[t * k * n..(t + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        mm_tn_acc(asl, gsl, dsl, m, k, n);
                    }
                    self.add_grad(b, &db);
                }
            }
            &Op::Add { a, b } => {
                self.add_grad(a, &grad);
                self.add_grad(b, &grad);
            }
            &Op::AddBias { x, bias } => {
                self.add_grad(x, &grad);
                if self.requires(bias) {
                    let d = self.nodes[bias.0].tensor.numel();
                    let mut db = vec![T::zero(); d];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % d] = db[i % d] + g;
                    }
                    self.add_grad(bias, &db);
                }
            }
            &Op::Sub { a, b } => {
                self.add_grad(a, &grad);
                if self.requires(b) {
                    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                    self.add_grad(b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if self.requires(a) {
                    let da: Vec<T> = grad.iter().zip(self.data(b)).map(|(&g, &y)| g * y).collect();
                    self.add_grad(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<T> = grad.iter().zip(self.data(a)).map(|(&g, &x)| g * x).collect();
                    self.add_grad(b, &db);
                }
            }
            &Op::Scale { x, c } => {
                let dx: Vec<T> = grad.iter().map(|&g| g * c).collect();
                self.add_grad(x, &dx);
            }
            &Op::Relu { x } => {
                let dx: Vec<T> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::Sigmoid { x } => {
                let one = T::one();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(self.data(Var(i)))
                    .map(|(&g, &y)| g * y * (one - y))
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::Tanh { x } => {
                let one = T::one();
                let dx: Vec<T> = grad
                    .iter()
                    .zip(self.data(Var(i)))
                    .map(|(&g, &y)| g * (one - y * y))
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::SoftmaxLast { x } => {
                let y = self.data(Var(i)).to_vec();
                let d = *self.shape(Var(i)).last().unwrap();
                let rows = y.len() / d;
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + grad[r * d + j] * y[r * d + j];
                    }
                    for j in 0..d {
                        dx[r * d + j] = y[r * d + j] * (grad[r * d + j] - dot);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let d = *self.shape(x).last().unwrap();
                let rows = self.nodes[x.0].tensor.numel() / d;
                let dt = T::cast(d as f64);
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let mut dx = vec![T::zero(); rows * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                        let g = grad[r * d + j] * gd[j];
                        m1 = m1 + g;
                        m2 = m2 + g * xhat;
                        dgamma[j] = dgamma[j] + grad[r * d + j] * xhat;
                        dbeta[j] = dbeta[j] + grad[r * d + j];
                    }
                    m1 = m1 / dt;
                    m2 = m2 / dt;
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                        let g = grad[r * d + j] * gd[j];
                        dx[r * d + j] = inv_std[r] * (g - m1 - xhat * m2);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            &Op::Sum { x } => {
                let g = grad[0];
                let dx = vec![g; self.nodes[x.0].tensor.numel()];
                self.add_grad(x, &dx);
            }
            &Op::Transpose { x } => {
                let sh = self.shape(x).to_vec();
                let (r, c) = (sh[0], sh[1]);
                let mut dx = vec![T::zero(); r * c];
                for i2 in 0..c {
                    for j in 0..r {
                        dx[j * c + i2] = grad[i2 * r + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            &Op::Reshape { x } => {
                self.add_grad(x, &grad);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let d = self.shape(x)[1];
                let mut dx = vec![T::zero(); self.nodes[x.0].tensor.numel()];
                for (r, &i2) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i2 * d + j] = dx[i2 * d + j] + grad[r * d + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::ScatterRows { base, src, idx } => {
                let (base, src) = (*base, *src);
                let idx = idx.clone();
                let d = self.shape(base)[1];
                if self.requires(src) {
                    let mut dsrc = vec![T::zero(); self.nodes[src.0].tensor.numel()];
                    for (r, &i2) in idx.iter().enumerate() {
                        dsrc[r * d..(r + 1) * d].copy_from_slice(&grad[i2 * d..(i2 + 1) * d]);
                    }
                    self.add_grad(src, &dsrc);
                }
                if self.requires(base) {
                    let mut dbase = grad.clone();
                    for &i2 in &idx {
                        for j in 0..d {
                            dbase[i2 * d + j] = T::zero();
                        }
                    }
                    self.add_grad(base, &dbase);
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let d = self.shape(Var(i))[1];
                let mut row = 0;
                for (p, rows) in parts {
                    let dp = &grad[row * d..(row + rows) * d];
                    let dp = dp.to_vec();
                    self.add_grad(p, &dp);
                    row += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let width = self.shape(Var(i))[1];
                let n = self.shape(Var(i))[0];
                let mut col = 0;
                for (p, w) in parts {
                    if self.requires(p) {
                        let mut dp = vec![T::zero(); n * w];
                        for r in 0..n {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&grad[r * width + col..r * width + col + w]);
                        }
                        self.add_grad(p, &dp);
                    }
                    col += w;
                }
            }
            &Op::SliceCols { x, start, len } => {
                let sh = self.shape(x).to_vec();
                let (n, d) = (sh[0], sh[1]);
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                self.add_grad(x, &dx);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let logits = *logits;
                let target = *target;
                let g = grad[0];
                let dl: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let y = if j == target { T::one() } else { T::zero() };
                        g * (p - y)
                    })
                    .collect();
                self.add_grad(logits, &dl);
            }
        }
    }
}

/// out += a[m,k] * b[k,n]
fn mm_nn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// out += a[m,n] * b[k,n]^T  (i.e. a . b-transposed), out is [m,k]
fn mm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for j in 0..n {
                s = s + arow[j] * brow[j];
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// out += a[m,k]^T * b[m,n], out is [k,n]
fn mm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_cases() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&crate::tensor::eye(2));
        let b = tape.leaf(&t64(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[5.0, 6.0, 7.0, 8.0]);

        let x = tape.leaf(&t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(&crate::tensor::eye(2));
        let y = tape.matmul(x, i).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product_by_hand() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&t64(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&t64(vec![2, 1], vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&t64(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t64(vec![2, 2], vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        // [2, 2, 3] x [3, 2] -> [2, 2, 2]; checked against per-slice products.
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&t64(
            vec![2, 2, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, 0.5, 2.0, 3.0, -2.0, 1.0],
        ));
        let b = tape.leaf(&t64(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 2]);
        let expect = [
            1.0 + 3.0, 2.0 + 3.0,
            4.0 + 6.0, 5.0 + 6.0,
            -1.0 + 2.0, 0.5 + 2.0,
            3.0 + 1.0, -2.0 + 1.0,
        ];
        for (got, want) in tape.data(c).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![1, 2], vec![0.0, 0.0]));
        let y = tape.softmax_lastdim(x, None).unwrap();
        assert!((tape.data(y)[0] - 0.5).abs() < 1e-12);
        assert!((tape.data(y)[1] - 0.5).abs() < 1e-12);

        let x = tape.leaf(&t64(vec![1, 2], vec![2.0f64.ln(), 0.0]));
        let y = tape.softmax_lastdim(x, None).unwrap();
        assert!((tape.data(y)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.data(y)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_row() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![1, 3], vec![1.0, 5.0, 3.0]));
        let y = tape.softmax_lastdim(x, Some(&[true, false, true])).unwrap();
        let yd = tape.data(y);
        assert!((yd[0] - 0.1192).abs() < 1e-4);
        assert_eq!(yd[1], 0.0);
        assert!((yd[2] - 0.8808).abs() < 1e-4);
        assert!((yd[0] + yd[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![1, 2], vec![1.0, 2.0]));
        let err = tape.softmax_lastdim(x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::InvalidMask(_)));
    }

    #[test]
    fn relu_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);

        let x = tape.leaf(&t64(vec![3], vec![0.5, 1.0, 7.25]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.5, 1.0, 7.25]);

        let x = tape.leaf(&t64(vec![2], vec![-0.5, 3.25]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 3.25]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let gamma = tape.leaf(&t64(vec![2], vec![1.0, 1.0]));
        let beta = tape.leaf(&t64(vec![2], vec![0.0, 0.0]));

        // Constant row -> zeros (up to eps effect).
        let x = tape.leaf(&t64(vec![1, 2], vec![3.0, 3.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        assert!(tape.data(y).iter().all(|v| v.abs() < 1e-3));

        // x=[1,3]: mean 2, population variance 1 -> [-1, 1] as eps -> 0.
        let x = tape.leaf(&t64(vec![1, 2], vec![1.0, 3.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((tape.data(y)[0] + 1.0).abs() < 1e-6);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-6);

        // Bias passthrough on a constant row.
        let beta5 = tape.leaf(&t64(vec![2], vec![5.0, 5.0]));
        let x = tape.leaf(&t64(vec![1, 2], vec![0.25, 0.25]));
        let y = tape.layer_norm(x, gamma, beta5, 1e-6).unwrap();
        assert!((tape.data(y)[0] - 5.0).abs() < 1e-3);
        assert!((tape.data(y)[1] - 5.0).abs() < 1e-3);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_quadratic_form_gives_x() {
        let mut tape: Tape<f64> = Tape::new();
        let xv = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(&t64(vec![4], xv.clone()).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let half = tape.scale(sq, 0.5);
        let loss = tape.sum(half);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &xv[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![2], vec![1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unreached_leaf_reads_zero_grad() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&t64(vec![2], vec![1.0, 2.0]).with_grad());
        let y = tape.leaf(&t64(vec![2], vec![3.0, 4.0]).with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad_or_zeros(y), vec![0.0, 0.0]);
    }

    #[test]
    fn gather_scatter_round_trip_is_bitwise() {
        let mut tape: Tape<f64> = Tape::new();
        let base = tape.leaf(&t64(vec![4, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]));
        let picked = tape.gather_rows(base, &[1, 3]).unwrap();
        assert_eq!(tape.data(picked), &[0.3, 0.4, 0.7, 0.8]);
        let back = tape.scatter_rows(base, picked, &[1, 3]).unwrap();
        assert_eq!(tape.data(back), tape.data(base));
    }

    #[test]
    fn scatter_rejects_duplicates_and_out_of_range() {
        let mut tape: Tape<f64> = Tape::new();
        let base = tape.leaf(&t64(vec![3, 1], vec![1.0, 2.0, 3.0]));
        let src = tape.leaf(&t64(vec![2, 1], vec![9.0, 8.0]));
        assert!(tape.scatter_rows(base, src, &[0, 0]).is_err());
        assert!(tape.scatter_rows(base, src, &[0, 5]).is_err());
        assert!(tape.gather_rows(base, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(&t64(vec![3], vec![3.0f64.ln(), 0.0, 0.0]).with_grad());
        let loss = tape.cross_entropy(logits, 0).unwrap();
        // p = [0.6, 0.2, 0.2]
        assert!((tape.scalar_value(loss) - (1.0f64 / 0.6).ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!((g[0] - (0.6 - 1.0)).abs() < 1e-12);
        assert!((g[1] - 0.2).abs() < 1e-12);
        assert!((g[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn dropout_identity_when_eval_or_zero_rate() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(&t64(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(x, z);
    }
}
