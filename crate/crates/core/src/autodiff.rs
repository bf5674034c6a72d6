//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept
//! on the tape so the backward sweep can reuse them; [`Tape::backward`]
//! walks the record in reverse and returns a [`Gradients`] map for every
//! node that was created with `requires_grad`.
//!
//! The op set is deliberately small: matrices are two-dimensional
//! (`rows × cols`), scalars have shape `[]`, and the only broadcast is a
//! row bias in [`Tape::add_row`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    LogSigmoid(Var),
    LeakyRelu(Var, T),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows { src: Var, index: Vec<usize> },
    CausalConv { input: Var, filter: Var, batch: usize },
    Sum(Var),
    Mean(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<T: Real>(x: T) -> T {
    let thirty = T::lit(30.0);
    if x > thirty {
        x + (-x).exp().ln_1p()
    } else if x < -thirty {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function with a branch that never exponentiates a large positive.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)`, finite for every finite `x`.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    -softplus(-x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "add_row")?;
        if self.value(bias).len() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::AddRow(a, bias), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(a);
        let out: Vec<T> = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), out).expect("same length");
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.map(
            a,
            |x| if x > T::zero() { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { src: a, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![len, cols], out)?,
            Op::SliceRows { src: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, cols) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row lookup; duplicate indices are allowed and their gradients add up.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "gather_rows")?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::shape("gather_rows", self.shape(a), &[i]));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], out)?,
            Op::GatherRows {
                src: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Causal convolution along time of a time-major `[steps*batch × d]`
    /// matrix (row `t*batch + i` is user `i` at step `t`).
    ///
    /// The `m`-tap filter is shared by every feature column and sees
    /// `m - 1` zero rows prepended to each sequence, so
    /// `out[t] = Σ_j filter[j] · h[t + j - (m - 1)]` and no output reads a
    /// later step.
    pub fn causal_conv(&mut self, input: Var, filter: Var, batch: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(input, "causal_conv")?;
        let m = self.value(filter).len();
        if m == 0 {
            return Err(Error::InvalidArgument("conv filter height must be >= 1".into()));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape("causal_conv", self.shape(input), &[batch]));
        }
        let steps = rows / batch;
        let h = self.value(input).data();
        let f = self.value(filter).data();
        let mut out = vec![T::zero(); rows * cols];
        for t in 0..steps {
            for (j, &fj) in f.iter().enumerate() {
                let lag = m - 1 - j;
                if lag > t {
                    continue;
                }
                let s = t - lag;
                let dst = &mut out[t * batch * cols..(t + 1) * batch * cols];
                let src = &h[s * batch * cols..(s + 1) * batch * cols];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += fj * x;
                }
            }
        }
        let rg = self.any_grad(&[input, filter]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::CausalConv {
                input,
                filter,
                batch,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s / T::lit(n as f64)), Op::Mean(a), rg))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`
    /// over the rows whose mask is set. `logits` is `[rows × V]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (rows, v) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::InvalidArgument(format!(
                    "target {} out of range for {} classes",
                    targets[r], v
                )));
            }
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (pi, &xi) in p.iter_mut().zip(row) {
                *pi = (xi - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / z;
            }
            total += z.ln() + max - row[targets[r]];
        }
        let loss = total / T::lit(count as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if !shape.is_empty() && self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut leaves: Vec<Option<Vec<T>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(g);
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += G · Bᵀ
                    gemm(false, true, m, n, k, g, self.value(*b).data(), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += Aᵀ · G
                    gemm(true, false, k, m, n, self.value(*a).data(), g, gb, true);
                }
            }
            Op::AddRow(a, bias) => {
                let cols = self.shape(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * av;
                    }
                }
            }
            Op::Affine(a, scale) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &gy) in ga.iter_mut().zip(g) {
                        *x += *scale * gy;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gy * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gy * (T::one() - y * y);
                    }
                }
            }
            Op::Softplus(a) => {
                let input = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &xi) in ga.iter_mut().zip(g).zip(input) {
                        *x += gy * sigmoid(xi);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let input = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &xi) in ga.iter_mut().zip(g).zip(input) {
                        *x += gy * sigmoid(-xi);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let input = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &xi) in ga.iter_mut().zip(g).zip(input) {
                        *x += if xi > T::zero() { gy } else { *slope * gy };
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let cols = self.shape(*src)[1];
                let len = out.shape()[1];
                if let Some(gs) = self.slot(grads, *src) {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut gs[r * cols + start..r * cols + start + len], row);
                    }
                }
            }
            Op::SliceRows { src, start } => {
                let cols = self.shape(*src)[1];
                if let Some(gs) = self.slot(grads, *src) {
                    add_into(&mut gs[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, row) in g.chunks(ca + cb).enumerate() {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &row[..ca]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (r, row) in g.chunks(ca + cb).enumerate() {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &row[ca..]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { src, index } => {
                let cols = self.shape(*src)[1];
                if let Some(gs) = self.slot(grads, *src) {
                    for (row, &i) in g.chunks(cols).zip(index) {
                        add_into(&mut gs[i * cols..(i + 1) * cols], row);
                    }
                }
            }
            Op::CausalConv {
                input,
                filter,
                batch,
            } => {
                let rows = self.shape(*input)[0];
                let cols = self.shape(*input)[1];
                let block = batch * cols;
                let steps = rows / batch;
                let f = self.value(*filter).data().to_vec();
                let m = f.len();
                let h = self.value(*input).data();
                if let Some(gf) = self.slot(grads, *filter) {
                    for (j, gfj) in gf.iter_mut().enumerate() {
                        let lag = m - 1 - j;
                        let mut acc = T::zero();
                        for t in lag..steps {
                            let s = t - lag;
                            acc += g[t * block..(t + 1) * block]
                                .iter()
                                .zip(&h[s * block..(s + 1) * block])
                                .map(|(&a, &b)| a * b)
                                .sum::<T>();
                        }
                        *gfj += acc;
                    }
                }
                if let Some(gh) = self.slot(grads, *input) {
                    for t in 0..steps {
                        for (j, &fj) in f.iter().enumerate() {
                            let lag = m - 1 - j;
                            if lag > t {
                                continue;
                            }
                            let s = t - lag;
                            let src = &g[t * block..(t + 1) * block];
                            for (x, &gy) in gh[s * block..(s + 1) * block].iter_mut().zip(src) {
                                *x += fj * gy;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::lit(*count as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (x, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *x += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not take gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of every trainable leaf reached by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right length if the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }
}

/// Parameters of one GRU layer as tape variables.
///
/// Gate blocks are laid out `[update | reset | candidate]` along columns:
/// `w_x` is `e × 3d`, `bias` is `3d`, `u_zr` is `d × 2d` and `u_h` is `d × d`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_x: Var,
    pub bias: Var,
    pub u_zr: Var,
    pub u_h: Var,
}

/// One GRU step from raw input `x_t` (`b × e`).
pub fn gru_cell<T: Real>(tape: &mut Tape<T>, w: &GruVars, x_t: Var, h_prev: Var) -> Result<Var> {
    let xw = tape.matmul(x_t, w.w_x)?;
    let projected = tape.add_row(xw, w.bias)?;
    gru_step(tape, w, projected, h_prev)
}

/// One GRU step given the input projection `x_t · w_x + bias` (`b × 3d`).
///
/// ```text
/// z  = σ(Wz x + Uz h + bz)
/// r  = σ(Wr x + Ur h + br)
/// ĥ  = tanh(Wh x + Uh (r ⊙ h) + bh)
/// h' = (1 - z) ⊙ h + z ⊙ ĥ
/// ```
pub fn gru_step<T: Real>(
    tape: &mut Tape<T>,
    w: &GruVars,
    projected: Var,
    h_prev: Var,
) -> Result<Var> {
    let d = tape.shape(h_prev)[1];
    if tape.shape(projected)[1] != 3 * d {
        return Err(Error::shape("gru_step", tape.shape(projected), tape.shape(h_prev)));
    }
    let hu = tape.matmul(h_prev, w.u_zr)?;
    let xz = tape.slice_cols(projected, 0, d)?;
    let xr = tape.slice_cols(projected, d, d)?;
    let xh = tape.slice_cols(projected, 2 * d, d)?;
    let hz = tape.slice_cols(hu, 0, d)?;
    let hr = tape.slice_cols(hu, d, d)?;
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let rhu = tape.matmul(rh, w.u_h)?;
    let cand_pre = tape.add(xh, rhu)?;
    let cand = tape.tanh(cand_pre);
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let dot = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softplus_and_sigmoid_values() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0f64) - 100.0).abs() < 1e-12);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert!(log_sigmoid(-1000.0f64).is_finite());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[3.0, -1.0]));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[3.0, -1.0]));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        let q = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(q).is_none());
        assert_eq!(g.get_or_zeros(&tape, q), vec![0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn causal_conv_identity_and_delay() {
        let rows = [1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let h = tape.constant(t(&[3, 1], &rows));
        for (filter, expected) in [
            (vec![1.0], vec![1.0, 2.0, 3.0]),
            (vec![0.0, 1.0], vec![1.0, 2.0, 3.0]),
            (vec![1.0, 0.0], vec![0.0, 1.0, 2.0]),
        ] {
            let f = tape.constant(t(&[filter.len(), 1], &filter));
            let c = tape.causal_conv(h, f, 1).unwrap();
            assert_eq!(tape.value(c).data(), expected.as_slice());
        }
        // m > T pads further; the result is still defined
        let f = tape.constant(t(&[5, 1], &[1.0, 1.0, 1.0, 1.0, 1.0]));
        let c = tape.causal_conv(h, f, 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn causal_conv_rejects_empty_filter() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::zeros(&[3, 1]));
        let f = tape.constant(Tensor::zeros(&[0, 1]));
        assert!(tape.causal_conv(h, f, 1).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape
            .softmax_cross_entropy(logits, &[1, 3], &[true, true])
            .unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut x = vec![0.0; 4];
        x[2] = 1000.0;
        let logits = tape.constant(t(&[1, 4], &x));
        let l = tape.softmax_cross_entropy(logits, &[2], &[true]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0], &[false]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn gru_zero_weights_fixed_point() {
        let mut tape = Tape::new();
        let w = GruVars {
            w_x: tape.param(Tensor::zeros(&[3, 12])),
            bias: tape.param(Tensor::zeros(&[12])),
            u_zr: tape.param(Tensor::zeros(&[4, 8])),
            u_h: tape.param(Tensor::zeros(&[4, 4])),
        };
        let x = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 0.1, 0.2, 0.3]));
        let h0 = tape.constant(Tensor::zeros(&[2, 4]));
        let h1 = gru_cell(&mut tape, &w, x, h0).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    }
}
