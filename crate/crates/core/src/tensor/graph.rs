use super::kernels::{gelu, gelu_grad, gemm, log_sum_exp, softmax_inplace};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Query rows are split into `groups` equal blocks and key/value rows likewise;
/// group `g` of the queries only attends to group `g` of the keys. This keeps
/// independent sequences (batch items) stacked in one matrix from mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub groups: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnSpec {
    pub fn new(groups: usize, heads: usize) -> Self {
        Self { groups, heads, causal: false }
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Forward intermediates reused by the backward pass (softmax
    /// probabilities, normalized activations).
    aux: Vec<f64>,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}")))
}

fn acc(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves without `requires_grad` never receive gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg, Vec::new())
    }

    /// `x[m×n] + b[n]`, the bias broadcast over every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(b).numel() != n {
            return shape_err("add_row", self.shape(x), self.shape(b));
        }
        let bias = self.data(b);
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n].iter_mut().zip(bias).for_each(|(d, b)| *d += b);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddRow(x, b), rg, Vec::new()))
    }

    fn check_2d(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul", a)?;
        let (k2, n) = self.check_2d("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, Vec::new()))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul_nt", a)?;
        let (n, k2) = self.check_2d("matmul_nt", b)?;
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg, Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_2d("transpose", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg, Vec::new()))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg, Vec::new())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg, Vec::new())
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax: axis {axis} invalid for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * len + j) * inner + i];
                }
                softmax_inplace(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *b;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg, Vec::new()))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.dims2(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; m * n];
        // aux: normalized activations followed by per-row inverse std
        let mut aux = vec![0.0; m * n + m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            aux[m * n + i] = inv;
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                aux[i * n + j] = xhat;
                out[i * n + j] = xhat * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, rg, aux))
    }

    /// Selects rows of a matrix by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::OutOfRange { index: bad, size: m });
        }
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows: empty index list".into()));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, rg, Vec::new()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let (_, n) = self.dims2(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != n {
                return shape_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg, Vec::new()))
    }

    /// Column means of a matrix, shape `[1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims2(x);
        let src = self.data(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            out.iter_mut().zip(&src[i * n..(i + 1) * n]).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1, n], out).unwrap(), Op::MeanRows(x), rg, Vec::new())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum::<f64>() / self.value(x).numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, Vec::new())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg, Vec::new()))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg, Vec::new()))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    ///
    /// `logits` is `[rows, vocab]` (or a single `[vocab]` vector) with one
    /// target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {m} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfRange { index: bad, size: v });
        }
        let src = self.data(logits);
        let mut probs = src.to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            loss += log_sum_exp(row) - row[t];
            softmax_inplace(&mut probs[i * v..(i + 1) * v]);
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss / m as f64), op, rg, probs))
    }

    /// Fused scaled dot-product attention with `spec.heads` heads.
    ///
    /// `q` is `[groups·nq, dk]`, `k` is `[groups·nk, dk]`, `v` is
    /// `[groups·nk, dv]`; the result is `[groups·nq, dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (rq, dk) = self.check_2d("attention", q)?;
        let (rk, dk2) = self.check_2d("attention", k)?;
        let (rv, dv) = self.check_2d("attention", v)?;
        let AttnSpec { groups, heads, causal } = spec;
        if dk != dk2 || rk != rv {
            return shape_err("attention", self.shape(q), self.shape(k));
        }
        if groups == 0 || heads == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(Error::Shape(format!("attention: {rq} query rows / {rk} key rows do not split into {groups} groups")));
        }
        if dk % heads != 0 || dv % heads != 0 {
            return Err(Error::Shape(format!("attention: widths {dk}/{dv} not divisible by {heads} heads")));
        }
        let (nq, nk) = (rq / groups, rk / groups);
        if causal && nq != nk {
            return Err(Error::Shape("attention: causal mask needs equal query/key lengths".into()));
        }
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rq * dv];
        let mut probs = vec![0.0; groups * heads * nq * nk];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..nq {
                    let qrow = &qd[(g * nq + i) * dk + h * hk..][..hk];
                    let p = &mut probs[((g * heads + h) * nq + i) * nk..][..nk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = if causal && j > i {
                            f64::NEG_INFINITY
                        } else {
                            let krow = &kd[(g * nk + j) * dk + h * hk..][..hk];
                            scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>()
                        };
                    }
                    softmax_inplace(p);
                    let orow = &mut out[(g * nq + i) * dv + h * hv..][..hv];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(g * nk + j) * dv + h * hv..][..hv];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let value = Tensor::new(vec![rq, dv], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, spec }, rg, probs))
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, laid
    /// out as `[groups, heads, nq, nk]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].aux),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node that requires grad and is reachable from `loss` receives
    /// ∂loss/∂node; previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    ///
    /// `None` for nodes that do not require grad; zeros for nodes that do but
    /// were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(&shape),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(&mut grads[v.0], g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(&mut grads[a.0], g.to_vec());
                }
                if wants(*b) {
                    acc(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    acc(&mut grads[a.0], g.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(&mut grads[b.0], g.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(&mut grads[a.0], g.iter().map(|x| x * c).collect());
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    acc(&mut grads[x.0], g.to_vec());
                }
                if wants(*b) {
                    let (m, n) = self.dims2(*x);
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        gb.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, v)| *o += v);
                    }
                    acc(&mut grads[b.0], gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut ga, false);
                    acc(&mut grads[a.0], ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut gb, false);
                    acc(&mut grads[b.0], gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*b);
                if wants(*a) {
                    // dA = G · B
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), false, &mut ga, false);
                    acc(&mut grads[a.0], ga);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, self.data(*a), false, &mut gb, false);
                    acc(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = self.dims2(*a);
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = g[c * m + r];
                        }
                    }
                    acc(&mut grads[a.0], ga);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let ga = g.iter().zip(self.data(*a)).map(|(g, &x)| g * gelu_grad(x)).collect();
                    acc(&mut grads[a.0], ga);
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    acc(&mut grads[a.0], g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if wants(*x) {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + c;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = self.dims2(*x);
                let xhat = &node.aux[..m * n];
                let inv = &node.aux[m * n..];
                let gam = self.data(*gamma);
                if wants(*gamma) {
                    let mut gg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    acc(&mut grads[gamma.0], gg);
                }
                if wants(*beta) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        gb.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, v)| *o += v);
                    }
                    acc(&mut grads[beta.0], gb);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|j| g[r * n + j] * gam[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = (0..n).map(|j| dxhat[j] * xhat[r * n + j]).sum();
                        for j in 0..n {
                            gx[r * n + j] = inv[r] / nf * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
            }
            Op::Gather { x, idx } => {
                if wants(*x) {
                    let (m, n) = self.dims2(*x);
                    let mut gx = vec![0.0; m * n];
                    for (r, &src) in idx.iter().enumerate() {
                        gx[src * n..(src + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, v)| *o += v);
                    }
                    acc(&mut grads[x.0], gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if wants(p) {
                        acc(&mut grads[p.0], g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::MeanRows(x) => {
                if wants(*x) {
                    let (m, n) = self.dims2(*x);
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            gx[r * n + j] = g[j] / m as f64;
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(&mut grads[x.0], vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = self.value(*x).numel();
                    acc(&mut grads[x.0], vec![g[0] / n as f64; n]);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc(&mut grads[x.0], g.to_vec());
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let diff: Vec<f64> = self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                if wants(*b) {
                    acc(&mut grads[b.0], diff.iter().map(|d| -d).collect());
                }
                if wants(*a) {
                    acc(&mut grads[a.0], diff);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(*logits) {
                    let (m, v) = self.dims2(*logits);
                    let scale = g[0] / m as f64;
                    let mut gl: Vec<f64> = node.aux.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * v + t] -= scale;
                    }
                    acc(&mut grads[logits.0], gl);
                }
            }
            Op::Attention { q, k, v, spec } => self.backprop_attention(node, *q, *k, *v, *spec, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(&self, node: &Node, q: Var, k: Var, v: Var, spec: AttnSpec, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rq, dk) = self.dims2(q);
        let (rk, dv) = self.dims2(v);
        let AttnSpec { groups, heads, .. } = spec;
        let (nq, nk) = (rq / groups, rk / groups);
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let probs = &node.aux;
        let mut gq = vec![0.0; rq * dk];
        let mut gk = vec![0.0; rk * dk];
        let mut gv = vec![0.0; rk * dv];
        let mut dp = vec![0.0; nk];
        for gi in 0..groups {
            for h in 0..heads {
                for i in 0..nq {
                    let p = &probs[((gi * heads + h) * nq + i) * nk..][..nk];
                    let grow = &g[(gi * nq + i) * dv + h * hv..][..hv];
                    for j in 0..nk {
                        let vrow_at = (gi * nk + j) * dv + h * hv;
                        let vrow = &vd[vrow_at..vrow_at + hv];
                        dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        if p[j] != 0.0 {
                            gv[vrow_at..vrow_at + hv].iter_mut().zip(grow).for_each(|(o, x)| *o += p[j] * x);
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qat = (gi * nq + i) * dk + h * hk;
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kat = (gi * nk + j) * dk + h * hk;
                        for d in 0..hk {
                            gq[qat + d] += ds * kd[kat + d];
                            gk[kat + d] += ds * qd[qat + d];
                        }
                    }
                }
            }
        }
        if self.nodes[q.0].requires_grad {
            acc(&mut grads[q.0], gq);
        }
        if self.nodes[k.0].requires_grad {
            acc(&mut grads[k.0], gk);
        }
        if self.nodes[v.0].requires_grad {
            acc(&mut grads[v.0], gv);
        }
    }
}
