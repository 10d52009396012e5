//! Named parameter sets and the small set of layers the models are built from.
//!
//! Layers store indices into a [`ParamBundle`]; at the start of every forward
//! pass the bundle is attached to a fresh [`Graph`], yielding a [`Bound`] view
//! whose `Var`s the layers read by index.

use crate::error::{Error, Result};
use crate::tensor::{AttnSpec, Graph, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered, named parameters of one trainable component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBundle {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, frozen: false });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    /// Sets the freeze flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        self.params.iter_mut().filter(|p| p.name.starts_with(prefix)).for_each(|p| p.frozen = frozen);
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    /// Adds every parameter as a graph leaf; frozen ones do not require grad.
    pub fn attach(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.leaf(p.value.clone(), !p.frozen)).collect() }
    }

    /// Adds every parameter as a constant regardless of its freeze flag.
    pub fn attach_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect() }
    }

    /// Gradients for each parameter after `g.backward`; `None` for frozen ones.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|&v| g.grad(v)).collect()
    }

    /// Overwrites values by name from `other`. Every parameter of `self` must
    /// be present in `other` with the same shape.
    pub fn load_values(&mut self, other: &ParamBundle) -> Result<()> {
        for p in &mut self.params {
            let src = other.get(&p.name).ok_or_else(|| Error::Compatibility(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Compatibility(format!("parameter `{}` has shape {:?}, expected {:?}", p.name, src.value.shape(), p.value.shape())));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Content hash over names, shapes and exact value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Names of parameters whose values differ bitwise between two bundles.
    pub fn changed_params(&self, other: &ParamBundle) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| match other.get(&p.name) {
                Some(o) => !bit_equal(&o.value, &p.value),
                None => true,
            })
            .map(|p| p.name.clone())
            .collect()
    }

    /// Copies with every name prefixed by `prefix` (used to pack several
    /// components into one checkpoint).
    pub fn prefixed(&self, prefix: &str) -> ParamBundle {
        let mut out = ParamBundle::new();
        for p in &self.params {
            let i = out.add(format!("{prefix}{}", p.name), p.value.clone());
            out.params[i].frozen = p.frozen;
        }
        out
    }

    /// Parameters whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamBundle {
        let mut out = ParamBundle::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let i = out.add(&p.name[prefix.len()..], p.value.clone());
            out.params[i].frozen = p.frozen;
        }
        out
    }

    pub fn extend(&mut self, other: &ParamBundle) {
        for p in &other.params {
            let i = self.add(p.name.clone(), p.value.clone());
            self.params[i].frozen = p.frozen;
        }
    }

    pub fn set_frozen_index(&mut self, idx: usize, frozen: bool) {
        self.params[idx].frozen = frozen;
    }
}

pub(crate) fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A bundle's parameters as graph variables, addressed by parameter index.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the node used for parameter `idx`.
    pub fn replace(&mut self, idx: usize, var: Var) {
        self.vars[idx] = var;
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight entries drawn from `N(0, (gain/√in)²)`, bias zero.
    pub fn new<R: Rng + ?Sized>(pb: &mut ParamBundle, name: &str, in_dim: usize, out_dim: usize, bias: bool, gain: f64, rng: &mut R) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        let w = pb.add(format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let b = bias.then(|| pb.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> usize {
        self.w
    }

    pub fn bias(&self) -> Option<usize> {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBundle, name: &str, dim: usize) -> Self {
        let gamma = pb.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = pb.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(pb: &mut ParamBundle, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true, 1.0, rng),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, out, true, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(pb: &mut ParamBundle, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(pb, &format!("{name}.wq"), dim, dim, false, 1.0, rng),
            wk: Linear::new(pb, &format!("{name}.wk"), dim, dim, false, 1.0, rng),
            wv: Linear::new(pb, &format!("{name}.wv"), dim, dim, false, 1.0, rng),
            wo: Linear::new(pb, &format!("{name}.wo"), dim, dim, true, 1.0, rng),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `ctx` (pass `x` for self-attention).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: Var, groups: usize, causal: bool) -> Result<Var> {
        let q = self.wq.forward(g, p, x)?;
        let k = self.wk.forward(g, p, ctx)?;
        let v = self.wv.forward(g, p, ctx)?;
        let o = g.attention(q, k, v, AttnSpec::new(groups, self.heads).causal(causal))?;
        self.wo.forward(g, p, o)
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(pb: &mut ParamBundle, name: &str, dim: usize, heads: usize, mlp_hidden: usize, cross_attention: bool, rng: &mut R) -> Self {
        let ln1 = LayerNorm::new(pb, &format!("{name}.ln1"), dim);
        let attn = MultiHeadAttention::new(pb, &format!("{name}.attn"), dim, heads, rng);
        let cross = cross_attention
            .then(|| (LayerNorm::new(pb, &format!("{name}.ln_cross"), dim), MultiHeadAttention::new(pb, &format!("{name}.cross"), dim, heads, rng)));
        let ln2 = LayerNorm::new(pb, &format!("{name}.ln2"), dim);
        let mlp = Mlp::new(pb, &format!("{name}.mlp"), dim, mlp_hidden, dim, rng);
        Self { ln1, attn, cross, ln2, mlp }
    }

    /// `x` holds `groups` stacked sequences; `memory`, when present, holds the
    /// same number of stacked memory sequences for cross-attention.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, groups: usize, causal: bool, memory: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, groups, causal)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, cross)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, p, x)?;
            let c = cross.forward(g, p, h, mem, groups, false)?;
            x = g.add(x, c)?;
        }
        let h = self.ln2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(x, m)
    }
}

/// Sinusoidal features of scalar positions, `[positions.len(), dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data[r * dim + i] = (pos * freq).sin();
            data[r * dim + half + i] = (pos * freq).cos();
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("sized above")
}
