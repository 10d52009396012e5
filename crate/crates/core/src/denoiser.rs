//! Joint image/text-latent noise predictor over one concatenated token
//! sequence, with the joint and bidirectional fine-tuning losses.

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Block, Bound, LayerNorm, Linear, Mlp, ParamBundle};
use crate::optim::AdamW;
use crate::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::RangeInclusive;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch: usize,
    pub text_rows: usize,
    pub text_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Largest accepted timestep T.
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn toy(steps: usize) -> Self {
        Self { image_size: 16, patch: 4, text_rows: 4, text_dim: 32, width: 64, depth: 4, heads: 4, mlp_hidden: 128, steps }
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// Tokens per sample: two timestep tokens, image patches, text rows.
    pub fn tokens(&self) -> usize {
        2 + self.patches() + self.text_rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config("image size must be a multiple of the patch size".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config("denoiser width must be divisible by heads".into()));
        }
        Ok(())
    }
}

/// `[B, H, W]` images to `[B·P, patch²]` patch rows, patches in raster order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w) = image_dims(images)?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(images.numel());
    let d = images.data();
    for s in 0..b {
        for pi in 0..ph {
            for pj in 0..pw {
                for i in 0..patch {
                    let row = s * h * w + (pi * patch + i) * w + pj * patch;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![b * ph * pw, patch * patch], out)
}

/// Inverse of [`patchify`] for square `size × size` images.
pub fn unpatchify(rows: &Tensor, size: usize, patch: usize) -> Result<Tensor> {
    let per = (size / patch).pow(2);
    let (n, pd) = rows.dims2();
    if pd != patch * patch || n % per != 0 {
        return Err(Error::Shape(format!("cannot unpatchify {:?} into {size}x{size} images", rows.shape())));
    }
    let b = n / per;
    let pw = size / patch;
    let mut out = vec![0.0; b * size * size];
    for s in 0..b {
        for k in 0..per {
            let (pi, pj) = (k / pw, k % pw);
            let src = rows.row(s * per + k);
            for i in 0..patch {
                let dst = s * size * size + (pi * patch + i) * size + pj * patch;
                out[dst..dst + patch].copy_from_slice(&src[i * patch..(i + 1) * patch]);
            }
        }
    }
    Tensor::new(vec![b, size, size], out)
}

fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [b, h, w] => Ok((*b, *h, *w)),
        s => Err(Error::Shape(format!("expected [batch, height, width], got {s:?}"))),
    }
}

/// Clean pairs, injected noises, per-sample timesteps and the corrupted pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyBatch {
    pub x0: Tensor,
    pub y0: Tensor,
    pub eps_x: Tensor,
    pub eps_y: Tensor,
    pub tx: Vec<usize>,
    pub ty: Vec<usize>,
    pub xt: Tensor,
    pub yt: Tensor,
}

impl NoisyBatch {
    /// `x0` is `[B, H, W]`, `y0` is `[B, rows, dim]`.
    pub fn new(x0: Tensor, y0: Tensor, eps_x: Tensor, eps_y: Tensor, tx: Vec<usize>, ty: Vec<usize>, sched: &NoiseSchedule) -> Result<Self> {
        let b = x0.shape().first().copied().unwrap_or(0);
        if y0.shape().first() != Some(&b) || tx.len() != b || ty.len() != b || x0.shape().len() != 3 || y0.shape().len() != 3 {
            return Err(Error::Shape("noisy batch parts disagree on batch size".into()));
        }
        let xt = per_sample_q(&x0, &eps_x, &tx, sched)?;
        let yt = per_sample_q(&y0, &eps_y, &ty, sched)?;
        Ok(Self { x0, y0, eps_x, eps_y, tx, ty, xt, yt })
    }

    /// Fresh standard normal noises and timesteps drawn uniformly from `range`.
    pub fn sample<R: Rng + ?Sized>(x0: Tensor, y0: Tensor, sched: &NoiseSchedule, range: RangeInclusive<usize>, rng: &mut R) -> Result<Self> {
        let b = x0.shape()[0];
        let tx = (0..b).map(|_| rng.random_range(range.clone())).collect();
        let ty = (0..b).map(|_| rng.random_range(range.clone())).collect();
        let eps_x = Tensor::randn(x0.shape(), 1.0, rng);
        let eps_y = Tensor::randn(y0.shape(), 1.0, rng);
        Self::new(x0, y0, eps_x, eps_y, tx, ty, sched)
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }
}

fn per_sample_q(x0: &Tensor, eps: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("noise {:?} does not match data {:?}", eps.shape(), x0.shape())));
    }
    let per = x0.numel() / t.len();
    let inner = &x0.shape()[1..];
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let slice = |x: &Tensor| Tensor::new(inner.to_vec(), x.data()[i * per..(i + 1) * per].to_vec());
        out.extend(q_sample(&slice(x0)?, ti, &slice(eps)?, sched)?.into_data());
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Stacks `[B, …]` tensors along the batch axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Empty("stack".into()))?;
    let inner = first.shape().to_vec();
    let mut data = Vec::new();
    for p in parts {
        if p.shape() != inner.as_slice() {
            return Err(Error::Shape(format!("cannot stack {:?} with {inner:?}", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend(inner);
    Tensor::new(shape, data)
}

/// Sample `i` of a `[B, …]` tensor.
pub fn unstack(t: &Tensor, i: usize) -> Tensor {
    let per = t.numel() / t.shape()[0];
    Tensor::new(t.shape()[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).expect("slice of valid tensor")
}

#[derive(Clone, Debug)]
pub struct JointDenoiser {
    pub config: DenoiserConfig,
    pub params: ParamBundle,
    img_in: Linear,
    txt_in: Linear,
    tx_mlp: Mlp,
    ty_mlp: Mlp,
    pos: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    img_out: Linear,
    txt_out: Linear,
    alpha_bar: Vec<f64>,
}

impl JointDenoiser {
    /// The network body predicts `v = √ᾱ·ε − √(1−ᾱ)·x₀`; the returned noise
    /// estimate is `√(1−ᾱ)·x_t + √ᾱ·v̂`, so `sched` must match the one used
    /// for training and sampling.
    pub fn new(config: DenoiserConfig, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        if sched.steps() != config.steps {
            return Err(Error::Config(format!("schedule has {} steps, denoiser expects {}", sched.steps(), config.steps)));
        }
        let alpha_bar = (0..=config.steps).map(|t| sched.alpha_bar(t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBundle::new();
        let w = config.width;
        let img_in = Linear::new(&mut pb, "den.img_in", config.patch_dim(), w, true, 1.0, &mut rng);
        let txt_in = Linear::new(&mut pb, "den.txt_in", config.text_dim, w, true, 1.0, &mut rng);
        let tx_mlp = Mlp::new(&mut pb, "den.tx", w, w, w, &mut rng);
        let ty_mlp = Mlp::new(&mut pb, "den.ty", w, w, w, &mut rng);
        let pos = pb.add("den.pos", Tensor::randn(&[config.tokens(), w], 0.5, &mut rng));
        let blocks = (0..config.depth).map(|i| Block::new(&mut pb, &format!("den.block{i}"), w, config.heads, config.mlp_hidden, false, &mut rng)).collect();
        let ln_f = LayerNorm::new(&mut pb, "den.ln_f", w);
        let img_out = Linear::new(&mut pb, "den.img_out", w, config.patch_dim(), true, 0.1, &mut rng);
        let txt_out = Linear::new(&mut pb, "den.txt_out", w, config.text_dim, true, 0.1, &mut rng);
        Ok(Self { config, params: pb, img_in, txt_in, tx_mlp, ty_mlp, pos, blocks, ln_f, img_out, txt_out, alpha_bar })
    }

    fn check_t(&self, ts: &[usize]) -> Result<()> {
        match ts.iter().find(|&&t| t > self.config.steps) {
            Some(&t) => Err(Error::OutOfRange { index: t, size: self.config.steps + 1 }),
            None => Ok(()),
        }
    }

    /// Noise predictions for patch rows `xt` (`[B·P, patch²]`) and text rows
    /// `yt` (`[B·rows, dim]`) at per-sample timesteps. Samples never attend
    /// to each other.
    pub fn forward(&self, g: &mut Graph, p: &Bound, xt: Var, yt: Var, tx: &[usize], ty: &[usize]) -> Result<(Var, Var)> {
        let c = &self.config;
        let b = tx.len();
        if b == 0 || ty.len() != b {
            return Err(Error::Shape("timestep lists must be nonempty and of equal length".into()));
        }
        self.check_t(tx)?;
        self.check_t(ty)?;
        let (np, nt) = (c.patches(), c.text_rows);
        if g.shape(xt) != [b * np, c.patch_dim()] || g.shape(yt) != [b * nt, c.text_dim] {
            return Err(Error::Shape(format!("denoiser inputs {:?} and {:?} do not match batch {b}", g.shape(xt), g.shape(yt))));
        }
        let img = self.img_in.forward(g, p, xt)?;
        let txt = self.txt_in.forward(g, p, yt)?;
        let time = |ts: &[usize]| sinusoidal(&ts.iter().map(|&t| t as f64).collect::<Vec<_>>(), c.width);
        let tfx = g.constant(time(tx));
        let tfy = g.constant(time(ty));
        let tokx = self.tx_mlp.forward(g, p, tfx)?;
        let toky = self.ty_mlp.forward(g, p, tfy)?;
        let all = g.concat_rows(&[tokx, toky, img, txt])?;
        let n = c.tokens();
        let mut order = Vec::with_capacity(b * n);
        for s in 0..b {
            order.push(s);
            order.push(b + s);
            order.extend((0..np).map(|k| 2 * b + s * np + k));
            order.extend((0..nt).map(|k| 2 * b + b * np + s * nt + k));
        }
        let seq = g.gather_rows(all, &order)?;
        let pos_idx: Vec<usize> = (0..b * n).map(|i| i % n).collect();
        let pe = g.gather_rows(p.var(self.pos), &pos_idx)?;
        let mut h = g.add(seq, pe)?;
        for blk in &self.blocks {
            h = blk.forward(g, p, h, b, false, None)?;
        }
        h = self.ln_f.forward(g, p, h)?;
        let img_rows: Vec<usize> = (0..b).flat_map(|s| (0..np).map(move |k| s * n + 2 + k)).collect();
        let txt_rows: Vec<usize> = (0..b).flat_map(|s| (0..nt).map(move |k| s * n + 2 + np + k)).collect();
        let hi = g.gather_rows(h, &img_rows)?;
        let ht = g.gather_rows(h, &txt_rows)?;
        let vx = self.img_out.forward(g, p, hi)?;
        let vy = self.txt_out.forward(g, p, ht)?;
        Ok((self.to_eps(g, xt, vx, tx, np)?, self.to_eps(g, yt, vy, ty, nt)?))
    }

    fn to_eps(&self, g: &mut Graph, input: Var, v: Var, ts: &[usize], rows: usize) -> Result<Var> {
        let cols = g.shape(input)[1];
        let coef = |f: &dyn Fn(f64) -> f64| {
            let data = ts.iter().flat_map(|&t| std::iter::repeat_n(f(self.alpha_bar[t]), rows * cols)).collect();
            Tensor::new(vec![ts.len() * rows, cols], data)
        };
        let skip = g.constant(coef(&|ab| (1.0 - ab).sqrt())?);
        let out = g.constant(coef(&|ab| ab.sqrt())?);
        let a = g.mul(skip, input)?;
        let b = g.mul(out, v)?;
        g.add(a, b)
    }

    /// Graph inputs for `[B, H, W]` images and `[B, rows, dim]` latents.
    pub fn inputs(&self, g: &mut Graph, x: &Tensor, y: &Tensor) -> Result<(Var, Var)> {
        let b = y.shape().first().copied().unwrap_or(0);
        let xp = patchify(x, self.config.patch)?;
        let yr = y.clone().reshape(&[b * self.config.text_rows, self.config.text_dim])?;
        Ok((g.constant(xp), g.constant(yr)))
    }

    /// Inference on plain tensors: `([B, H, W], [B, rows, dim])` predictions.
    /// Large batches are processed in chunks.
    pub fn predict(&self, x: &Tensor, y: &Tensor, tx: &[usize], ty: &[usize]) -> Result<(Tensor, Tensor)> {
        const CHUNK: usize = 64;
        let b = tx.len();
        let (_, h, w) = image_dims(x)?;
        if x.shape()[0] != b || y.shape().first() != Some(&b) || h != self.config.image_size || w != h {
            return Err(Error::Shape(format!("predict inputs {:?} and {:?} for batch {b}", x.shape(), y.shape())));
        }
        let mut ex = Vec::with_capacity(x.numel());
        let mut ey = Vec::with_capacity(y.numel());
        let (px, py) = (x.numel() / b, y.numel() / b);
        for start in (0..b).step_by(CHUNK) {
            let end = (start + CHUNK).min(b);
            let n = end - start;
            let xs = Tensor::new(vec![n, h, w], x.data()[start * px..end * px].to_vec())?;
            let ys = Tensor::new(vec![n, self.config.text_rows, self.config.text_dim], y.data()[start * py..end * py].to_vec())?;
            let mut g = Graph::new();
            let p = self.params.attach_frozen(&mut g);
            let (xv, yv) = self.inputs(&mut g, &xs, &ys)?;
            let (ox, oy) = self.forward(&mut g, &p, xv, yv, &tx[start..end], &ty[start..end])?;
            ex.extend(unpatchify(g.value(ox), h, self.config.patch)?.into_data());
            ey.extend_from_slice(g.value(oy).data());
        }
        Ok((Tensor::new(x.shape().to_vec(), ex)?, Tensor::new(y.shape().to_vec(), ey)?))
    }

    /// Image noise prediction at `t` given a text condition at `t_cond`.
    pub fn eps_image(&self, xt: &Tensor, t: usize, y: &Tensor, t_cond: usize) -> Result<Tensor> {
        let b = xt.shape()[0];
        Ok(self.predict(xt, y, &vec![t; b], &vec![t_cond; b])?.0)
    }

    /// Text-latent noise prediction at `t` given an image condition at `t_cond`.
    pub fn eps_text(&self, yt: &Tensor, t: usize, x: &Tensor, t_cond: usize) -> Result<Tensor> {
        let b = yt.shape()[0];
        Ok(self.predict(x, yt, &vec![t_cond; b], &vec![t; b])?.1)
    }
}

/// `Σ(a−b)²` as a scalar node.
fn sq_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Joint objective: squared error over both noise residuals, averaged over
/// all predicted elements.
pub fn loss_unidiffuser(model: &JointDenoiser, g: &mut Graph, p: &Bound, batch: &NoisyBatch) -> Result<Var> {
    let (xt, yt) = model.inputs(g, &batch.xt, &batch.yt)?;
    let (ex, ey) = model.forward(g, p, xt, yt, &batch.tx, &batch.ty)?;
    let (tex, tey) = model.inputs(g, &batch.eps_x, &batch.eps_y)?;
    let sx = sq_sum(g, ex, tex)?;
    let sy = sq_sum(g, ey, tey)?;
    let total = g.add(sx, sy)?;
    Ok(g.scale(total, 1.0 / (batch.eps_x.numel() + batch.eps_y.numel()) as f64))
}

/// The two terms of the bidirectional loss, each conditioned on the clean
/// other modality (condition timestep 0): `(text→image MSE, image→text MSE)`.
pub fn bidiffuser_terms(model: &JointDenoiser, g: &mut Graph, p: &Bound, batch: &NoisyBatch) -> Result<(Var, Var)> {
    let b = batch.len();
    let x_in = stack_batches(&batch.xt, &batch.x0)?;
    let y_in = stack_batches(&batch.y0, &batch.yt)?;
    let mut tx = batch.tx.clone();
    tx.extend(std::iter::repeat_n(0, b));
    let mut ty = vec![0; b];
    ty.extend_from_slice(&batch.ty);
    let (xv, yv) = model.inputs(g, &x_in, &y_in)?;
    let (ex, ey) = model.forward(g, p, xv, yv, &tx, &ty)?;
    let c = &model.config;
    let ex = g.slice_rows(ex, 0, b * c.patches())?;
    let ey = g.slice_rows(ey, b * c.text_rows, b * c.text_rows)?;
    let (tex, tey) = model.inputs(g, &batch.eps_x, &batch.eps_y)?;
    Ok((g.mse(ex, tex)?, g.mse(ey, tey)?))
}

/// `L_t2i + α·L_i2t` with both conditions clean.
pub fn loss_bidiffuser(model: &JointDenoiser, g: &mut Graph, p: &Bound, batch: &NoisyBatch, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let (lx, ly) = bidiffuser_terms(model, g, p, batch)?;
    let wy = g.scale(ly, alpha);
    g.add(lx, wy)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    Ok(())
}

fn stack_batches(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Shape(format!("cannot stack {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// Which objective a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Joint,
    Bidirectional { alpha: f64 },
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(model: &mut JointDenoiser, batch: &NoisyBatch, objective: Objective, opt: &mut AdamW) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.attach(&mut g);
    let loss = match objective {
        Objective::Joint => loss_unidiffuser(model, &mut g, &p, batch)?,
        Objective::Bidirectional { alpha } => loss_bidiffuser(model, &mut g, &p, batch, alpha)?,
    };
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite denoiser loss {value}")));
    }
    if model.params.all_frozen() {
        return Ok(value);
    }
    g.backward(loss)?;
    let grads = model.params.grads(&g, &p);
    opt.step(&mut model.params, &grads);
    Ok(value)
}

/// Bidirectional fine-tuning step.
pub fn finetune_step(model: &mut JointDenoiser, batch: &NoisyBatch, alpha: f64, opt: &mut AdamW) -> Result<f64> {
    train_step(model, batch, Objective::Bidirectional { alpha }, opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;
    use crate::tensor::gradcheck::{check, DEFAULT_STEP};

    fn tiny() -> JointDenoiser {
        let cfg = DenoiserConfig { image_size: 4, patch: 2, text_rows: 2, text_dim: 3, width: 8, depth: 1, heads: 2, mlp_hidden: 8, steps: 10 };
        JointDenoiser::new(cfg, &sched(), 1).unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(10, 1e-2, 0.3).unwrap()
    }

    fn batch(m: &JointDenoiser, b: usize, seed: u64, range: RangeInclusive<usize>) -> NoisyBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &m.config;
        let x0 = Tensor::randn(&[b, c.image_size, c.image_size], 1.0, &mut rng);
        let y0 = Tensor::randn(&[b, c.text_rows, c.text_dim], 1.0, &mut rng);
        NoisyBatch::sample(x0, y0, &sched(), range, &mut rng).unwrap()
    }

    #[test]
    fn patchify_roundtrip() {
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(unpatchify(&p, 4, 2).unwrap(), x);
    }

    #[test]
    fn noisy_batch_matches_q_sample() {
        let m = tiny();
        let nb = batch(&m, 3, 0, 0..=10);
        for i in 0..3 {
            let want = q_sample(&unstack(&nb.x0, i), nb.tx[i], &unstack(&nb.eps_x, i), &sched()).unwrap();
            assert_eq!(unstack(&nb.xt, i), want);
        }
    }

    #[test]
    fn shapes_and_batch_independence() {
        let m = tiny();
        let nb = batch(&m, 3, 1, 0..=10);
        let (ex, ey) = m.predict(&nb.xt, &nb.yt, &nb.tx, &nb.ty).unwrap();
        assert_eq!(ex.shape(), nb.xt.shape());
        assert_eq!(ey.shape(), nb.yt.shape());
        let perm = [2, 0, 1];
        let px = stack(&perm.iter().map(|&i| unstack(&nb.xt, i)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
        let py = stack(&perm.iter().map(|&i| unstack(&nb.yt, i)).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
        let tx: Vec<usize> = perm.iter().map(|&i| nb.tx[i]).collect();
        let ty: Vec<usize> = perm.iter().map(|&i| nb.ty[i]).collect();
        let (qx, qy) = m.predict(&px, &py, &tx, &ty).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            let (a, b) = (unstack(&qx, k), unstack(&ex, i));
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| (u - v).abs() < 1e-12));
            let (a, b) = (unstack(&qy, k), unstack(&ey, i));
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn timestep_changes_output_and_is_validated() {
        let m = tiny();
        let nb = batch(&m, 1, 2, 0..=10);
        let a = m.predict(&nb.xt, &nb.yt, &[1], &[0]).unwrap().0;
        let b = m.predict(&nb.xt, &nb.yt, &[10], &[0]).unwrap().0;
        assert_ne!(a, b);
        assert!(matches!(m.predict(&nb.xt, &nb.yt, &[11], &[0]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn zero_output_losses() {
        let mut m = tiny();
        for name in ["den.img_out.weight", "den.img_out.bias", "den.txt_out.weight", "den.txt_out.bias"] {
            let i = m.params.params().iter().position(|p| p.name == name).unwrap();
            m.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let nb = batch(&m, 2, 3, 0..=10);
        // With a zero body the noise estimate is the skip path √(1−ᾱ)·x_t.
        let resid = |xt: &Tensor, eps: &Tensor, ts: &[usize]| -> f64 {
            (0..ts.len())
                .map(|i| {
                    let k = (1.0 - sched().alpha_bar(ts[i])).sqrt();
                    unstack(xt, i).data().iter().zip(unstack(eps, i).data()).map(|(x, e)| (k * x - e).powi(2)).sum::<f64>()
                })
                .sum()
        };
        let mut g = Graph::new();
        let p = m.params.attach(&mut g);
        let l = loss_unidiffuser(&m, &mut g, &p, &nb).unwrap();
        let want = (resid(&nb.xt, &nb.eps_x, &nb.tx) + resid(&nb.yt, &nb.eps_y, &nb.ty)) / (nb.eps_x.numel() + nb.eps_y.numel()) as f64;
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
        let l = loss_bidiffuser(&m, &mut g, &p, &nb, 0.5).unwrap();
        let want = resid(&nb.xt, &nb.eps_x, &nb.tx) / nb.eps_x.numel() as f64 + 0.5 * resid(&nb.yt, &nb.eps_y, &nb.ty) / nb.eps_y.numel() as f64;
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bidiffuser_conditions_are_clean() {
        // The second half of the stacked batch must see clean images at t=0.
        let m = tiny();
        let nb = batch(&m, 2, 4, 1..=10);
        let mut g = Graph::new();
        let p = m.params.attach_frozen(&mut g);
        let (lx, ly) = bidiffuser_terms(&m, &mut g, &p, &nb).unwrap();
        let (ex, _) = m.predict(&nb.xt, &nb.y0, &nb.tx, &[0, 0]).unwrap();
        let (_, ey) = m.predict(&nb.x0, &nb.yt, &[0, 0], &nb.ty).unwrap();
        let mx = ex.data().iter().zip(nb.eps_x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ex.numel() as f64;
        let my = ey.data().iter().zip(nb.eps_y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ey.numel() as f64;
        assert!((g.value(lx).item().unwrap() - mx).abs() < 1e-12);
        assert!((g.value(ly).item().unwrap() - my).abs() < 1e-12);
    }

    #[test]
    fn alpha_is_affine_and_validated() {
        let m = tiny();
        let nb = batch(&m, 2, 5, 1..=10);
        let eval = |a: f64| {
            let mut g = Graph::new();
            let p = m.params.attach_frozen(&mut g);
            let l = loss_bidiffuser(&m, &mut g, &p, &nb, a).unwrap();
            g.value(l).item().unwrap()
        };
        let (l0, l1) = (eval(0.0), eval(1.0));
        for a in [0.25, 0.5, 2.0, 7.0] {
            assert!((eval(a) - (l0 + a * (l1 - l0))).abs() < 1e-12 * l1.max(1.0));
        }
        let mut g = Graph::new();
        let p = m.params.attach_frozen(&mut g);
        assert!(matches!(loss_bidiffuser(&m, &mut g, &p, &nb, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let m = tiny();
        let nb = batch(&m, 2, 6, 0..=10);
        let idx = [m.params.params().iter().position(|p| p.name == "den.img_in.weight").unwrap(), m.params.len() - 2];
        let inputs: Vec<Tensor> = idx.iter().map(|&i| m.params.value(i).clone()).collect();
        for joint in [true, false] {
            let res = check(&inputs, DEFAULT_STEP, |g, vars| {
                let mut bound = m.params.attach_frozen(g);
                bound.replace(idx[0], vars[0]);
                bound.replace(idx[1], vars[1]);
                if joint {
                    loss_unidiffuser(&m, g, &bound, &nb)
                } else {
                    loss_bidiffuser(&m, g, &bound, &nb, 0.7)
                }
            })
            .unwrap();
            assert!(res.passes(1e-5), "{:?}", res.max_rel_error());
        }
    }

    #[test]
    fn frozen_model_step_is_noop_and_training_descends() {
        let mut m = tiny();
        let nb = batch(&m, 4, 7, 1..=10);
        m.params.set_frozen(true);
        let before = m.params.fingerprint();
        let mut opt = AdamW::new(AdamWConfig::new(1e-2, 10), &m.params);
        finetune_step(&mut m, &nb, 1.0, &mut opt).unwrap();
        assert_eq!(before, m.params.fingerprint());
        m.params.set_frozen(false);
        let mut opt = AdamW::new(AdamWConfig { warmup_ratio: 0.0, ..AdamWConfig::new(3e-3, 200) }, &m.params);
        let losses: Vec<f64> = (0..200).map(|_| finetune_step(&mut m, &nb, 1.0, &mut opt).unwrap()).collect();
        let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.95 * 199.0, "{down} of 199 steps decreased");
    }
}
