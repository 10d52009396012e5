//! Projection from the diffusion text space into the LLM, in the Pre-Align
//! (prefix embeddings) and Mid-Align (encoder memory) manners.

use crate::denoiser::JointDenoiser;
use crate::diffusion::{sample_loop, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::llm::{Llm, LlmVariant};
use crate::nn::{Bound, Linear, ParamBundle};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Per-row linear map from text-latent width to LLM width.
#[derive(Clone, Debug)]
pub struct Projection {
    pub params: ParamBundle,
    linear: Linear,
}

impl Projection {
    pub fn new(latent_dim: usize, llm_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBundle::new();
        let linear = Linear::new(&mut pb, "proj", latent_dim, llm_width, true, 1.0, &mut rng);
        Self { params: pb, linear }
    }

    pub fn in_dim(&self) -> usize {
        self.params.value(self.linear.weight()).shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.params.value(self.linear.weight()).shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        self.linear.forward(g, p, latent)
    }

    /// Mean over projected rows, `[1, width]`.
    pub fn pooled(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let rows = self.forward(g, p, latent)?;
        Ok(g.mean_rows(rows))
    }
}

/// Text latents for a batch of clean `[B, H, W]` images, sampled by the
/// reverse process on the text branch with the image condition at t = 0.
pub fn diffusion_image_to_text_latent(model: &JointDenoiser, images: &Tensor, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    if images.shape().len() != 3 {
        return Err(Error::Shape(format!("expected [B, H, W] images, got {:?}", images.shape())));
    }
    let c = &model.config;
    let shape = [images.shape()[0], c.text_rows, c.text_dim];
    let mut den = |y: &Tensor, t: usize, cond: Option<(&Tensor, usize)>| {
        let (x, tc) = cond.ok_or_else(|| Error::Contract("image-to-text sampling needs the image".into()))?;
        model.eps_text(y, t, x, tc)
    };
    sample_loop(&mut den, Some(images), &shape, sched, GuidanceConfig::unguided(), seed)
}

/// `(1/N)·Σ‖d_diff − d_llm‖²` over the rows of two `[N, width]` batches.
pub fn loss_itdm(g: &mut Graph, d_diff: Var, d_llm: Var) -> Result<Var> {
    if g.shape(d_diff) != g.shape(d_llm) || g.shape(d_diff).len() != 2 {
        return Err(Error::Shape(format!("ITDM inputs {:?} and {:?}", g.shape(d_diff), g.shape(d_llm))));
    }
    let n = g.shape(d_diff)[0];
    if n == 0 {
        return Err(Error::Empty("ITDM batch".into()));
    }
    let d = g.sub(d_diff, d_llm)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Manner {
    Pre,
    Mid,
}

impl FromStr for Manner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Manner::Pre),
            "mid" => Ok(Manner::Mid),
            other => Err(Error::Config(format!("unknown alignment manner `{other}` (pre|mid)"))),
        }
    }
}

impl fmt::Display for Manner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Manner::Pre => "pre",
            Manner::Mid => "mid",
        })
    }
}

/// One training example: a sampled text latent, the instruction prompt
/// containing `<image>`, the target caption ids, and the caption as the
/// LLM encoder sees it.
#[derive(Clone, Debug)]
pub struct AlignExample {
    pub latent: Tensor,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
}

/// Pre-Align ITG loss: projected latent rows replace `<image>` in the prompt.
pub fn pre_align_loss(g: &mut Graph, proj: &Projection, pp: &Bound, llm: &Llm, lp: &Bound, ex: &AlignExample) -> Result<Var> {
    let lat = g.constant(ex.latent.clone());
    let embeds = proj.forward(g, pp, lat)?;
    llm.loss_itg(g, lp, embeds, &ex.instruction, &ex.target)
}

#[derive(Clone, Copy, Debug)]
pub struct MidAlign {
    pub l_mid: Var,
    pub l_itg: Var,
    pub l_itdm: Var,
}

/// Mid-Align losses over a batch. The decoder reads memory
/// `[d_diff; encoder(instruction)]` and generates the caption; `d_llm` is the
/// mean-pooled encoder output of the caption.
pub fn mid_align_losses(g: &mut Graph, proj: &Projection, pp: &Bound, llm: &Llm, lp: &Bound, batch: &[AlignExample]) -> Result<MidAlign> {
    if llm.variant() != LlmVariant::EncoderDecoder {
        return Err(Error::Config("Mid-Align needs the encoder-decoder LLM".into()));
    }
    if batch.is_empty() {
        return Err(Error::Empty("alignment batch".into()));
    }
    let mut diffs = Vec::with_capacity(batch.len());
    let mut llms = Vec::with_capacity(batch.len());
    let mut itg = Vec::with_capacity(batch.len());
    for ex in batch {
        let lat = g.constant(ex.latent.clone());
        let d_diff = proj.pooled(g, pp, lat)?;
        let d_llm = llm.pooled_encoding(g, lp, &ex.target)?;
        let memory = llm.memory(g, lp, d_diff, &ex.instruction)?;
        itg.push(llm.sequence_pass(g, lp, &[], None, &ex.target, Some(memory))?.loss);
        diffs.push(d_diff);
        llms.push(d_llm);
    }
    let d_diff = g.concat_rows(&diffs)?;
    let d_llm = g.concat_rows(&llms)?;
    let l_itdm = loss_itdm(g, d_diff, d_llm)?;
    let l_itg = mean_of(g, &itg)?;
    let l_mid = g.add(l_itg, l_itdm)?;
    Ok(MidAlign { l_mid, l_itg, l_itdm })
}

pub(crate) fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64))
}

/// Batch means of per-pair cosine similarity and per-pair MSE between the
/// rows of two `[N, width]` tensors. Pairs involving a zero vector count as
/// cosine 0 and are reported in `zero_pairs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    pub avg_cosine: f64,
    pub avg_mse: f64,
    pub zero_pairs: usize,
}

pub fn alignment_metrics(d_diff: &Tensor, d_llm: &Tensor) -> Result<AlignmentMetrics> {
    if d_diff.shape() != d_llm.shape() || d_diff.shape().len() != 2 || d_diff.shape()[0] == 0 {
        return Err(Error::Shape(format!("alignment metrics on {:?} and {:?}", d_diff.shape(), d_llm.shape())));
    }
    let n = d_diff.shape()[0];
    let (mut cos, mut mse, mut zero) = (0.0, 0.0, 0);
    for i in 0..n {
        let (a, b) = (d_diff.row(i), d_llm.row(i));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            zero += 1;
        } else {
            cos += dot / (na * nb);
        }
        mse += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    }
    Ok(AlignmentMetrics { avg_cosine: cos / n as f64, avg_mse: mse / n as f64, zero_pairs: zero })
}

/// `(d_diff, d_llm)` as plain `[N, width]` tensors.
pub fn pooled_pairs(proj: &Projection, llm: &Llm, examples: &[AlignExample]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let pp = proj.params.attach_frozen(&mut g);
    let lp = llm.params.attach_frozen(&mut g);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for ex in examples {
        let lat = g.constant(ex.latent.clone());
        let d = proj.pooled(&mut g, &pp, lat)?;
        a.extend_from_slice(g.value(d).data());
        let e = llm.pooled_encoding(&mut g, &lp, &ex.target)?;
        b.extend_from_slice(g.value(e).data());
    }
    let w = proj.out_dim();
    Ok((Tensor::new(vec![examples.len(), w], a)?, Tensor::new(vec![examples.len(), w], b)?))
}

#[derive(Clone, Debug)]
pub struct AlignConfig {
    pub manner: Manner,
    /// Train the LLM alongside the projection (Pre-Align only).
    pub train_llm: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLogRow {
    pub step: usize,
    pub l_itg: f64,
    pub l_itdm: f64,
}

/// Trains the projection (and, in Pre-Align with `train_llm`, the LLM).
/// Returns the per-step log.
pub fn train_alignment(proj: &mut Projection, llm: &mut Llm, examples: &[AlignExample], cfg: &AlignConfig) -> Result<Vec<AlignLogRow>> {
    if examples.is_empty() || cfg.batch == 0 {
        return Err(Error::Empty("alignment data".into()));
    }
    if cfg.manner == Manner::Mid && cfg.train_llm {
        return Err(Error::Config("Mid-Align trains the projection only".into()));
    }
    if cfg.manner == Manner::Mid && llm.variant() != LlmVariant::EncoderDecoder {
        return Err(Error::Config("Mid-Align needs the encoder-decoder LLM".into()));
    }
    llm.params.set_frozen(!cfg.train_llm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut popt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.steps.max(1)), &proj.params);
    let mut lopt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.steps.max(1)), &llm.params);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.len() < cfg.batch {
            let mut fresh: Vec<usize> = (0..examples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<AlignExample> = order.drain(..cfg.batch.min(order.len())).map(|i| examples[i].clone()).collect();
        let mut g = Graph::new();
        let pp = proj.params.attach(&mut g);
        let lp = if cfg.train_llm { llm.params.attach(&mut g) } else { llm.params.attach_frozen(&mut g) };
        let (loss, l_itg, l_itdm) = match cfg.manner {
            Manner::Pre => {
                let losses = batch.iter().map(|ex| pre_align_loss(&mut g, proj, &pp, llm, &lp, ex)).collect::<Result<Vec<_>>>()?;
                let l = mean_of(&mut g, &losses)?;
                (l, g.value(l).item()?, f64::NAN)
            }
            Manner::Mid => {
                let m = mid_align_losses(&mut g, proj, &pp, llm, &lp, &batch)?;
                (m.l_mid, g.value(m.l_itg).item()?, g.value(m.l_itdm).item()?)
            }
        };
        if !g.value(loss).item()?.is_finite() {
            return Err(Error::Numerical(format!("alignment loss diverged at step {step}")));
        }
        g.backward(loss)?;
        let pg = proj.params.grads(&g, &pp);
        popt.step(&mut proj.params, &pg);
        if cfg.train_llm {
            let lg = llm.params.grads(&g, &lp);
            lopt.step(&mut llm.params, &lg);
        }
        log.push(AlignLogRow { step, l_itg, l_itdm });
    }
    Ok(log)
}
