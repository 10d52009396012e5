//! Semantic understanding and reasoning adapter: text-encoder rows attend
//! to LLM hidden states, and the result is blended into the diffusion
//! condition.

use crate::denoiser::{patchify, JointDenoiser};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::llm::{DialogueSample, Llm, LlmVariant};
use crate::nn::{Bound, Linear, Mlp, ParamBundle};
use crate::tensor::{AttnSpec, Graph, Tensor, Var};
use crate::text::TextCodec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: 0.3 }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { lambda })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Single-head cross-attention with an MLP on the key/value side.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub params: ParamBundle,
    mlp: Mlp,
    wq: Linear,
    wk: Linear,
    wv: Linear,
}

impl Adapter {
    /// `clip_dim` is the text-encoder width (also the attention width),
    /// `llm_width` the width of the hidden states.
    pub fn new(clip_dim: usize, llm_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBundle::new();
        let mlp = Mlp::new(&mut pb, "ada.mlp", llm_width, llm_width, llm_width, &mut rng);
        let wq = Linear::new(&mut pb, "ada.wq", clip_dim, clip_dim, false, 1.0, &mut rng);
        let wk = Linear::new(&mut pb, "ada.wk", llm_width, clip_dim, false, 1.0, &mut rng);
        let wv = Linear::new(&mut pb, "ada.wv", llm_width, clip_dim, false, 1.0, &mut rng);
        Self { params: pb, mlp, wq, wk, wv }
    }

    /// `y_sur` with the shape of `clip_seq`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, clip_seq: Var, llm_hidden: Var) -> Result<Var> {
        let h = self.mlp.forward(g, p, llm_hidden)?;
        let q = self.wq.forward(g, p, clip_seq)?;
        let k = self.wk.forward(g, p, h)?;
        let v = self.wv.forward(g, p, h)?;
        g.attention(q, k, v, AttnSpec::new(1, 1))
    }

    /// Fused condition `λ·y_sur + (1−λ)·clip` for one caption.
    pub fn condition(&self, g: &mut Graph, p: &Bound, clip: &Tensor, llm_hidden: Var, fusion: FusionConfig) -> Result<Var> {
        let c = g.constant(clip.clone());
        let sur = self.forward(g, p, c, llm_hidden)?;
        fuse(g, sur, c, fusion.lambda)
    }
}

/// `λ·y_sur + (1−λ)·clip`.
pub fn fuse(g: &mut Graph, y_sur: Var, clip: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if g.shape(y_sur) != g.shape(clip) {
        return Err(Error::Shape(format!("fuse of {:?} with {:?}", g.shape(y_sur), g.shape(clip))));
    }
    let a = g.scale(y_sur, lambda);
    let b = g.scale(clip, 1.0 - lambda);
    g.add(a, b)
}

pub fn fuse_tensors(y_sur: &Tensor, clip: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    y_sur.zip_map(clip, |a, b| lambda * a + (1.0 - lambda) * b)
}

/// Final hidden states of the LLM over the caption tokens themselves.
pub fn caption_hidden(g: &mut Graph, llm: &Llm, p: &Bound, vocab_bos: usize, ids: &[usize]) -> Result<Var> {
    let mut seq = vec![vocab_bos];
    seq.extend_from_slice(ids);
    let memory = match llm.variant() {
        LlmVariant::DecoderOnly => None,
        LlmVariant::EncoderDecoder => Some(llm.encode(g, p, ids)?),
    };
    let (hidden, _) = llm.forward(g, p, &seq, None, memory)?;
    g.slice_rows(hidden, 1, ids.len())
}

/// Noised images for the adapter objective.
#[derive(Clone, Debug)]
pub struct ImageNoise {
    pub x0: Tensor,
    pub tx: Vec<usize>,
    pub eps: Tensor,
    pub xt: Tensor,
}

impl ImageNoise {
    /// Timesteps uniform in `{1, …, T}`.
    pub fn sample<R: Rng + ?Sized>(x0: Tensor, sched: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let b = x0.shape()[0];
        let tx: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, rng);
        Self::new(x0, tx, eps, sched)
    }

    pub fn new(x0: Tensor, tx: Vec<usize>, eps: Tensor, sched: &NoiseSchedule) -> Result<Self> {
        let b = x0.shape()[0];
        if tx.len() != b || eps.shape() != x0.shape() {
            return Err(Error::Shape("image noise batch is inconsistent".into()));
        }
        let per = x0.numel() / b.max(1);
        let mut xt = Vec::with_capacity(x0.numel());
        for (i, &t) in tx.iter().enumerate() {
            let xi = Tensor::new(x0.shape()[1..].to_vec(), x0.data()[i * per..(i + 1) * per].to_vec())?;
            let ei = Tensor::new(x0.shape()[1..].to_vec(), eps.data()[i * per..(i + 1) * per].to_vec())?;
            xt.extend(q_sample(&xi, t, &ei, sched)?.into_data());
        }
        let xt = Tensor::new(x0.shape().to_vec(), xt)?;
        Ok(Self { x0, tx, eps, xt })
    }
}

/// Image-noise MSE with the denoiser conditioned on `y0` (`[B·rows, dim]`)
/// at condition timestep 0. The denoiser must be fully frozen.
pub fn loss_ada(g: &mut Graph, den: &JointDenoiser, dp: &Bound, noise: &ImageNoise, y0: Var) -> Result<Var> {
    if !den.params.all_frozen() {
        return Err(Error::Contract("the denoiser must be frozen while training the adapter".into()));
    }
    let b = noise.tx.len();
    let xt = g.constant(patchify(&noise.xt, den.config.patch)?);
    let (ex, _) = den.forward(g, dp, xt, y0, &noise.tx, &vec![0; b])?;
    let target = g.constant(patchify(&noise.eps, den.config.patch)?);
    g.mse(ex, target)
}

#[derive(Clone, Copy, Debug)]
pub struct DialogueLoss {
    pub l_all: Var,
    pub l_t2i: Var,
    pub l_t2t: Var,
}

/// Everything `loss_all` needs besides the graph bindings.
pub struct DialogueParts<'a> {
    pub llm: &'a Llm,
    pub adapter: &'a Adapter,
    pub den: &'a JointDenoiser,
    pub codec: &'a TextCodec,
    pub fusion: FusionConfig,
}

/// `L_t2i + L_t2t` for one photo-sharing dialogue. The adapter reads the
/// teacher-forced hidden states over the caption span of the target.
pub fn loss_all(
    g: &mut Graph,
    parts: &DialogueParts,
    lp: &Bound,
    ap: &Bound,
    dp: &Bound,
    dialogue: &DialogueSample,
    noise: &ImageNoise,
) -> Result<DialogueLoss> {
    let caps = dialogue.captions()?;
    if caps.len() != 1 {
        return Err(Error::Contract(format!("dialogue target must share exactly one image, found {}", caps.len())));
    }
    if noise.tx.len() != 1 {
        return Err(Error::Shape("dialogue loss takes one image".into()));
    }
    let vocab = &parts.codec.vocab;
    let pass = parts.llm.loss_t2t(g, lp, vocab, dialogue)?;
    let target = vocab.tokenize(&dialogue.target)?;
    let open = target.iter().position(|&i| i == vocab.img_open()).ok_or_else(|| Error::Contract("no <Img>".into()))?;
    let close = target.iter().position(|&i| i == vocab.img_close()).ok_or_else(|| Error::Contract("no </Img>".into()))?;
    let span = &target[open + 1..close];
    if span.is_empty() {
        return Err(Error::Contract("empty caption span".into()));
    }
    let hidden = g.slice_rows(pass.hidden, pass.target_offset + open + 1, span.len())?;
    let clip = parts.codec.encoder.encode(span)?;
    let y0 = parts.adapter.condition(g, ap, &clip, hidden, parts.fusion)?;
    let l_t2i = loss_ada(g, parts.den, dp, noise, y0)?;
    let l_t2t = pass.loss;
    let l_all = g.add(l_t2i, l_t2t)?;
    Ok(DialogueLoss { l_all, l_t2i, l_t2t })
}

/// Mean adapter loss over captions paired with their noised images, the
/// LLM reading each caption alone.
pub fn adapter_batch_loss(
    g: &mut Graph,
    parts: &DialogueParts,
    lp: &Bound,
    ap: &Bound,
    dp: &Bound,
    captions: &[Vec<usize>],
    noise: &ImageNoise,
) -> Result<Var> {
    if captions.is_empty() || captions.len() != noise.tx.len() {
        return Err(Error::Shape("adapter batch is inconsistent".into()));
    }
    let bos = parts.codec.vocab.bos();
    let mut conds = Vec::with_capacity(captions.len());
    for ids in captions {
        let hidden = caption_hidden(g, parts.llm, lp, bos, ids)?;
        let clip = parts.codec.encoder.encode(ids)?;
        conds.push(parts.adapter.condition(g, ap, &clip, hidden, parts.fusion)?);
    }
    let y0 = g.concat_rows(&conds)?;
    loss_ada(g, parts.den, dp, noise, y0)
}
