//! Training stages shared by the command line and the acceptance suite:
//! joint pretraining, bidirectional fine-tuning, language-model pretraining,
//! alignment, adapter training and dialogue tuning.

use crate::adapter::{adapter_batch_loss, loss_all, Adapter, DialogueParts, FusionConfig, ImageNoise};
use crate::alignment::{diffusion_image_to_text_latent, mean_of, AlignExample, Manner};
use crate::config::Config;
use crate::data::{chat_dialogue, gen_dataset, photo_dialogue, PairedSample, Scene, WorldSpec};
use crate::denoiser::{bidiffuser_terms, stack, train_step, DenoiserConfig, JointDenoiser, NoisyBatch, Objective};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::llm::template::{render_caption, render_question, CAPTION_QUERIES};
use crate::llm::{Llm, LlmConfig, LlmVariant};
use crate::nn::{Bound, ParamBundle};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{CaptionCodebook, TextCodec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::RangeInclusive;

/// Seed of the frozen text encoder; fixed so latents never depend on a run.
pub const CODEC_SEED: u64 = 0;

/// The dataset with its frozen text latents and decoding codebook.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub data: Vec<PairedSample>,
    pub codec: TextCodec,
    pub latents: Vec<Tensor>,
    pub codebook: CaptionCodebook,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let data = gen_dataset(&spec);
        let codec = TextCodec::standard(CODEC_SEED);
        let captions: Vec<String> = data.iter().map(|s| s.caption.clone()).collect();
        let latents = captions.iter().map(|c| codec.encode_caption(c)).collect::<Result<Vec<_>>>()?;
        let codebook = CaptionCodebook::from_latents(captions, latents.clone())?;
        Ok(Self { spec, data, codec, latents, codebook })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(WorldSpec { image_size: cfg.get("data.image_size")?, seed: cfg.get("data.seed")? })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        stack(&idx.iter().map(|&i| &self.data[i].image).collect::<Vec<_>>())
    }

    pub fn latent_batch(&self, idx: &[usize]) -> Result<Tensor> {
        stack(&idx.iter().map(|&i| &self.latents[i]).collect::<Vec<_>>())
    }

    pub fn all_images(&self) -> Result<Tensor> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn captions(&self) -> Vec<String> {
        self.data.iter().map(|s| s.caption.clone()).collect()
    }

    fn scene(&self, i: usize) -> Result<Scene> {
        Scene::from_caption(&self.data[i].caption).ok_or_else(|| Error::Contract("caption outside the grammar".into()))
    }
}

pub fn schedule(cfg: &Config) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.get("diffusion.T")?, cfg.get("diffusion.beta_start")?, cfg.get("diffusion.beta_end")?)
}

pub fn new_denoiser(world: &World, sched: &NoiseSchedule, seed: u64) -> Result<JointDenoiser> {
    let mut c = DenoiserConfig::toy(sched.steps());
    c.image_size = world.spec.image_size;
    JointDenoiser::new(c, sched, seed)
}

/// Step budget, batch size, peak learning rate and data seed of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainSpec {
    /// Reads `<prefix>.steps`, `<prefix>.batch` (when present) and `<prefix>.lr`.
    pub fn from_config(cfg: &Config, prefix: &str, seed: u64) -> Result<Self> {
        let batch = cfg.get(&format!("{prefix}.batch")).unwrap_or(1);
        Ok(Self { steps: cfg.get(&format!("{prefix}.steps"))?, batch, lr: cfg.get(&format!("{prefix}.lr"))?, seed })
    }

    fn check(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("invalid training spec {self:?}")));
        }
        Ok(())
    }
}

fn noisy_batch(world: &World, sched: &NoiseSchedule, batch: usize, range: RangeInclusive<usize>, rng: &mut ChaCha8Rng) -> Result<NoisyBatch> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..world.len())).collect();
    NoisyBatch::sample(world.images(&idx)?, world.latent_batch(&idx)?, sched, range, rng)
}

/// Trains `model` under `objective`; joint training draws timesteps from
/// `{0, …, T}`, bidirectional fine-tuning from `{1, …, T}`. `on_step` sees
/// the model after every update.
pub fn train_denoiser(
    model: &mut JointDenoiser,
    world: &World,
    sched: &NoiseSchedule,
    spec: TrainSpec,
    objective: Objective,
    mut on_step: impl FnMut(usize, &JointDenoiser) -> Result<()>,
) -> Result<Vec<f64>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamW::new(AdamWConfig::new(spec.lr, spec.steps.max(1)), &model.params);
    let lo = match objective {
        Objective::Joint => 0,
        Objective::Bidirectional { .. } => 1,
    };
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let b = noisy_batch(world, sched, spec.batch, lo..=sched.steps(), &mut rng)?;
        losses.push(train_step(model, &b, objective, &mut opt)?);
        on_step(step + 1, model)?;
    }
    Ok(losses)
}

/// Conditional denoising errors at clean conditions on a fixed evaluation
/// set: `(text→image MSE, image→text MSE)`.
pub fn conditional_losses(model: &JointDenoiser, world: &World, sched: &NoiseSchedule, seed: u64) -> Result<(f64, f64)> {
    const BATCHES: usize = 8;
    const SIZE: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lx, mut ly) = (0.0, 0.0);
    for _ in 0..BATCHES {
        let b = noisy_batch(world, sched, SIZE, 1..=sched.steps(), &mut rng)?;
        let mut g = Graph::new();
        let p = model.params.attach_frozen(&mut g);
        let (x, y) = bidiffuser_terms(model, &mut g, &p, &b)?;
        lx += g.value(x).item()?;
        ly += g.value(y).item()?;
    }
    Ok((lx / BATCHES as f64, ly / BATCHES as f64))
}

/// `L_d = L_t2i + α·L_i2t` on the fixed evaluation set.
pub fn eval_ld(model: &JointDenoiser, world: &World, sched: &NoiseSchedule, alpha: f64, seed: u64) -> Result<f64> {
    let (x, y) = conditional_losses(model, world, sched, seed)?;
    Ok(x + alpha * y)
}

/// Sampled text latents for every image, decoded through the codebook.
pub struct CaptionRun {
    pub latents: Vec<Tensor>,
    pub decoded: Vec<String>,
    pub correct: usize,
}

pub fn image_to_caption_run(model: &JointDenoiser, world: &World, sched: &NoiseSchedule, seed: u64) -> Result<CaptionRun> {
    let lat = diffusion_image_to_text_latent(model, &world.all_images()?, sched, seed)?;
    let latents: Vec<Tensor> = (0..world.len()).map(|i| crate::denoiser::unstack(&lat, i)).collect();
    let decoded = latents.iter().map(|l| world.codebook.decode(l).map(str::to_string)).collect::<Result<Vec<_>>>()?;
    let correct = decoded.iter().zip(&world.data).filter(|(d, s)| **d == s.caption).count();
    Ok(CaptionRun { latents, decoded, correct })
}

fn opt_step(bundle: &mut ParamBundle, opt: &mut AdamW, g: &Graph, bound: &Bound) {
    let grads = bundle.grads(g, bound);
    opt.step(bundle, &grads);
}

fn finite(g: &Graph, loss: Var, what: &str, step: usize) -> Result<f64> {
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what} loss diverged at step {step}")));
    }
    Ok(v)
}

/// Text-only pretraining of the language model on captions and synthetic
/// dialogues. The encoder-decoder variant reconstructs each caption from
/// its own encoding.
pub fn pretrain_llm(llm: &mut Llm, world: &World, spec: TrainSpec) -> Result<Vec<f64>> {
    spec.check()?;
    let vocab = &world.codec.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamW::new(AdamWConfig::new(spec.lr, spec.steps.max(1)), &llm.params);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut g = Graph::new();
        let p = llm.params.attach(&mut g);
        let mut terms = Vec::with_capacity(spec.batch);
        for _ in 0..spec.batch {
            let i = rng.random_range(0..world.len());
            let caption = &world.data[i].caption;
            let loss = match rng.random_range(0..5) {
                0 | 1 => {
                    let ids = vocab.tokenize(caption)?;
                    let memory = match llm.variant() {
                        LlmVariant::DecoderOnly => None,
                        LlmVariant::EncoderDecoder => Some(llm.encode(&mut g, &p, &ids)?),
                    };
                    llm.sequence_pass(&mut g, &p, &[], None, &ids, memory)?.loss
                }
                2 | 3 => llm.loss_t2t(&mut g, &p, vocab, &photo_dialogue(caption, &mut rng))?.loss,
                _ => llm.loss_t2t(&mut g, &p, vocab, &chat_dialogue(&mut rng))?.loss,
            };
            terms.push(loss);
        }
        let loss = mean_of(&mut g, &terms)?;
        losses.push(finite(&g, loss, "language model", step)?);
        g.backward(loss)?;
        opt_step(&mut llm.params, &mut opt, &g, &p);
    }
    Ok(losses)
}

pub fn new_llm(world: &World, variant: LlmVariant, seed: u64) -> Result<Llm> {
    Llm::new(LlmConfig::toy(world.codec.vocab.len(), variant), &world.codec.vocab, seed)
}

/// Alignment examples for every image: one captioning instruction with a
/// seeded query choice plus the four VQA questions.
pub fn align_examples(world: &World, latents: &[Tensor], variant: LlmVariant, seed: u64) -> Result<Vec<AlignExample>> {
    let vocab = &world.codec.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, lat) in latents.iter().enumerate() {
        let q = rng.random_range(0..CAPTION_QUERIES.len());
        out.push(AlignExample {
            latent: lat.clone(),
            instruction: vocab.tokenize(&render_caption(q, variant)?)?,
            target: vocab.tokenize(&world.data[i].caption)?,
        });
        for (question, answer) in world.scene(i)?.questions() {
            out.push(AlignExample {
                latent: lat.clone(),
                instruction: vocab.tokenize(&render_question("vqa", &question, variant)?)?,
                target: vocab.tokenize(&answer)?,
            });
        }
    }
    Ok(out)
}

/// Captioning examples only, for the Mid-Align objective whose distance
/// term compares against the caption encoding.
pub fn caption_examples(world: &World, latents: &[Tensor], variant: LlmVariant, seed: u64) -> Result<Vec<AlignExample>> {
    Ok(align_examples(world, latents, variant, seed)?.into_iter().step_by(5).collect())
}

pub fn alignment_manner(cfg: &Config) -> Result<Manner> {
    cfg.get_str("align.manner")?.parse()
}

/// Trains the adapter against the frozen denoiser, the LLM reading each
/// caption alone.
pub fn train_adapter(
    adapter: &mut Adapter,
    den: &JointDenoiser,
    llm: &Llm,
    world: &World,
    sched: &NoiseSchedule,
    fusion: FusionConfig,
    spec: TrainSpec,
) -> Result<Vec<f64>> {
    spec.check()?;
    let vocab = &world.codec.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamW::new(AdamWConfig::new(spec.lr, spec.steps.max(1)), &adapter.params);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let idx: Vec<usize> = (0..spec.batch).map(|_| rng.random_range(0..world.len())).collect();
        let captions = idx.iter().map(|&i| vocab.tokenize(&world.data[i].caption)).collect::<Result<Vec<_>>>()?;
        let noise = ImageNoise::sample(world.images(&idx)?, sched, &mut rng)?;
        let mut g = Graph::new();
        let lp = llm.params.attach_frozen(&mut g);
        let dp = den.params.attach_frozen(&mut g);
        let ap = adapter.params.attach(&mut g);
        let parts = DialogueParts { llm, adapter, den, codec: &world.codec, fusion };
        let loss = adapter_batch_loss(&mut g, &parts, &lp, &ap, &dp, &captions, &noise)?;
        losses.push(finite(&g, loss, "adapter", step)?);
        g.backward(loss)?;
        opt_step(&mut adapter.params, &mut opt, &g, &ap);
    }
    Ok(losses)
}

/// Dialogue tuning of the LLM and adapter with `L_all` on photo-sharing
/// dialogues and `L_t2t` on text-only ones; the denoiser stays frozen.
pub fn train_dialogue(
    llm: &mut Llm,
    adapter: &mut Adapter,
    den: &JointDenoiser,
    world: &World,
    sched: &NoiseSchedule,
    fusion: FusionConfig,
    spec: TrainSpec,
) -> Result<Vec<f64>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lopt = AdamW::new(AdamWConfig::new(spec.lr, spec.steps.max(1)), &llm.params);
    let mut aopt = AdamW::new(AdamWConfig::new(spec.lr, spec.steps.max(1)), &adapter.params);
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let mut g = Graph::new();
        let lp = llm.params.attach(&mut g);
        let ap = adapter.params.attach(&mut g);
        let dp = den.params.attach_frozen(&mut g);
        let parts = DialogueParts { llm, adapter, den, codec: &world.codec, fusion };
        let mut terms = Vec::new();
        for _ in 0..spec.batch {
            let i = rng.random_range(0..world.len());
            let d = photo_dialogue(&world.data[i].caption, &mut rng);
            let noise = ImageNoise::sample(world.images(&[i])?, sched, &mut rng)?;
            terms.push(loss_all(&mut g, &parts, &lp, &ap, &dp, &d, &noise)?.l_all);
            terms.push(llm.loss_t2t(&mut g, &lp, &world.codec.vocab, &chat_dialogue(&mut rng))?.loss);
        }
        let loss = mean_of(&mut g, &terms)?;
        losses.push(finite(&g, loss, "dialogue", step)?);
        g.backward(loss)?;
        opt_step(&mut llm.params, &mut lopt, &g, &lp);
        opt_step(&mut adapter.params, &mut aopt, &g, &ap);
    }
    Ok(losses)
}
