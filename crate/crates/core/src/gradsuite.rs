//! Finite-difference checks of every training loss on micro-models.

use crate::adapter::{adapter_batch_loss, loss_all, Adapter, DialogueParts, FusionConfig, ImageNoise};
use crate::alignment::{mid_align_losses, pre_align_loss, AlignExample, Projection};
use crate::data::{chat_dialogue, gen_dataset, photo_dialogue, WorldSpec};
use crate::denoiser::{bidiffuser_terms, loss_bidiffuser, loss_unidiffuser, DenoiserConfig, JointDenoiser, NoisyBatch};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::llm::template::render_caption;
use crate::llm::{Llm, LlmConfig, LlmVariant};
use crate::nn::{Bound, ParamBundle};
use crate::tensor::gradcheck::{check, GradCheck, DEFAULT_STEP};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{TextCodec, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub tensors: usize,
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Parameter indices to perturb: the first, the last and evenly spaced ones
/// in between.
fn pick(bundle: &ParamBundle, k: usize) -> Vec<usize> {
    let n = bundle.len();
    let mut idx: Vec<usize> = (0..k).map(|i| i * (n - 1) / (k - 1).max(1)).collect();
    idx.dedup();
    idx
}

/// Checks `f` with the chosen tensors of each bundle as differentiable
/// leaves and every other parameter held constant.
fn check_bundles<F>(probes: &[(&ParamBundle, Vec<usize>)], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Bound]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = probes.iter().flat_map(|(b, idx)| idx.iter().map(|&i| b.value(i).clone())).collect();
    check(&inputs, DEFAULT_STEP, |g, vars| {
        let mut it = vars.iter();
        let mut bounds = Vec::with_capacity(probes.len());
        for (b, idx) in probes {
            let mut bound = b.attach_frozen(g);
            for &i in idx {
                bound.replace(i, *it.next().expect("one var per input"));
            }
            bounds.push(bound);
        }
        f(g, &bounds)
    })
}

struct Micro {
    codec: TextCodec,
    sched: NoiseSchedule,
    den: JointDenoiser,
    batch: NoisyBatch,
    noise: ImageNoise,
    captions: Vec<String>,
}

impl Micro {
    fn new() -> Result<Self> {
        let codec = TextCodec::new(Vocab::standard(), 2, 4, 0);
        let sched = NoiseSchedule::linear(10, 1e-2, 0.3)?;
        let cfg = DenoiserConfig { image_size: 4, patch: 2, text_rows: 2, text_dim: 4, width: 8, depth: 1, heads: 2, mlp_hidden: 8, steps: 10 };
        let mut den = JointDenoiser::new(cfg, &sched, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let captions: Vec<String> = gen_dataset(&WorldSpec::default()).into_iter().take(2).map(|s| s.caption).collect();
        let x0 = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let y0 = crate::denoiser::stack(&captions.iter().map(|c| codec.encode_caption(c)).collect::<Result<Vec<_>>>()?.iter().collect::<Vec<_>>())?;
        let batch = NoisyBatch::sample(x0.clone(), y0, &sched, 1..=10, &mut rng)?;
        let noise = ImageNoise::sample(x0, &sched, &mut rng)?;
        den.params.set_frozen(true);
        Ok(Self { codec, sched, den, batch, noise, captions })
    }

    fn llm(&self, variant: LlmVariant, seed: u64) -> Result<Llm> {
        let v = &self.codec.vocab;
        let cfg = LlmConfig { vocab: v.len(), width: 8, blocks: 1, heads: 2, mlp_hidden: 8, max_len: 64, variant };
        Llm::new(cfg, v, seed)
    }

    fn example(&self, i: usize, variant: LlmVariant) -> Result<AlignExample> {
        let v = &self.codec.vocab;
        Ok(AlignExample {
            latent: crate::denoiser::unstack(&self.batch.y0, i),
            instruction: v.tokenize(&render_caption(i, variant)?)?,
            target: v.tokenize(&self.captions[i])?,
        })
    }
}

fn record(out: &mut Vec<LossCheck>, loss: &str, tensors: usize, res: GradCheck) {
    out.push(LossCheck { loss: loss.to_string(), tensors, max_rel_error: res.max_rel_error() });
}

/// Runs every check; each entry names the loss and its worst relative error.
pub fn run() -> Result<Vec<LossCheck>> {
    let m = Micro::new()?;
    let mut out = Vec::new();
    let den_idx = pick(&m.den.params, 4);
    let nd = den_idx.len();

    let res = check_bundles(&[(&m.den.params, den_idx.clone())], |g, b| Ok(bidiffuser_terms(&m.den, g, &b[0], &m.batch)?.0))?;
    record(&mut out, "noise_prediction_mse", nd, res);
    let res = check_bundles(&[(&m.den.params, den_idx.clone())], |g, b| loss_unidiffuser(&m.den, g, &b[0], &m.batch))?;
    record(&mut out, "L_uni", nd, res);
    let res = check_bundles(&[(&m.den.params, den_idx.clone())], |g, b| loss_bidiffuser(&m.den, g, &b[0], &m.batch, 4.0))?;
    record(&mut out, "L_d", nd, res);

    let dec = m.llm(LlmVariant::DecoderOnly, 3)?;
    let enc = m.llm(LlmVariant::EncoderDecoder, 4)?;
    let proj = Projection::new(4, 8, 5);
    let all_proj: Vec<usize> = (0..proj.params.len()).collect();

    let ex = m.example(0, LlmVariant::DecoderOnly)?;
    let probes = [(&proj.params, all_proj.clone()), (&dec.params, pick(&dec.params, 4))];
    let res = check_bundles(&probes, |g, b| pre_align_loss(g, &proj, &b[0], &dec, &b[1], &ex))?;
    record(&mut out, "L_ITG", all_proj.len() + probes[1].1.len(), res);

    let batch = [m.example(0, LlmVariant::EncoderDecoder)?, m.example(1, LlmVariant::EncoderDecoder)?];
    let probes = [(&proj.params, all_proj.clone()), (&enc.params, pick(&enc.params, 4))];
    let n = all_proj.len() + probes[1].1.len();
    let res = check_bundles(&probes, |g, b| Ok(mid_align_losses(g, &proj, &b[0], &enc, &b[1], &batch)?.l_itdm))?;
    record(&mut out, "L_ITDM", n, res);
    let res = check_bundles(&probes, |g, b| Ok(mid_align_losses(g, &proj, &b[0], &enc, &b[1], &batch)?.l_mid))?;
    record(&mut out, "L_mid", n, res);

    let adapter = Adapter::new(4, 8, 6);
    let all_ada: Vec<usize> = (0..adapter.params.len()).collect();
    let fusion = FusionConfig::new(0.6)?;
    let vocab = &m.codec.vocab;
    let caption_ids = m.captions.iter().map(|c| vocab.tokenize(c)).collect::<Result<Vec<_>>>()?;
    let dp = &m.den.params;
    let res = check_bundles(&[(&adapter.params, all_ada.clone()), (dp, vec![])], |g, b| {
        let lp = dec.params.attach_frozen(g);
        let parts = DialogueParts { llm: &dec, adapter: &adapter, den: &m.den, codec: &m.codec, fusion };
        adapter_batch_loss(g, &parts, &lp, &b[0], &b[1], &caption_ids, &m.noise)
    })?;
    record(&mut out, "L_ada", all_ada.len(), res);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let photo = photo_dialogue(&m.captions[0], &mut rng);
    let chat = chat_dialogue(&mut rng);
    let one = ImageNoise::new(
        crate::denoiser::unstack(&m.noise.x0, 0).reshape(&[1, 4, 4])?,
        vec![m.noise.tx[0]],
        crate::denoiser::unstack(&m.noise.eps, 0).reshape(&[1, 4, 4])?,
        &m.sched,
    )?;
    for (llm, tag) in [(&dec, "decoder-only"), (&enc, "encoder-decoder")] {
        let lidx = pick(&llm.params, 4);
        let res = check_bundles(&[(&llm.params, lidx.clone())], |g, b| Ok(llm.loss_t2t(g, &b[0], vocab, &chat)?.loss))?;
        record(&mut out, &format!("L_t2t[{tag}]"), lidx.len(), res);
        let probes = [(&llm.params, lidx.clone()), (&adapter.params, all_ada.clone()), (dp, vec![])];
        let n = lidx.len() + all_ada.len();
        let parts = DialogueParts { llm, adapter: &adapter, den: &m.den, codec: &m.codec, fusion };
        let res = check_bundles(&probes, |g, b| Ok(loss_all(g, &parts, &b[0], &b[1], &b[2], &photo, &one)?.l_t2i))?;
        record(&mut out, &format!("L_t2i[{tag}]"), n, res);
        let res = check_bundles(&probes, |g, b| Ok(loss_all(g, &parts, &b[0], &b[1], &b[2], &photo, &one)?.l_all))?;
        record(&mut out, &format!("L_all[{tag}]"), n, res);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pick_covers_both_ends() {
        let mut pb = ParamBundle::new();
        for i in 0..10 {
            pb.add(format!("p{i}"), Tensor::zeros(&[1]));
        }
        assert_eq!(pick(&pb, 4), vec![0, 3, 6, 9]);
        assert_eq!(pick(&pb, 1), vec![0]);
    }
}
