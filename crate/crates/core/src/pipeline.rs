//! End-to-end composition: image→text through the projection and LLM,
//! text→image through the guided denoiser, and dialogue with image replies.

use crate::adapter::{caption_hidden, fuse_tensors, Adapter, FusionConfig};
use crate::alignment::{diffusion_image_to_text_latent, Projection};
use crate::denoiser::{stack, JointDenoiser};
use crate::diffusion::{sample_loop, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::llm::template::{render_caption, render_question};
use crate::llm::{parse_img_spans, DialogueSample, Llm, LlmVariant};
use crate::tensor::{Graph, Tensor};
use crate::text::TextCodec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MAX_ANSWER_TOKENS: usize = 16;
pub const MAX_REPLY_TOKENS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub enum I2tTask {
    /// Captioning with one of the fixed caption queries.
    Caption {
        query: usize,
    },
    Vqa {
        question: String,
    },
}

/// Everything needed to replay a pipeline call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CallLog {
    pub template: Option<String>,
    pub conditioning_text: Vec<String>,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, String>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DialogueReply {
    pub raw: String,
    pub text: String,
    pub caption: Option<String>,
    pub image: Option<Tensor>,
    pub log: CallLog,
}

/// A trained denoiser plus whichever language-side components are present.
#[derive(Clone, Debug)]
pub struct System {
    pub codec: TextCodec,
    pub sched: NoiseSchedule,
    pub den: JointDenoiser,
    pub proj: Option<Projection>,
    pub llm: Option<Llm>,
    pub adapter: Option<Adapter>,
    pub fusion: FusionConfig,
    pub guide: GuidanceConfig,
}

impl System {
    fn hashes(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("denoiser".to_string(), self.den.params.fingerprint());
        if let Some(p) = &self.proj {
            m.insert("projection".to_string(), p.params.fingerprint());
        }
        if let Some(l) = &self.llm {
            m.insert("llm".to_string(), l.params.fingerprint());
        }
        if let Some(a) = &self.adapter {
            m.insert("adapter".to_string(), a.params.fingerprint());
        }
        m
    }

    fn llm(&self) -> Result<&Llm> {
        self.llm.as_ref().ok_or_else(|| Error::Compatibility("this call needs a language model checkpoint".into()))
    }

    /// Captions or answers a question about a `[H, W]` image.
    pub fn image_to_text(&self, image: &Tensor, task: &I2tTask, seed: u64) -> Result<(String, CallLog)> {
        let llm = self.llm()?;
        let proj = self.proj.as_ref().ok_or_else(|| Error::Compatibility("image-to-text needs a projection checkpoint".into()))?;
        if proj.out_dim() != llm.width() || proj.in_dim() != self.den.config.text_dim {
            return Err(Error::Compatibility("projection widths do not match the denoiser and LLM".into()));
        }
        let prompt = match task {
            I2tTask::Caption { query } => render_caption(*query, llm.variant())?,
            I2tTask::Vqa { question } => render_question("vqa", question, llm.variant())?,
        };
        let img = image.clone().reshape(&[1, image.shape()[0], image.shape()[1]])?;
        let lat = diffusion_image_to_text_latent(&self.den, &img, &self.sched, seed)?;
        let c = &self.den.config;
        let lat = lat.reshape(&[c.text_rows, c.text_dim])?;
        let vocab = &self.codec.vocab;
        let out = describe_latent(proj, llm, &vocab.tokenize(&prompt)?, &lat)?;
        let log = CallLog { template: Some(prompt), seed, checkpoints: self.hashes(), ..Default::default() };
        Ok((vocab.detokenize(&out)?, log))
    }

    /// Diffusion condition `[rows, dim]` for caption ids, fused with the
    /// adapter output when `hidden` is given.
    fn condition(&self, ids: &[usize], hidden: Option<Tensor>) -> Result<Tensor> {
        let clip = self.codec.encoder.encode(ids)?;
        let (Some(adapter), Some(hidden)) = (&self.adapter, hidden) else {
            return Ok(clip);
        };
        let mut g = Graph::new();
        let ap = adapter.params.attach_frozen(&mut g);
        let c = g.constant(clip.clone());
        let h = g.constant(hidden);
        let sur = adapter.forward(&mut g, &ap, c, h)?;
        fuse_tensors(g.value(sur), &clip, self.fusion.lambda)
    }

    fn caption_condition(&self, caption: &str, use_adapter: bool) -> Result<Tensor> {
        let ids = self.codec.vocab.tokenize(caption)?;
        let hidden = match (use_adapter, &self.adapter) {
            (true, Some(_)) => {
                let llm = self.llm()?;
                let mut g = Graph::new();
                let lp = llm.params.attach_frozen(&mut g);
                let h = caption_hidden(&mut g, llm, &lp, self.codec.vocab.bos(), &ids)?;
                Some(g.value(h).clone())
            }
            (true, None) => return Err(Error::Compatibility("the adapter path needs an adapter checkpoint".into())),
            (false, _) => None,
        };
        self.condition(&ids, hidden)
    }

    fn sample_images(&self, conds: &[Tensor], seed: u64) -> Result<Tensor> {
        let c = &self.den.config;
        let cond = stack(&conds.iter().collect::<Vec<_>>())?;
        let shape = [conds.len(), c.image_size, c.image_size];
        let den = &self.den;
        let mut f = |x: &Tensor, t: usize, cond: Option<(&Tensor, usize)>| match cond {
            Some((y, tc)) => den.eps_image(x, t, y, tc),
            None => Err(Error::Config("text-to-image sampling needs a condition; use the max-noise unconditional mode".into())),
        };
        sample_loop(&mut f, Some(&cond), &shape, &self.sched, self.guide, seed)
    }

    /// Guided images `[B, H, W]` for a batch of descriptions. Without the
    /// adapter the condition is the raw text encoding.
    pub fn text_to_image(&self, descriptions: &[String], seed: u64, use_adapter: bool) -> Result<(Tensor, CallLog)> {
        if descriptions.is_empty() {
            return Err(Error::Empty("descriptions".into()));
        }
        let conds = descriptions.iter().map(|d| self.caption_condition(d, use_adapter)).collect::<Result<Vec<_>>>()?;
        let images = self.sample_images(&conds, seed)?;
        let log = CallLog { conditioning_text: descriptions.to_vec(), seed, checkpoints: self.hashes(), ..Default::default() };
        Ok((images, log))
    }

    /// Greedy reply to the dialogue turns; the first `<Img>` span of the reply
    /// is rendered with the adapter reading the reply's own hidden states.
    pub fn dialogue_respond(&self, history: &DialogueSample, seed: u64) -> Result<DialogueReply> {
        let llm = self.llm()?;
        let vocab = &self.codec.vocab;
        let prompt = history.prompt(llm.variant())?;
        let ids = vocab.tokenize(&prompt)?;
        let memory = match llm.variant() {
            LlmVariant::DecoderOnly => None,
            LlmVariant::EncoderDecoder => {
                let mut g = Graph::new();
                let lp = llm.params.attach_frozen(&mut g);
                let m = llm.encode(&mut g, &lp, &ids)?;
                Some(g.value(m).clone())
            }
        };
        let dec_prompt: &[usize] = if memory.is_some() { &[] } else { &ids };
        let gen = llm.generate_greedy(dec_prompt, None, memory.as_ref(), MAX_REPLY_TOKENS)?;
        let raw = vocab.detokenize(&gen)?;
        let mut log = CallLog { template: Some(prompt), seed, checkpoints: self.hashes(), ..Default::default() };
        let (text, captions) = match parse_img_spans(&raw) {
            Ok(parsed) => parsed,
            Err(e) => {
                log.warning = Some(e.to_string());
                return Ok(DialogueReply { text: raw.clone(), raw, caption: None, image: None, log });
            }
        };
        let Some(caption) = captions.into_iter().next() else {
            return Ok(DialogueReply { raw, text, caption: None, image: None, log });
        };
        let open = gen.iter().position(|&i| i == vocab.img_open()).expect("parsed span has a marker");
        let span: Vec<usize> = gen[open + 1..].iter().copied().take_while(|&i| i != vocab.img_close()).collect();
        let hidden = if self.adapter.is_some() && !span.is_empty() {
            let mut g = Graph::new();
            let lp = llm.params.attach_frozen(&mut g);
            let mut seq = vec![vocab.bos()];
            seq.extend_from_slice(dec_prompt);
            seq.extend_from_slice(&gen);
            let mem = memory.map(|m| g.constant(m));
            let (h, _) = llm.forward(&mut g, &lp, &seq, None, mem)?;
            let rows = g.slice_rows(h, 1 + dec_prompt.len() + open + 1, span.len())?;
            Some(g.value(rows).clone())
        } else {
            None
        };
        let cond = self.condition(&span, hidden)?;
        let images = self.sample_images(&[cond], seed)?;
        let c = &self.den.config;
        let image = images.reshape(&[c.image_size, c.image_size])?;
        log.conditioning_text.push(caption.clone());
        Ok(DialogueReply { raw, text, caption: Some(caption), image: Some(image), log })
    }
}

/// Greedy answer ids for a `[rows, dim]` text latent under the rendered
/// instruction `prompt_ids`.
pub fn describe_latent(proj: &Projection, llm: &Llm, prompt_ids: &[usize], latent: &Tensor) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let pp = proj.params.attach_frozen(&mut g);
    let lv = g.constant(latent.clone());
    match llm.variant() {
        LlmVariant::DecoderOnly => {
            let rows = proj.forward(&mut g, &pp, lv)?;
            let prefix = g.value(rows).clone();
            llm.generate_greedy(prompt_ids, Some(&prefix), None, MAX_ANSWER_TOKENS)
        }
        LlmVariant::EncoderDecoder => {
            let lp = llm.params.attach_frozen(&mut g);
            let d = proj.pooled(&mut g, &pp, lv)?;
            let mem = llm.memory(&mut g, &lp, d, prompt_ids)?;
            let memory = g.value(mem).clone();
            llm.generate_greedy(&[], None, Some(&memory), MAX_ANSWER_TOKENS)
        }
    }
}

/// Portable graymap (binary P5) with `[-1, 1]` mapped to `0..=255`.
pub fn to_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image.dims2();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8));
    Ok(out)
}
