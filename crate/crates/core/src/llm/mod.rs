//! Small transformer language models: a causal decoder-only variant and an
//! encoder-decoder variant whose decoder cross-attends to a memory sequence.

pub mod spans;
pub mod template;

use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Block, Bound, LayerNorm, Linear, ParamBundle};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

pub use spans::parse_img_spans;
pub use template::render_template;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LlmVariant {
    DecoderOnly,
    EncoderDecoder,
}

impl FromStr for LlmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder-only" => Ok(Self::DecoderOnly),
            "encoder-decoder" => Ok(Self::EncoderDecoder),
            _ => Err(Error::Config(format!("unknown LLM variant {s:?}"))),
        }
    }
}

impl fmt::Display for LlmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DecoderOnly => "decoder-only",
            Self::EncoderDecoder => "encoder-decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmConfig {
    pub vocab: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub variant: LlmVariant,
}

impl LlmConfig {
    pub fn toy(vocab: usize, variant: LlmVariant) -> Self {
        Self { vocab, width: 64, blocks: 4, heads: 4, mlp_hidden: 128, max_len: 64, variant }
    }
}

/// A dialogue history and the response to it. The response may share an
/// image through an `<Img>caption</Img>` span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub turns: Vec<(String, String)>,
    pub target: String,
}

impl DialogueSample {
    /// A history of one user message awaiting a reply.
    pub fn from_user(message: &str) -> Self {
        Self { turns: vec![("A".into(), message.into())], target: String::new() }
    }

    pub fn history(&self) -> String {
        template::render_history(&self.turns)
    }

    pub fn prompt(&self, variant: LlmVariant) -> Result<String> {
        let history = self.history();
        template::render_template("dialogue", &[("history", history.as_str())].into(), variant)
    }

    /// Captions shared in the target; errors on unbalanced markers.
    pub fn captions(&self) -> Result<Vec<String>> {
        Ok(parse_img_spans(&self.target)?.1)
    }
}

/// Teacher-forced pass over `[BOS] prompt target [EOS]`.
pub struct SequencePass {
    pub loss: Var,
    /// `[len, width]` final hidden states.
    pub hidden: Var,
    /// Row of `hidden` holding the first target token.
    pub target_offset: usize,
}

#[derive(Clone, Debug)]
pub struct Llm {
    pub config: LlmConfig,
    pub params: ParamBundle,
    tok: usize,
    pos: usize,
    encoder: Vec<Block>,
    enc_ln: Option<LayerNorm>,
    decoder: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    bos: usize,
    eos: usize,
    placeholder: usize,
}

impl Llm {
    pub fn new(config: LlmConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        if config.vocab != vocab.len() {
            return Err(Error::Config(format!("LLM vocab {} does not match tokenizer vocab {}", config.vocab, vocab.len())));
        }
        if !config.width.is_multiple_of(config.heads) {
            return Err(Error::Config("LLM width must be divisible by heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBundle::new();
        let w = config.width;
        let tok = pb.add("llm.tok_emb", Tensor::randn(&[config.vocab, w], 1.0, &mut rng));
        let pos = pb.add("llm.pos_emb", sinusoidal(&(0..config.max_len).map(|p| p as f64).collect::<Vec<_>>(), w));
        let enc_dec = config.variant == LlmVariant::EncoderDecoder;
        let mut encoder = Vec::new();
        let mut enc_ln = None;
        if enc_dec {
            for i in 0..config.blocks {
                encoder.push(Block::new(&mut pb, &format!("llm.enc{i}"), w, config.heads, config.mlp_hidden, false, &mut rng));
            }
            enc_ln = Some(LayerNorm::new(&mut pb, "llm.enc_ln", w));
        }
        let decoder = (0..config.blocks).map(|i| Block::new(&mut pb, &format!("llm.dec{i}"), w, config.heads, config.mlp_hidden, enc_dec, &mut rng)).collect();
        let ln_f = LayerNorm::new(&mut pb, "llm.ln_f", w);
        let head = Linear::new(&mut pb, "llm.head", w, config.vocab, true, 1.0, &mut rng);
        Ok(Self {
            config,
            params: pb,
            tok,
            pos,
            encoder,
            enc_ln,
            decoder,
            ln_f,
            head,
            bos: vocab.bos(),
            eos: vocab.eos(),
            placeholder: vocab.image_placeholder(),
        })
    }

    pub fn variant(&self) -> LlmVariant {
        self.config.variant
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab) {
            Some(&bad) => Err(Error::OutOfRange { index: bad, size: self.config.vocab }),
            None => Ok(()),
        }
    }

    /// Number of rows after expanding the `<image>` placeholder into `prefix_rows` rows.
    pub fn expanded_len(&self, ids: &[usize], prefix_rows: Option<usize>) -> usize {
        match prefix_rows {
            Some(k) if ids.contains(&self.placeholder) => ids.len() - 1 + k,
            _ => ids.len(),
        }
    }

    /// Token plus position embeddings. With `prefix`, the first `<image>`
    /// placeholder in `ids` is replaced by the prefix rows.
    pub fn embed(&self, g: &mut Graph, p: &Bound, ids: &[usize], prefix: Option<Var>) -> Result<Var> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        let table = p.var(self.tok);
        let x = match prefix {
            None => g.gather_rows(table, ids)?,
            Some(pre) => {
                let shape = g.shape(pre).to_vec();
                if shape.len() != 2 || shape[1] != self.config.width {
                    return Err(Error::Shape(format!("prefix embeddings of shape {shape:?} do not match LLM width {}", self.config.width)));
                }
                let at = ids
                    .iter()
                    .position(|&i| i == self.placeholder)
                    .ok_or_else(|| Error::Contract("prefix embeddings given but no <image> placeholder".into()))?;
                let mut parts = Vec::new();
                if at > 0 {
                    parts.push(g.gather_rows(table, &ids[..at])?);
                }
                parts.push(pre);
                if at + 1 < ids.len() {
                    parts.push(g.gather_rows(table, &ids[at + 1..])?);
                }
                g.concat_rows(&parts)?
            }
        };
        let n = g.shape(x)[0];
        if n > self.config.max_len {
            return Err(Error::Shape(format!("sequence of {n} exceeds max length {}", self.config.max_len)));
        }
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.gather_rows(p.var(self.pos), &positions)?;
        g.add(x, pe)
    }

    /// Bidirectional encoding `[len, width]`; encoder-decoder variant only.
    pub fn encode(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        let Some(ln) = &self.enc_ln else {
            return Err(Error::Config("encode requires the encoder-decoder variant".into()));
        };
        let mut x = self.embed(g, p, ids, None)?;
        for b in &self.encoder {
            x = b.forward(g, p, x, 1, false, None)?;
        }
        ln.forward(g, p, x)
    }

    /// Causal decoder pass returning `(hidden, logits)`. `memory` is required
    /// by the encoder-decoder variant and rejected by the decoder-only one.
    pub fn forward(&self, g: &mut Graph, p: &Bound, ids: &[usize], prefix: Option<Var>, memory: Option<Var>) -> Result<(Var, Var)> {
        match (self.config.variant, memory) {
            (LlmVariant::DecoderOnly, Some(_)) => return Err(Error::Config("decoder-only model takes no encoder memory".into())),
            (LlmVariant::EncoderDecoder, None) => return Err(Error::Config("encoder-decoder model needs encoder memory".into())),
            (_, Some(m)) if g.shape(m).last() != Some(&self.config.width) => {
                return Err(Error::Shape(format!("memory of shape {:?} does not match LLM width", g.shape(m))))
            }
            _ => {}
        }
        let mut x = self.embed(g, p, ids, prefix)?;
        for b in &self.decoder {
            x = b.forward(g, p, x, 1, true, memory)?;
        }
        let hidden = self.ln_f.forward(g, p, x)?;
        let logits = self.head.forward(g, p, hidden)?;
        Ok((hidden, logits))
    }

    /// Mean next-token NLL of `target` followed by EOS, given `[BOS] prompt`.
    pub fn sequence_pass(
        &self,
        g: &mut Graph,
        p: &Bound,
        prompt: &[usize],
        prefix: Option<Var>,
        target: &[usize],
        memory: Option<Var>,
    ) -> Result<SequencePass> {
        if target.is_empty() {
            return Err(Error::Empty("target sequence".into()));
        }
        let mut ids = Vec::with_capacity(prompt.len() + target.len() + 2);
        ids.push(self.bos);
        ids.extend_from_slice(prompt);
        let prefix_rows = prefix.map(|v| g.shape(v)[0]);
        let target_offset = self.expanded_len(&ids, prefix_rows);
        ids.extend_from_slice(target);
        ids.push(self.eos);
        let (hidden, logits) = self.forward(g, p, &ids, prefix, memory)?;
        let rows: Vec<usize> = (target_offset - 1..target_offset + target.len()).collect();
        let picked = g.gather_rows(logits, &rows)?;
        let mut labels = target.to_vec();
        labels.push(self.eos);
        let loss = g.cross_entropy(picked, &labels)?;
        Ok(SequencePass { loss, hidden, target_offset })
    }

    /// Image-grounded generation loss: the image embeddings replace the
    /// `<image>` placeholder inside the instruction.
    pub fn loss_itg(&self, g: &mut Graph, p: &Bound, image_embeds: Var, instruction: &[usize], target: &[usize]) -> Result<Var> {
        Ok(self.sequence_pass(g, p, instruction, Some(image_embeds), target, None)?.loss)
    }

    /// Dialogue loss over the full response, conditioned on the rendered
    /// history (read by the encoder in the encoder-decoder variant).
    pub fn loss_t2t(&self, g: &mut Graph, p: &Bound, vocab: &Vocab, dialogue: &DialogueSample) -> Result<SequencePass> {
        dialogue.captions()?;
        let prompt = vocab.tokenize(&dialogue.prompt(self.config.variant)?)?;
        let target = vocab.tokenize(&dialogue.target)?;
        match self.config.variant {
            LlmVariant::DecoderOnly => self.sequence_pass(g, p, &prompt, None, &target, None),
            LlmVariant::EncoderDecoder => {
                let memory = self.encode(g, p, &prompt)?;
                self.sequence_pass(g, p, &[], None, &target, Some(memory))
            }
        }
    }

    /// Greedy decoding after `[BOS] prompt`, stopping at EOS or `max_len` new
    /// tokens. Argmax ties go to the lowest id. EOS is not returned.
    pub fn generate_greedy(&self, prompt: &[usize], prefix: Option<&Tensor>, memory: Option<&Tensor>, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let mut ids = vec![self.bos];
        ids.extend_from_slice(prompt);
        let mut out = Vec::new();
        for _ in 0..max_len {
            let logits = self.next_logits(&ids, prefix, memory)?;
            let next = argmax(&logits);
            if next == self.eos {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Logits for the token following `ids` (which must include BOS).
    pub fn next_logits(&self, ids: &[usize], prefix: Option<&Tensor>, memory: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let pre = prefix.map(|t| g.constant(t.clone()));
        let mem = memory.map(|t| g.constant(t.clone()));
        let (_, logits) = self.forward(&mut g, &p, ids, pre, mem)?;
        let v = g.value(logits);
        let n = v.shape()[0];
        Ok(v.row(n - 1).to_vec())
    }

    /// Encoder memory for the encoder-decoder variant: `head_rows` followed by
    /// the encoding of `instruction`.
    pub fn memory(&self, g: &mut Graph, p: &Bound, head_rows: Var, instruction: &[usize]) -> Result<Var> {
        let enc = self.encode(g, p, instruction)?;
        g.concat_rows(&[head_rows, enc])
    }

    /// Mean-pooled encoding `[1, width]` of a caption.
    pub fn pooled_encoding(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        let enc = self.encode(g, p, ids)?;
        Ok(g.mean_rows(enc))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
