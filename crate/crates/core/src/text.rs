//! Word-level vocabulary, the frozen surrogate text encoder that maps captions
//! into continuous text latents, and nearest-neighbour decoding of latents.

use crate::error::{Error, Result};
use crate::nn::sinusoidal;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const IMG_OPEN: &str = "<Img>";
pub const IMG_CLOSE: &str = "</Img>";
pub const IMAGE_PLACEHOLDER: &str = "<image>";

const SPECIALS: [&str; 6] = [PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, IMAGE_PLACEHOLDER];
/// Markers that are split out of words even without surrounding whitespace.
const INLINE_MARKERS: [&str; 3] = [IMG_OPEN, IMG_CLOSE, IMAGE_PLACEHOLDER];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Special tokens first (ids 0..6), then `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self { tokens: Vec::new(), ids: HashMap::new() };
        for w in SPECIALS.iter().copied().chain(words) {
            if !v.ids.contains_key(w) {
                v.ids.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    /// Vocabulary covering the caption grammar, instruction templates and
    /// synthetic dialogues.
    pub fn standard() -> Self {
        let mut words: Vec<String> = Vec::new();
        for text in crate::data::grammar_texts().iter().chain(crate::llm::template::template_texts().iter()) {
            for piece in split_pieces(text) {
                words.push(piece.to_string());
            }
        }
        Self::new(words.iter().map(String::as_str))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Compatibility(format!("vocabulary must start with special token {s}")));
            }
        }
        let ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Compatibility("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn img_open(&self) -> usize {
        3
    }

    pub fn img_close(&self) -> usize {
        4
    }

    pub fn image_placeholder(&self) -> usize {
        5
    }

    /// Whitespace tokenization with `<Img>`, `</Img>` and `<image>` split out
    /// as single tokens wherever they occur.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for piece in split_pieces(text) {
            match self.id(piece) {
                Some(id) => ids.push(id),
                None => unknown.push(piece.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownWords(unknown));
        }
        Ok(ids)
    }

    /// Joins tokens with single spaces, except that no space follows `<Img>`
    /// or `<image>` and none precedes `</Img>`.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev: Option<usize> = None;
        for &id in ids {
            let tok = self.token(id).ok_or(Error::OutOfRange { index: id, size: self.len() })?;
            if let Some(p) = prev {
                let glued = p == self.img_open() || p == self.image_placeholder() || id == self.img_close();
                if !glued {
                    out.push(' ');
                }
            }
            out.push_str(tok);
            prev = Some(id);
        }
        Ok(out)
    }
}

/// Whitespace-separated words with inline markers split out.
pub(crate) fn split_pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        while !rest.is_empty() {
            let next = INLINE_MARKERS.iter().filter_map(|m| rest.find(m).map(|at| (at, *m))).min();
            match next {
                Some((0, m)) => {
                    out.push(&rest[..m.len()]);
                    rest = &rest[m.len()..];
                }
                Some((at, _)) => {
                    out.push(&rest[..at]);
                    rest = &rest[at..];
                }
                None => {
                    out.push(rest);
                    rest = "";
                }
            }
        }
    }
    out
}

/// Frozen stand-in for a contrastively trained text encoder.
///
/// Every token gets a fixed embedding derived from a hash of the token string
/// and the encoder seed; a caption's latent is `rows` overlapping mean-pools of
/// `embedding + sinusoidal position` over its tokens. Nothing here is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    rows: usize,
    dim: usize,
    seed: u64,
    table: Vec<Tensor>,
}

impl TextEncoder {
    pub fn new(vocab: &Vocab, rows: usize, dim: usize, seed: u64) -> Self {
        let table = vocab.tokens().iter().map(|tok| Self::embed_token(tok, dim, seed)).collect();
        Self { rows, dim, seed, table }
    }

    fn embed_token(token: &str, dim: usize, seed: u64) -> Tensor {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(bytes);
        Tensor::randn(&[dim], 1.0, &mut rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding(&self, id: usize) -> Option<&Tensor> {
        self.table.get(id)
    }

    /// Token window pooled into latent row `r` for a caption of `n` tokens.
    pub fn window(&self, r: usize, n: usize) -> std::ops::Range<usize> {
        let start = r * n / self.rows;
        let end = ((r + 1) * n).div_ceil(self.rows);
        start..end.max(start + 1).min(n)
    }

    /// `[rows, dim]` latent of a token sequence. The empty sequence maps to zeros.
    pub fn encode(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.table.len()) {
            return Err(Error::OutOfRange { index: bad, size: self.table.len() });
        }
        let mut out = Tensor::zeros(&[self.rows, self.dim]);
        if ids.is_empty() {
            return Ok(out);
        }
        let positions: Vec<f64> = (0..ids.len()).map(|p| p as f64).collect();
        let pos = sinusoidal(&positions, self.dim);
        for r in 0..self.rows {
            let win = self.window(r, ids.len());
            let count = win.len() as f64;
            let row = &mut out.data_mut()[r * self.dim..(r + 1) * self.dim];
            for p in win {
                let emb = self.table[ids[p]].data();
                for (j, x) in row.iter_mut().enumerate() {
                    *x += (emb[j] + pos.row(p)[j]) / count;
                }
            }
        }
        Ok(out)
    }
}

/// Vocabulary plus frozen encoder: everything needed to move between caption
/// strings and text latents.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCodec {
    pub vocab: Vocab,
    pub encoder: TextEncoder,
}

impl TextCodec {
    pub fn new(vocab: Vocab, rows: usize, dim: usize, seed: u64) -> Self {
        let encoder = TextEncoder::new(&vocab, rows, dim, seed);
        Self { vocab, encoder }
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(Vocab::standard(), 4, 32, seed)
    }

    pub fn encode_caption(&self, caption: &str) -> Result<Tensor> {
        self.encoder.encode(&self.vocab.tokenize(caption)?)
    }
}

/// Known captions with their latents; decoding is a metric projection onto it.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionCodebook {
    captions: Vec<String>,
    latents: Vec<Tensor>,
}

impl CaptionCodebook {
    pub fn from_latents(captions: Vec<String>, latents: Vec<Tensor>) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Empty("caption codebook".into()));
        }
        if captions.len() != latents.len() {
            return Err(Error::Shape("codebook needs one latent per caption".into()));
        }
        let book = Self { captions, latents };
        if book.min_pairwise_distance() <= 0.0 {
            return Err(Error::Contract("two codebook captions share a latent".into()));
        }
        Ok(book)
    }

    pub fn build(captions: &[String], codec: &TextCodec) -> Result<Self> {
        let latents = captions.iter().map(|c| codec.encode_caption(c)).collect::<Result<Vec<_>>>()?;
        Self::from_latents(captions.to_vec(), latents)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn latent(&self, i: usize) -> &Tensor {
        &self.latents[i]
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.latents.len() {
            for j in i + 1..self.latents.len() {
                best = best.min(distance(&self.latents[i], &self.latents[j]));
            }
        }
        best
    }

    /// Index of the nearest latent; ties go to the lowest index.
    pub fn nearest(&self, latent: &Tensor) -> Result<usize> {
        if self.latents.is_empty() {
            return Err(Error::Empty("caption codebook".into()));
        }
        if latent.numel() != self.latents[0].numel() {
            return Err(Error::Shape(format!("latent of shape {:?} does not match codebook", latent.shape())));
        }
        let mut best = (0, f64::INFINITY);
        for (i, l) in self.latents.iter().enumerate() {
            let d = sq_distance(l, latent);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<&str> {
        Ok(&self.captions[self.nearest(latent)?])
    }
}

fn sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &Tensor, b: &Tensor) -> f64 {
    sq_distance(a, b).sqrt()
}
