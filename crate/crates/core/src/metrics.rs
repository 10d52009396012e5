//! Toy-FID, BLEU and perplexity.

use crate::error::{Error, Result};
use crate::llm::{Llm, LlmVariant};
use crate::tensor::{Graph, Tensor};
use crate::text::Vocab;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub use crate::alignment::{alignment_metrics, AlignmentMetrics};

pub const FID_FEATURES: usize = 16;
pub const FID_SEED: u64 = 0x05ee_df1d;
const FID_REG: f64 = 1e-6;

/// Fixed `[pixels, 16]` random projection, scaled by `1/√pixels`.
pub fn fid_projection(pixels: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(FID_SEED);
    Tensor::randn(&[pixels, FID_FEATURES], 1.0 / (pixels as f64).sqrt(), &mut rng)
}

fn features(images: &[Tensor], proj: &Tensor) -> Result<DMatrix<f64>> {
    let pixels = proj.shape()[0];
    let mut out = DMatrix::zeros(images.len(), FID_FEATURES);
    for (i, img) in images.iter().enumerate() {
        if img.numel() != pixels {
            return Err(Error::Shape(format!("image of {} pixels, expected {pixels}", img.numel())));
        }
        for (p, &x) in img.data().iter().enumerate() {
            for f in 0..FID_FEATURES {
                out[(i, f)] += x * proj.data()[p * FID_FEATURES + f];
            }
        }
    }
    Ok(out)
}

/// Fréchet distance between Gaussians fit to the random-projection features
/// of two image sets.
pub fn toy_fid(real: &[Tensor], generated: &[Tensor]) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Empty("toy FID needs at least two images per set".into()));
    }
    let proj = fid_projection(real[0].numel());
    frechet_distance(&features(real, &proj)?, &features(generated, &proj)?)
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_REG;
    }
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 {
            return Err(Error::Numerical(format!("covariance product has eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` over rows of two feature matrices.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Shape("feature sets must share width and hold two rows each".into()));
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    // tr((Σ₁Σ₂)^{1/2}) = tr((√Σ₁ Σ₂ √Σ₁)^{1/2}), and the latter is symmetric.
    let r1 = psd_sqrt(&s1)?;
    let cross = psd_sqrt(&(&r1 * &s2 * &r1))?;
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

fn ngrams(words: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights over 1..=`max_n`, clipped counts and
/// brevity penalty; one reference per candidate.
pub fn bleu(candidates: &[String], references: &[String], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("reference set".into()));
    }
    if candidates.len() != references.len() || max_n == 0 {
        return Err(Error::Shape(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let cw: Vec<&str> = c.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        c_len += cw.len();
        r_len += rw.len();
        for n in 1..=max_n {
            let cg = ngrams(&cw, n);
            let rg = ngrams(&rw, n);
            total[n - 1] += cg.values().sum::<usize>();
            matched[n - 1] += cg.iter().map(|(g, &k)| k.min(rg.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / max_n as f64;
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// `exp` of the mean next-token NLL over every sentence token plus EOS,
/// each sentence starting from BOS.
pub fn perplexity(llm: &Llm, vocab: &Vocab, corpus: &[String]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("perplexity corpus".into()));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for s in corpus {
        let ids = vocab.tokenize(s)?;
        let mut g = Graph::new();
        let p = llm.params.attach_frozen(&mut g);
        let memory = match llm.variant() {
            LlmVariant::DecoderOnly => None,
            LlmVariant::EncoderDecoder => Some(llm.encode(&mut g, &p, &[vocab.bos()])?),
        };
        let pass = llm.sequence_pass(&mut g, &p, &[], None, &ids, memory)?;
        let n = ids.len() + 1;
        nll += g.value(pass.loss).item()? * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LlmConfig;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn fid_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Tensor> = (0..40).map(|_| Tensor::randn(&[16, 16], 1.0, &mut rng)).collect();
        let b: Vec<Tensor> = (0..40).map(|_| Tensor::randn(&[16, 16], 0.5, &mut rng).map(|v| v + 0.3)).collect();
        assert!(toy_fid(&a, &a).unwrap().abs() < 1e-8);
        let (ab, ba) = (toy_fid(&a, &b).unwrap(), toy_fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab > 0.0);
        assert!(toy_fid(&a[..1], &b).is_err());
    }

    #[test]
    fn frechet_matches_closed_form_for_gaussians() {
        // N(μ₁, diag(σ₁²)) vs N(μ₂, diag(σ₂²)) has distance ‖μ₁−μ₂‖² + Σ(σ₁−σ₂)².
        let d = 16;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = |mu: f64, sd: f64, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(n, d, |_, j| {
                let z: f64 = StandardNormal.sample(rng);
                mu + (j as f64) * 0.05 + sd * (1.0 + 0.1 * j as f64) * z
            })
        };
        let a = sample(0.0, 1.0, &mut rng);
        let b = sample(0.5, 2.0, &mut rng);
        let want: f64 = (0..d).map(|j| 0.25 + (1.0 + 0.1 * j as f64).powi(2)).sum();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    }

    #[test]
    fn bleu_hand_counts() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let r = s(&["a big red square at center"]);
        assert_eq!(bleu(&r, &r, 2).unwrap(), 1.0);
        // Candidates "a red square" and "the cat the cat" against
        // "a big red square" and "the cat sat":
        // unigrams 3/3 + 4 clipped to 2 of 4 -> 5/7; bigrams 1/2 + 1/3 -> 2/5;
        // c = 7, r = 7 so no brevity penalty.
        let c = s(&["a red square", "the cat the cat"]);
        let r = s(&["a big red square", "the cat sat"]);
        let want = ((5.0f64 / 7.0) * (2.0 / 5.0)).sqrt();
        assert!((bleu(&c, &r, 2).unwrap() - want).abs() < 1e-12);
        // Shorter candidate: c = 3, r = 4.
        let want = (1.0f64 - 4.0 / 3.0).exp() * (1.0f64 * 0.5).sqrt();
        assert!((bleu(&s(&["a red square"]), &s(&["a big red square"]), 2).unwrap() - want).abs() < 1e-12);
        assert!(bleu(&[], &[], 2).is_err());
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let vocab = Vocab::standard();
        let mut llm = Llm::new(LlmConfig::toy(vocab.len(), LlmVariant::DecoderOnly), &vocab, 0).unwrap();
        for name in ["llm.head.weight", "llm.head.bias"] {
            let i = llm.params.params().iter().position(|p| p.name == name).unwrap();
            llm.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ppl = perplexity(&llm, &vocab, &["a big red square at center".into(), "hello".into()]).unwrap();
        assert!((ppl - vocab.len() as f64).abs() < 1e-9);
    }
}
