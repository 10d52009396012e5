//! Noise schedules, the forward corruption process, ancestral DDPM sampling
//! and classifier-free guidance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-timestep tables, indexed by `t` in `0..=T`. Index 0 is the clean-data
/// convention: β₀ = 0, ᾱ₀ = 1, σ₀ = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` (t = 1) to `beta_end` (t = T); σ_t = √β_t.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}")));
        }
        let mut beta = vec![0.0; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            *b = beta_start + (beta_end - beta_start) * frac;
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self { steps, beta, alpha, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::OutOfRange { index: t, size: self.steps + 1 });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncondMode {
    /// The unconditional branch receives no condition at all.
    NullToken,
    /// The condition is replaced by its fully noised (t = T) version.
    MaxNoiseCondition,
}

impl std::str::FromStr for UncondMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null-token" => Ok(Self::NullToken),
            "max-noise-condition" => Ok(Self::MaxNoiseCondition),
            other => Err(Error::Config(format!("unknown guidance.uncond_mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for UncondMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NullToken => "null-token",
            Self::MaxNoiseCondition => "max-noise-condition",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub uncond_mode: UncondMode,
}

impl GuidanceConfig {
    pub fn new(scale: f64, uncond_mode: UncondMode) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::Config(format!("guidance scale must be finite and >= 0, got {scale}")));
        }
        Ok(Self { scale, uncond_mode })
    }

    /// No guidance: only the conditional prediction is used.
    pub fn unguided() -> Self {
        Self { scale: 1.0, uncond_mode: UncondMode::MaxNoiseCondition }
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 2.0, uncond_mode: UncondMode::MaxNoiseCondition }
    }
}

fn check_same(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x₀ + √(1−ᾱ_t) · ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same("q_sample", x0, eps)?;
    sched.check_t(t)?;
    let a = sched.alpha_bar(t).sqrt();
    let b = (1.0 - sched.alpha_bar(t)).sqrt();
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Guided noise estimate `(1−s)·ε(∅) + s·ε(y)`, i.e. `ε(∅) + s·(ε(y) − ε(∅))`
/// written so both endpoints are reproduced exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    check_same("cfg_combine", eps_uncond, eps_cond)?;
    let data = eps_uncond.data().iter().zip(eps_cond.data()).map(|(u, c)| (1.0 - s) * u + s * c).collect();
    Tensor::new(eps_uncond.shape().to_vec(), data)
}

/// One ancestral step `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`, with no
/// noise added at t = 1.
pub fn ddpm_step(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    check_same("ddpm_step", x_t, eps_hat)?;
    check_same("ddpm_step", x_t, z)?;
    if t == 0 || t > sched.steps() {
        return Err(Error::OutOfRange { index: t, size: sched.steps() + 1 });
    }
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let sigma = if t > 1 { sched.sigma(t) } else { 0.0 };
    let data = x_t.data().iter().zip(eps_hat.data()).zip(z.data()).map(|((x, e), z)| (x - coef * e) * inv_sqrt_alpha + sigma * z).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// A noise predictor for the sampled modality.
///
/// `cond` is the conditioning tensor together with its own diffusion
/// timestep (0 for a clean condition), or `None` for a null condition.
pub trait Denoiser {
    fn predict(&mut self, x_t: &Tensor, t: usize, cond: Option<(&Tensor, usize)>) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Tensor, usize, Option<(&Tensor, usize)>) -> Result<Tensor>,
{
    fn predict(&mut self, x_t: &Tensor, t: usize, cond: Option<(&Tensor, usize)>) -> Result<Tensor> {
        self(x_t, t, cond)
    }
}

/// Ancestral sampling from pure noise of `shape`, optionally conditioned and
/// guided. Fixed `seed` gives bit-identical output.
pub fn sample_loop<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    condition: Option<&Tensor>,
    shape: &[usize],
    sched: &NoiseSchedule,
    guide: GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    let steps = sched.steps();
    let guided = condition.is_some() && guide.scale != 1.0;
    let uncond = match (guided, condition, guide.uncond_mode) {
        (true, Some(c), UncondMode::MaxNoiseCondition) => {
            let noise = Tensor::randn(c.shape(), 1.0, &mut rng);
            Some(q_sample(c, steps, &noise, sched)?)
        }
        _ => None,
    };
    for t in (1..=steps).rev() {
        let eps_c = denoiser.predict(&x, t, condition.map(|c| (c, 0)))?;
        if eps_c.shape() != shape {
            return Err(Error::Shape(format!("denoiser returned shape {:?}, expected {shape:?}", eps_c.shape())));
        }
        let eps = if guided {
            let eps_u = match &uncond {
                Some(noised) => denoiser.predict(&x, t, Some((noised, steps)))?,
                None => denoiser.predict(&x, t, None)?,
            };
            cfg_combine(&eps_u, &eps_c, guide.scale)?
        } else {
            eps_c
        };
        let z = Tensor::randn(shape, 1.0, &mut rng);
        x = ddpm_step(&x, &eps, t, sched, &z)?;
    }
    Ok(x)
}
