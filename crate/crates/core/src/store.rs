//! Component checkpoints inside a run directory.

use crate::adapter::{Adapter, FusionConfig};
use crate::alignment::{Manner, Projection};
use crate::checkpoint::Checkpoint;
use crate::denoiser::JointDenoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::llm::{Llm, LlmVariant};
use crate::stages::{new_denoiser, new_llm, World};
use std::path::{Path, PathBuf};

pub const DENOISER: &str = "denoiser.ckpt";
pub const LLM: &str = "llm.ckpt";
pub const PROJECTION: &str = "projection.ckpt";
pub const ADAPTER: &str = "adapter.ckpt";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn report_path(&self, command: &str) -> PathBuf {
        self.root.join("reports").join(format!("{command}.json"))
    }

    fn load(&self, name: &str) -> Result<Checkpoint> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Compatibility(format!("missing checkpoint {}", p.display())));
        }
        Checkpoint::load(&p)
    }

    pub fn save_denoiser(&self, den: &JointDenoiser, sched: &NoiseSchedule, stage: &str, extra: &[(&str, String)]) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(stage, den.params.clone())
            .with("T", sched.steps())
            .with("beta_start", sched.beta(1))
            .with("beta_end", sched.beta(sched.steps()))
            .with("image_size", den.config.image_size);
        for (k, v) in extra {
            c = c.with(k, v);
        }
        c.save(&self.path(DENOISER))?;
        Ok(c)
    }

    /// The denoiser and its schedule; `stages` lists acceptable stage tags.
    pub fn load_denoiser(&self, world: &World, stages: &[&str]) -> Result<(JointDenoiser, NoiseSchedule, Checkpoint)> {
        let c = self.load(DENOISER)?;
        c.require_stage(stages)?;
        let sched = NoiseSchedule::linear(c.meta_parse("T")?, c.meta_parse("beta_start")?, c.meta_parse("beta_end")?)?;
        if c.meta_parse::<usize>("image_size")? != world.spec.image_size {
            return Err(Error::Compatibility("denoiser image size does not match the dataset".into()));
        }
        let mut den = new_denoiser(world, &sched, 0)?;
        den.params.load_values(&c.params)?;
        Ok((den, sched, c))
    }

    pub fn save_llm(&self, llm: &Llm, world: &World, stage: &str) -> Result<Checkpoint> {
        let vocab = serde_json::to_string(world.codec.vocab.tokens())?;
        let c = Checkpoint::new(stage, llm.params.clone()).with("variant", llm.variant()).with("vocab", vocab);
        c.save(&self.path(LLM))?;
        Ok(c)
    }

    pub fn load_llm(&self, world: &World, stages: &[&str]) -> Result<(Llm, Checkpoint)> {
        let c = self.load(LLM)?;
        c.require_stage(stages)?;
        let tokens: Vec<String> = serde_json::from_str(c.meta("vocab")?)?;
        if tokens != world.codec.vocab.tokens() {
            return Err(Error::Compatibility("LLM vocabulary differs from the tokenizer".into()));
        }
        let variant: LlmVariant = c.meta_parse("variant")?;
        let mut llm = new_llm(world, variant, 0)?;
        llm.params.load_values(&c.params)?;
        Ok((llm, c))
    }

    pub fn save_projection(&self, proj: &Projection, manner: Manner) -> Result<Checkpoint> {
        let stage = match manner {
            Manner::Pre => "align-pre",
            Manner::Mid => "align-mid",
        };
        let c = Checkpoint::new(stage, proj.params.clone()).with("manner", manner);
        c.save(&self.path(PROJECTION))?;
        Ok(c)
    }

    pub fn load_projection(&self) -> Result<(Projection, Checkpoint)> {
        let c = self.load(PROJECTION)?;
        c.require_stage(&["align-pre", "align-mid"])?;
        let w = c.params.get("proj.weight").ok_or_else(|| Error::Compatibility("projection weight missing".into()))?;
        let mut proj = Projection::new(w.value.shape()[0], w.value.shape()[1], 0);
        proj.params.load_values(&c.params)?;
        Ok((proj, c))
    }

    pub fn save_adapter(&self, adapter: &Adapter, fusion: FusionConfig, stage: &str) -> Result<Checkpoint> {
        let c = Checkpoint::new(stage, adapter.params.clone()).with("lambda", fusion.lambda);
        c.save(&self.path(ADAPTER))?;
        Ok(c)
    }

    pub fn load_adapter(&self, world: &World, llm_width: usize, stages: &[&str]) -> Result<(Adapter, FusionConfig, Checkpoint)> {
        let c = self.load(ADAPTER)?;
        c.require_stage(stages)?;
        let mut a = Adapter::new(world.codec.encoder.dim(), llm_width, 0);
        a.params.load_values(&c.params)?;
        let fusion = FusionConfig::new(c.meta_parse("lambda")?)?;
        Ok((a, fusion, c))
    }
}
