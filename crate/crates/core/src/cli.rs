//! The `mmgen` command line. Every command reads the run directory, writes
//! its artifacts there and saves a [`MetricReport`] under `reports/`.

use crate::adapter::{Adapter, FusionConfig};
use crate::alignment::{alignment_metrics, diffusion_image_to_text_latent, pooled_pairs, AlignConfig, Manner, Projection};
use crate::config::Config;
use crate::data::{dataset_hash, write_jsonl};
use crate::denoiser::{unstack, Objective};
use crate::diffusion::{GuidanceConfig, UncondMode};
use crate::error::{Error, Result};
use crate::llm::template::render_caption;
use crate::llm::{DialogueSample, Llm, LlmVariant};
use crate::metrics::{bleu, perplexity, toy_fid};
use crate::pipeline::{describe_latent, to_pgm, I2tTask, System};
use crate::report::MetricReport;
use crate::stages::*;
use crate::store::RunDir;
use crate::tensor::Tensor;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "mmgen", about = "Toy joint image-text diffusion with an LLM front end")]
pub struct Cli {
    /// Run directory holding checkpoints, outputs and reports.
    #[arg(long, global = true, default_value = "run")]
    pub run: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set joint.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset as JSON lines.
    GenData,
    /// Joint all-timestep pretraining of the denoiser.
    PretrainJoint,
    /// Bidirectional fine-tuning with clean conditions.
    FinetuneBidiffuser,
    /// Text-only pretraining of the language model.
    PretrainLlm,
    /// Train the projection between the diffusion text space and the LLM.
    Align {
        #[arg(long, value_enum)]
        manner: Option<MannerArg>,
        #[arg(long)]
        freeze_llm: Option<bool>,
    },
    /// Train the adapter against the frozen denoiser.
    TrainAdapter {
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Tune the LLM and adapter on photo-sharing dialogues.
    TrainDialogue,
    /// Run one pipeline task and write its outputs.
    Generate {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset image for caption and vqa.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Question (vqa), description (t2i) or user message (dialogue).
        #[arg(long)]
        prompt: Option<String>,
        /// Condition t2i on the raw text encoding only.
        #[arg(long)]
        no_adapter: bool,
    },
    /// Compute one metric over the run's checkpoints.
    Evaluate {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference checks of every loss.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MannerArg {
    Pre,
    Mid,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum Task {
    Caption,
    Vqa,
    T2i,
    Dialogue,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum Metric {
    /// Cosine and MSE between projected latents and LLM caption encodings.
    Alignment,
    /// Exact captions recovered through the diffusion text space alone.
    CaptionAccuracy,
    /// BLEU-1/2 of LLM captions.
    Bleu,
    /// LLM perplexity on captions and dialogue replies.
    Perplexity,
    /// Conditional denoising losses at clean conditions.
    Losses,
    /// Toy FID of text-to-image samples against the dataset.
    Fid,
}

const DENOISER_STAGES: &[&str] = &["unidiffuser", "bidiffuser"];
const LLM_STAGES: &[&str] = &["llm", "aligned", "dialogue"];
const ADAPTER_STAGES: &[&str] = &["adapter", "dialogue"];

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(report) => {
            for (k, v) in &report.metrics {
                println!("{k} = {v}");
            }
            for (k, v) in &report.notes {
                println!("{k}: {v}");
            }
            if cli_failed(&report) {
                1
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cli_failed(report: &MetricReport) -> bool {
    report.command == "gradcheck" && report.metrics.get("all_pass") != Some(&1.0)
}

struct Ctx {
    cfg: Config,
    world: World,
    dir: RunDir,
    seed: u64,
    report: MetricReport,
}

impl Ctx {
    fn new(cli: &Cli, command: &str) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for kv in &cli.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let world = World::from_config(&cfg)?;
        let dir = RunDir::create(&cli.run)?;
        let seed = cfg.get("seed")?;
        let mut report = MetricReport::new(command, seed);
        report.dataset_hash = dataset_hash(&world.data);
        report.config = cfg.entries().clone();
        Ok(Self { cfg, world, dir, seed, report })
    }

    fn checkpoint(&mut self, name: &str, hash: String) {
        self.report.checkpoints.insert(name.to_string(), hash);
    }

    fn finish(self) -> Result<MetricReport> {
        self.report.save(&self.dir.report_path(&self.report.command))?;
        Ok(self.report)
    }
}

fn tail_mean(xs: &[f64]) -> f64 {
    let n = xs.len().clamp(1, 50);
    xs[xs.len().saturating_sub(n)..].iter().sum::<f64>() / xs.len().min(n).max(1) as f64
}

fn guidance(cfg: &Config) -> Result<GuidanceConfig> {
    GuidanceConfig::new(cfg.get("guidance.scale")?, cfg.get_str("guidance.uncond_mode")?.parse::<UncondMode>()?)
}

pub fn run(cli: &Cli) -> Result<MetricReport> {
    match &cli.command {
        Command::GenData => gen_data(Ctx::new(cli, "gen-data")?),
        Command::PretrainJoint => pretrain_joint(Ctx::new(cli, "pretrain-joint")?),
        Command::FinetuneBidiffuser => finetune(Ctx::new(cli, "finetune-bidiffuser")?),
        Command::PretrainLlm => pretrain_language(Ctx::new(cli, "pretrain-llm")?),
        Command::Align { manner, freeze_llm } => {
            let mut ctx = Ctx::new(cli, "align")?;
            if let Some(m) = manner {
                ctx.cfg.set("align.manner", if matches!(m, MannerArg::Pre) { "pre" } else { "mid" })?;
            }
            if let Some(f) = freeze_llm {
                ctx.cfg.set("align.freeze_llm", &f.to_string())?;
            }
            ctx.report.config = ctx.cfg.entries().clone();
            align(ctx)
        }
        Command::TrainAdapter { lambda } => {
            let mut ctx = Ctx::new(cli, "train-adapter")?;
            if let Some(l) = lambda {
                ctx.cfg.set("adapter.lambda", &l.to_string())?;
                ctx.report.config = ctx.cfg.entries().clone();
            }
            train_adapter_cmd(ctx)
        }
        Command::TrainDialogue => train_dialogue_cmd(Ctx::new(cli, "train-dialogue")?),
        Command::Generate { task, seed, index, prompt, no_adapter } => {
            let mut ctx = Ctx::new(cli, &format!("generate-{}", task_name(*task)))?;
            ctx.report.seed = *seed;
            generate(ctx, *task, *seed, *index, prompt.clone(), !*no_adapter)
        }
        Command::Evaluate { metric, seed } => {
            let name = metric.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            let mut ctx = Ctx::new(cli, &format!("evaluate-{name}"))?;
            ctx.report.seed = *seed;
            evaluate(ctx, *metric, *seed)
        }
        Command::Gradcheck => gradcheck(Ctx::new(cli, "gradcheck")?),
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Caption => "caption",
        Task::Vqa => "vqa",
        Task::T2i => "t2i",
        Task::Dialogue => "dialogue",
    }
}

fn gen_data(mut ctx: Ctx) -> Result<MetricReport> {
    let path = ctx.dir.path("dataset.jsonl");
    write_jsonl(&path, &ctx.world.data)?;
    let mut min = f64::INFINITY;
    for (i, a) in ctx.world.data.iter().enumerate() {
        for b in &ctx.world.data[i + 1..] {
            min = min.min(crate::text::distance(&a.image, &b.image));
        }
    }
    ctx.report.metric("samples", ctx.world.len() as f64).metric("min_pairwise_l2", min);
    ctx.report.note("dataset", "dataset.jsonl");
    ctx.finish()
}

fn pretrain_joint(mut ctx: Ctx) -> Result<MetricReport> {
    let sched = schedule(&ctx.cfg)?;
    let mut den = new_denoiser(&ctx.world, &sched, ctx.seed)?;
    let spec = TrainSpec::from_config(&ctx.cfg, "joint", ctx.seed)?;
    let losses = train_denoiser(&mut den, &ctx.world, &sched, spec, Objective::Joint, |_, _| Ok(()))?;
    let alpha: f64 = ctx.cfg.get("bidiffuser.alpha")?;
    let (lx, ly) = conditional_losses(&den, &ctx.world, &sched, ctx.seed)?;
    ctx.report.metric("train_loss_tail", tail_mean(&losses)).metric("cond_loss_t2i", lx).metric("cond_loss_i2t", ly).metric("L_d", lx + alpha * ly);
    let seed = ctx.seed.to_string();
    let c = ctx.dir.save_denoiser(&den, &sched, "unidiffuser", &[("seed", seed), ("step", spec.steps.to_string())])?;
    ctx.checkpoint("denoiser", c.hash()?);
    ctx.finish()
}

fn finetune(mut ctx: Ctx) -> Result<MetricReport> {
    let (mut den, sched, _) = ctx.dir.load_denoiser(&ctx.world, &["unidiffuser"])?;
    let alpha: f64 = ctx.cfg.get("bidiffuser.alpha")?;
    let before = eval_ld(&den, &ctx.world, &sched, alpha, ctx.seed)?;
    let spec = TrainSpec::from_config(&ctx.cfg, "bidiffuser", ctx.seed.wrapping_add(1))?;
    let mut at_2000 = None;
    let (world, seed) = (&ctx.world, ctx.seed);
    let losses = train_denoiser(&mut den, world, &sched, spec, Objective::Bidirectional { alpha }, |step, m| {
        if step == 2000 {
            at_2000 = Some(eval_ld(m, world, &sched, alpha, seed)?);
        }
        Ok(())
    })?;
    let (lx, ly) = conditional_losses(&den, &ctx.world, &sched, ctx.seed)?;
    let after = lx + alpha * ly;
    ctx.report
        .metric("L_d_pretrained", before)
        .metric("L_d", after)
        .metric("L_d_reduction", 1.0 - after / before)
        .metric("cond_loss_t2i", lx)
        .metric("cond_loss_i2t", ly)
        .metric("train_loss_tail", tail_mean(&losses));
    if let Some(v) = at_2000 {
        ctx.report.metric("L_d_step_2000", v);
    }
    let meta = [("seed", ctx.seed.to_string()), ("step", spec.steps.to_string()), ("alpha", alpha.to_string())];
    let c = ctx.dir.save_denoiser(&den, &sched, "bidiffuser", &meta)?;
    ctx.checkpoint("denoiser", c.hash()?);
    ctx.finish()
}

fn pretrain_language(mut ctx: Ctx) -> Result<MetricReport> {
    let variant: LlmVariant = ctx.cfg.get_str("llm.variant")?.parse()?;
    let mut llm = new_llm(&ctx.world, variant, ctx.seed)?;
    let losses = pretrain_llm(&mut llm, &ctx.world, TrainSpec::from_config(&ctx.cfg, "llm", ctx.seed)?)?;
    ctx.report.metric("train_loss_tail", tail_mean(&losses));
    ctx.report.metric("perplexity", perplexity(&llm, &ctx.world.codec.vocab, &ctx.world.captions())?);
    let c = ctx.dir.save_llm(&llm, &ctx.world, "llm")?;
    ctx.checkpoint("llm", c.hash()?);
    ctx.finish()
}

/// Text latents sampled from every dataset image.
fn sampled_latents(ctx: &Ctx, den: &crate::denoiser::JointDenoiser, sched: &crate::diffusion::NoiseSchedule, seed: u64) -> Result<Vec<Tensor>> {
    let lat = diffusion_image_to_text_latent(den, &ctx.world.all_images()?, sched, seed)?;
    Ok((0..ctx.world.len()).map(|i| unstack(&lat, i)).collect())
}

fn caption_bleu(world: &World, proj: &Projection, llm: &Llm, latents: &[Tensor]) -> Result<(f64, f64)> {
    let vocab = &world.codec.vocab;
    let prompt = vocab.tokenize(&render_caption(0, llm.variant())?)?;
    let cands = latents.iter().map(|l| vocab.detokenize(&describe_latent(proj, llm, &prompt, l)?)).collect::<Result<Vec<_>>>()?;
    let refs = world.captions();
    Ok((bleu(&cands, &refs, 1)?, bleu(&cands, &refs, 2)?))
}

fn align(mut ctx: Ctx) -> Result<MetricReport> {
    let (den, sched, dc) = ctx.dir.load_denoiser(&ctx.world, &["bidiffuser"])?;
    let (mut llm, _) = ctx.dir.load_llm(&ctx.world, &["llm"])?;
    let manner = alignment_manner(&ctx.cfg)?;
    let freeze: bool = ctx.cfg.get("align.freeze_llm")?;
    let latents = sampled_latents(&ctx, &den, &sched, ctx.seed)?;
    let examples = match manner {
        Manner::Pre => align_examples(&ctx.world, &latents, llm.variant(), ctx.seed)?,
        Manner::Mid => caption_examples(&ctx.world, &latents, llm.variant(), ctx.seed)?,
    };
    let mut proj = Projection::new(den.config.text_dim, llm.width(), ctx.seed);
    let enc_dec = llm.variant() == LlmVariant::EncoderDecoder;
    let captions = caption_examples(&ctx.world, &latents, llm.variant(), ctx.seed)?;
    if enc_dec {
        let (a, b) = pooled_pairs(&proj, &llm, &captions)?;
        let m = alignment_metrics(&a, &b)?;
        ctx.report.metric("init_avg_cosine", m.avg_cosine).metric("init_avg_mse", m.avg_mse);
    }
    let cfg = AlignConfig {
        manner,
        train_llm: manner == Manner::Pre && !freeze,
        steps: ctx.cfg.get("align.steps")?,
        batch: ctx.cfg.get("align.batch")?,
        lr: ctx.cfg.get("align.lr")?,
        seed: ctx.seed,
    };
    let log = crate::alignment::train_alignment(&mut proj, &mut llm, &examples, &cfg)?;
    let itg: Vec<f64> = log.iter().map(|r| r.l_itg).collect();
    ctx.report.metric("L_ITG_tail", tail_mean(&itg));
    if manner == Manner::Mid {
        let itdm: Vec<f64> = log.iter().map(|r| r.l_itdm).collect();
        ctx.report.metric("L_ITDM_tail", tail_mean(&itdm));
    }
    if enc_dec {
        let (a, b) = pooled_pairs(&proj, &llm, &captions)?;
        let m = alignment_metrics(&a, &b)?;
        ctx.report.metric("avg_cosine", m.avg_cosine).metric("avg_mse", m.avg_mse);
    }
    let (b1, b2) = caption_bleu(&ctx.world, &proj, &llm, &latents)?;
    ctx.report.metric("bleu1", b1).metric("bleu2", b2);
    ctx.report.note("manner", manner).note("llm_frozen", !cfg.train_llm);
    ctx.checkpoint("denoiser", dc.hash()?);
    let c = ctx.dir.save_projection(&proj, manner)?;
    ctx.checkpoint("projection", c.hash()?);
    let c = ctx.dir.save_llm(&llm, &ctx.world, "aligned")?;
    ctx.checkpoint("llm", c.hash()?);
    ctx.finish()
}

fn train_adapter_cmd(mut ctx: Ctx) -> Result<MetricReport> {
    let (mut den, sched, dc) = ctx.dir.load_denoiser(&ctx.world, &["bidiffuser"])?;
    den.params.set_frozen(true);
    let (mut llm, lc) = ctx.dir.load_llm(&ctx.world, LLM_STAGES)?;
    llm.params.set_frozen(true);
    let fusion = FusionConfig::new(ctx.cfg.get("adapter.lambda")?)?;
    let mut adapter = Adapter::new(ctx.world.codec.encoder.dim(), llm.width(), ctx.seed);
    let spec = TrainSpec::from_config(&ctx.cfg, "adapter", ctx.seed)?;
    let losses = train_adapter(&mut adapter, &den, &llm, &ctx.world, &sched, fusion, spec)?;
    ctx.report.metric("L_ada_tail", tail_mean(&losses)).metric("lambda", fusion.lambda);
    ctx.checkpoint("denoiser", dc.hash()?);
    ctx.checkpoint("llm", lc.hash()?);
    let c = ctx.dir.save_adapter(&adapter, fusion, "adapter")?;
    ctx.checkpoint("adapter", c.hash()?);
    ctx.finish()
}

fn train_dialogue_cmd(mut ctx: Ctx) -> Result<MetricReport> {
    let (mut den, sched, dc) = ctx.dir.load_denoiser(&ctx.world, &["bidiffuser"])?;
    den.params.set_frozen(true);
    let (mut llm, _) = ctx.dir.load_llm(&ctx.world, LLM_STAGES)?;
    let (mut adapter, fusion, _) = ctx.dir.load_adapter(&ctx.world, llm.width(), ADAPTER_STAGES)?;
    let spec = TrainSpec::from_config(&ctx.cfg, "dialogue", ctx.seed)?;
    let losses = train_dialogue(&mut llm, &mut adapter, &den, &ctx.world, &sched, fusion, spec)?;
    ctx.report.metric("L_all_tail", tail_mean(&losses));
    ctx.report.metric("perplexity", perplexity(&llm, &ctx.world.codec.vocab, &ctx.world.captions())?);
    ctx.checkpoint("denoiser", dc.hash()?);
    let c = ctx.dir.save_llm(&llm, &ctx.world, "dialogue")?;
    ctx.checkpoint("llm", c.hash()?);
    let c = ctx.dir.save_adapter(&adapter, fusion, "dialogue")?;
    ctx.checkpoint("adapter", c.hash()?);
    ctx.finish()
}

/// Loads whatever components the run directory holds.
fn system(ctx: &Ctx, need_llm: bool, need_adapter: bool) -> Result<System> {
    let (den, sched, _) = ctx.dir.load_denoiser(&ctx.world, DENOISER_STAGES)?;
    let llm = if need_llm || need_adapter { Some(ctx.dir.load_llm(&ctx.world, LLM_STAGES)?.0) } else { None };
    let proj = if need_llm && ctx.dir.path(crate::store::PROJECTION).exists() { Some(ctx.dir.load_projection()?.0) } else { None };
    let (adapter, fusion) = match (&llm, need_adapter) {
        (Some(l), true) => {
            let (a, f, _) = ctx.dir.load_adapter(&ctx.world, l.width(), ADAPTER_STAGES)?;
            (Some(a), f)
        }
        _ => (None, FusionConfig::default()),
    };
    Ok(System { codec: ctx.world.codec.clone(), sched, den, proj, llm, adapter, fusion, guide: guidance(&ctx.cfg)? })
}

/// Writes `outputs/<name>` and returns that run-relative path.
fn write_log(ctx: &Ctx, name: &str, record: &serde_json::Value) -> Result<String> {
    let dir = ctx.dir.path("outputs");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(name), serde_json::to_string(record)? + "\n")?;
    Ok(format!("outputs/{name}"))
}

fn generate(mut ctx: Ctx, task: Task, seed: u64, index: usize, prompt: Option<String>, use_adapter: bool) -> Result<MetricReport> {
    if index >= ctx.world.len() {
        return Err(Error::OutOfRange { index, size: ctx.world.len() });
    }
    let stem = format!("{}-{seed}", task_name(task));
    match task {
        Task::Caption | Task::Vqa => {
            let sys = system(&ctx, true, false)?;
            let t = if task == Task::Caption {
                I2tTask::Caption { query: 0 }
            } else {
                I2tTask::Vqa { question: prompt.ok_or_else(|| Error::Config("vqa needs --prompt <question>".into()))? }
            };
            let (text, log) = sys.image_to_text(&ctx.world.data[index].image, &t, seed)?;
            let path = write_log(&ctx, &format!("{stem}.json"), &serde_json::json!({ "index": index, "text": text, "log": log }))?;
            ctx.report.note("text", &text).note("output", path);
            ctx.report.checkpoints = log.checkpoints;
        }
        Task::T2i => {
            let sys = system(&ctx, use_adapter, use_adapter)?;
            let text = prompt.unwrap_or_else(|| ctx.world.data[index].caption.clone());
            let (images, log) = sys.text_to_image(std::slice::from_ref(&text), seed, use_adapter)?;
            let c = &sys.den.config;
            let image = images.reshape(&[c.image_size, c.image_size])?;
            let dir = ctx.dir.path("outputs");
            std::fs::create_dir_all(&dir)?;
            let pgm = dir.join(format!("{stem}.pgm"));
            std::fs::write(&pgm, to_pgm(&image)?)?;
            write_log(&ctx, &format!("{stem}.json"), &serde_json::json!({ "text": text, "log": log }))?;
            ctx.report.note("image", format!("outputs/{stem}.pgm"));
            ctx.report.checkpoints = log.checkpoints;
        }
        Task::Dialogue => {
            let sys = system(&ctx, true, true)?;
            let message = prompt.ok_or_else(|| Error::Config("dialogue needs --prompt <message>".into()))?;
            let history = DialogueSample::from_user(&message);
            let reply = sys.dialogue_respond(&history, seed)?;
            if let Some(img) = &reply.image {
                let dir = ctx.dir.path("outputs");
                std::fs::create_dir_all(&dir)?;
                let pgm = dir.join(format!("{stem}.pgm"));
                std::fs::write(&pgm, to_pgm(img)?)?;
                ctx.report.note("image", format!("outputs/{stem}.pgm"));
            }
            write_log(
                &ctx,
                &format!("{stem}.json"),
                &serde_json::json!({ "reply": reply.raw, "text": reply.text, "caption": reply.caption, "log": reply.log }),
            )?;
            ctx.report.note("reply", &reply.raw);
            if let Some(w) = &reply.log.warning {
                ctx.report.note("warning", w);
            }
            ctx.report.checkpoints = reply.log.checkpoints;
        }
    }
    ctx.finish()
}

fn evaluate(mut ctx: Ctx, metric: Metric, seed: u64) -> Result<MetricReport> {
    match metric {
        Metric::Alignment => {
            let (den, sched, _) = ctx.dir.load_denoiser(&ctx.world, DENOISER_STAGES)?;
            let (llm, _) = ctx.dir.load_llm(&ctx.world, LLM_STAGES)?;
            let (proj, _) = ctx.dir.load_projection()?;
            let latents = sampled_latents(&ctx, &den, &sched, seed)?;
            let ex = caption_examples(&ctx.world, &latents, llm.variant(), seed)?;
            let (a, b) = pooled_pairs(&proj, &llm, &ex)?;
            let m = alignment_metrics(&a, &b)?;
            ctx.report.metric("avg_cosine", m.avg_cosine).metric("avg_mse", m.avg_mse).metric("zero_pairs", m.zero_pairs as f64);
        }
        Metric::CaptionAccuracy => {
            let (den, sched, _) = ctx.dir.load_denoiser(&ctx.world, DENOISER_STAGES)?;
            let run = image_to_caption_run(&den, &ctx.world, &sched, seed)?;
            ctx.report.metric("correct", run.correct as f64).metric("accuracy", run.correct as f64 / ctx.world.len() as f64);
        }
        Metric::Bleu => {
            let sys = system(&ctx, true, false)?;
            let latents = sampled_latents(&ctx, &sys.den, &sys.sched, seed)?;
            let proj = sys.proj.as_ref().ok_or_else(|| Error::Compatibility("BLEU needs a projection checkpoint".into()))?;
            let (b1, b2) = caption_bleu(&ctx.world, proj, sys.llm.as_ref().expect("loaded"), &latents)?;
            ctx.report.metric("bleu1", b1).metric("bleu2", b2);
        }
        Metric::Perplexity => {
            let (llm, _) = ctx.dir.load_llm(&ctx.world, LLM_STAGES)?;
            ctx.report.metric("perplexity", perplexity(&llm, &ctx.world.codec.vocab, &ctx.world.captions())?);
        }
        Metric::Losses => {
            let (den, sched, _) = ctx.dir.load_denoiser(&ctx.world, DENOISER_STAGES)?;
            let (lx, ly) = conditional_losses(&den, &ctx.world, &sched, seed)?;
            ctx.report.metric("cond_loss_t2i", lx).metric("cond_loss_i2t", ly);
        }
        Metric::Fid => {
            let with_adapter = ctx.dir.path(crate::store::ADAPTER).exists();
            let sys = system(&ctx, with_adapter, with_adapter)?;
            let n: usize = ctx.cfg.get("eval.samples")?;
            let (fid, _) = fid_arm(&sys, &ctx.world, n, seed, false)?;
            ctx.report.metric("fid_without_adapter", fid);
            if with_adapter {
                let (fid, _) = fid_arm(&sys, &ctx.world, n, seed, true)?;
                ctx.report.metric("fid_with_adapter", fid);
            }
        }
    }
    ctx.finish()
}

/// Toy FID of `n` guided samples whose captions cycle through the dataset.
pub fn fid_arm(sys: &System, world: &World, n: usize, seed: u64, use_adapter: bool) -> Result<(f64, Tensor)> {
    let captions: Vec<String> = (0..n).map(|i| world.data[i % world.len()].caption.clone()).collect();
    let (images, _) = sys.text_to_image(&captions, seed, use_adapter)?;
    let gen: Vec<Tensor> = (0..n).map(|i| unstack(&images, i)).collect();
    let real: Vec<Tensor> = world.data.iter().map(|s| s.image.clone()).collect();
    Ok((toy_fid(&real, &gen)?, images))
}

fn gradcheck(mut ctx: Ctx) -> Result<MetricReport> {
    let checks = crate::gradsuite::run()?;
    let mut all = true;
    for c in &checks {
        ctx.report.metric(&format!("rel_err.{}", c.loss), c.max_rel_error);
        all &= c.passes();
    }
    ctx.report.metric("all_pass", if all { 1.0 } else { 0.0 });
    ctx.finish()
}
