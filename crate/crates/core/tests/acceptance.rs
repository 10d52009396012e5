//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! Failures are reported, not raised, unless `ACCEPTANCE_STRICT=1` is set.
//!
//! The expensive criteria share one trained stack: a jointly pretrained
//! denoiser fine-tuned bidirectionally (A4), an encoder-decoder LLM with a
//! Mid-Align projection (A5), adapters on top of both (A6). A7 restarts from
//! the joint checkpoint.

use mmgen::adapter::{fuse_tensors, Adapter, FusionConfig};
use mmgen::alignment::{alignment_metrics, pooled_pairs, train_alignment, AlignConfig, Manner, Projection};
use mmgen::checkpoint::Checkpoint;
use mmgen::cli::{fid_arm, main_with_args};
use mmgen::config::Config;
use mmgen::denoiser::{loss_bidiffuser, JointDenoiser, NoisyBatch, Objective};
use mmgen::diffusion::{cfg_combine, ddpm_step, q_sample, NoiseSchedule};
use mmgen::gradsuite;
use mmgen::llm::template::{render_caption, render_question};
use mmgen::llm::{parse_img_spans, DialogueSample, Llm, LlmVariant};
use mmgen::pipeline::System;
use mmgen::stages::*;
use mmgen::{Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

const EVAL_SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn a1_gradients() -> Result<Verdict> {
    let t = Instant::now();
    let checks = gradsuite::run()?;
    let secs = t.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passes()).map(|c| c.loss.as_str()).collect();
    verdict(
        failing.is_empty() && secs < 120.0,
        format!("{} losses, worst rel err {worst:.2e} (< 1e-5), {secs:.1}s (< 120s), failing {failing:?}", checks.len()),
    )
}

fn a2_identities() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ok = Vec::new();
    let u = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let c = Tensor::randn(&[4, 6], 1.0, &mut rng);
    ok.push(("cfg s=0", cfg_combine(&u, &c, 0.0)? == u));
    ok.push(("cfg s=1", cfg_combine(&u, &c, 1.0)? == c));
    ok.push(("fuse λ=0", fuse_tensors(&u, &c, 0.0)? == c));
    ok.push(("fuse λ=1", fuse_tensors(&u, &c, 1.0)? == u));

    let world = World::new(Default::default())?;
    let sched = NoiseSchedule::linear(100, 1e-3, 0.09)?;
    let x0 = world.data[3].image.clone();
    let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
    let back = ddpm_step(&q_sample(&x0, 1, &eps, &sched)?, &eps, 1, &sched, &Tensor::randn(x0.shape(), 1.0, &mut rng))?;
    let inv = back.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok.push(("ddpm inverts q_sample at t=1", inv < 1e-10));

    let den = new_denoiser(&world, &sched, 5)?;
    let idx: Vec<usize> = (0..4).collect();
    let nb = NoisyBatch::sample(world.images(&idx)?, world.latent_batch(&idx)?, &sched, 1..=100, &mut rng)?;
    let ld = |alpha: f64| -> Result<f64> {
        let mut g = Graph::new();
        let p = den.params.attach_frozen(&mut g);
        let l = loss_bidiffuser(&den, &mut g, &p, &nb, alpha)?;
        g.value(l).item()
    };
    let (l0, l1) = (ld(0.0)?, ld(1.0)?);
    let affine = [0.5, 2.0, 4.0].iter().all(|&a| (ld(a).unwrap() - (l0 + a * (l1 - l0))).abs() <= 1e-12 * l1.abs().max(1.0));
    ok.push(("L_d affine in α", affine));

    // L_mid and L_all sums are asserted bit-exactly by the identities test
    // target; here the composed losses are recomputed at full size.
    let llm = new_llm(&world, LlmVariant::EncoderDecoder, 6)?;
    let proj = Projection::new(32, 64, 7);
    let examples = caption_examples(&world, &world.latents[..10], LlmVariant::EncoderDecoder, 8)?;
    let mut g = Graph::new();
    let pp = proj.params.attach(&mut g);
    let lp = llm.params.attach_frozen(&mut g);
    let m = mmgen::alignment::mid_align_losses(&mut g, &proj, &pp, &llm, &lp, &examples)?;
    let mid = g.value(m.l_mid).item()?.to_bits() == (g.value(m.l_itg).item()? + g.value(m.l_itdm).item()?).to_bits();
    ok.push(("L_mid = L_ITG + L_ITDM", mid));

    let mut frozen = den.clone();
    frozen.params.set_frozen(true);
    let adapter = Adapter::new(32, 64, 9);
    let parts = mmgen::adapter::DialogueParts { llm: &llm, adapter: &adapter, den: &frozen, codec: &world.codec, fusion: FusionConfig::default() };
    let d = mmgen::data::photo_dialogue(&world.data[0].caption, &mut rng);
    let noise = mmgen::adapter::ImageNoise::sample(world.images(&[0])?, &sched, &mut rng)?;
    let mut g = Graph::new();
    let lp = llm.params.attach(&mut g);
    let ap = adapter.params.attach(&mut g);
    let dp = frozen.params.attach_frozen(&mut g);
    let l = mmgen::adapter::loss_all(&mut g, &parts, &lp, &ap, &dp, &d, &noise)?;
    let all = g.value(l.l_all).item()?.to_bits() == (g.value(l.l_t2i).item()? + g.value(l.l_t2t).item()?).to_bits();
    ok.push(("L_all = L_t2i + L_t2t", all));

    let failing: Vec<&str> = ok.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    verdict(failing.is_empty(), format!("{} identities, failing {failing:?}, ddpm inversion err {inv:.1e}", ok.len()))
}

const TINY: &[&str] = &[
    "diffusion.T=10",
    "joint.steps=8",
    "joint.batch=4",
    "bidiffuser.steps=8",
    "bidiffuser.batch=4",
    "llm.steps=8",
    "llm.batch=2",
    "llm.variant=encoder-decoder",
    "align.steps=6",
    "align.batch=4",
    "adapter.steps=4",
    "adapter.batch=2",
    "dialogue.steps=3",
    "eval.samples=8",
];

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["pretrain-joint"],
    &["finetune-bidiffuser"],
    &["pretrain-llm"],
    &["align", "--manner", "mid"],
    &["train-adapter"],
    &["train-dialogue"],
    &["generate", "--task", "t2i", "--seed", "7"],
    &["generate", "--task", "caption", "--seed", "7"],
    &["generate", "--task", "vqa", "--prompt", "what shape is it ?"],
    &["generate", "--task", "dialogue", "--prompt", "please draw a small blue circle at top-left"],
    &["evaluate", "--metric", "alignment"],
    &["evaluate", "--metric", "losses"],
    &["evaluate", "--metric", "fid"],
    &["gradcheck"],
];

fn cli(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["mmgen".to_string(), "--run".into(), dir.display().to_string()];
    for kv in TINY {
        argv.extend(["--set".to_string(), kv.to_string()]);
    }
    argv.extend(args.iter().map(|s| s.to_string()));
    main_with_args(argv)
}

fn checkpoints(dir: &Path) -> BTreeMap<String, Checkpoint> {
    ["denoiser.ckpt", "llm.ckpt", "projection.ckpt", "adapter.ckpt"]
        .iter()
        .filter_map(|n| Checkpoint::load(&dir.join(n)).ok().map(|c| (n.to_string(), c)))
        .collect()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable run dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).expect("inside").display().to_string(), std::fs::read(&p).expect("readable"));
            }
        }
    }
    out
}

/// A3 and A9 share two runs of the miniature command-line pipeline.
fn a3_a9_pipeline() -> Result<(Verdict, Verdict)> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let mut violations = Vec::new();
    let mut codes = Vec::new();
    let mut compared = 0;
    for cmd in PIPELINE {
        let before = checkpoints(a.path());
        codes.push(cli(a.path(), cmd));
        codes.push(cli(b.path(), cmd));
        let after = checkpoints(a.path());
        for (name, new) in &after {
            let Some(old) = before.get(name) else { continue };
            let frozen: Vec<&str> = new.params.params().iter().filter(|p| p.frozen).map(|p| p.name.as_str()).collect();
            let changed = new.params.changed_params(&old.params);
            compared += frozen.len();
            violations.extend(frozen.iter().filter(|f| changed.iter().any(|c| c == *f)).map(|f| format!("{}:{name}:{f}", cmd[0])));
        }
        // The denoiser is frozen in every stage after fine-tuning.
        if !matches!(cmd[0], "gen-data" | "pretrain-joint" | "finetune-bidiffuser") {
            if let (Some(o), Some(n)) = (before.get("denoiser.ckpt"), after.get("denoiser.ckpt")) {
                if o.to_bytes()? != n.to_bytes()? {
                    violations.push(format!("{}:denoiser rewritten", cmd[0]));
                }
            }
        }
    }
    let llm_frozen_in_align = std::fs::read_to_string(a.path().join("reports/align.json"))?.contains("\"llm_frozen\": \"true\"");
    let a3 = Verdict {
        pass: violations.is_empty() && compared > 0 && llm_frozen_in_align && codes.iter().all(|&c| c == 0),
        detail: format!("{compared} frozen tensors compared across stages, violations {violations:?}"),
    };
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let same_keys = fa.keys().eq(fb.keys());
    let reports = fa.keys().filter(|k| k.starts_with("reports/")).count();
    let a9 = Verdict {
        pass: differing.is_empty() && same_keys && reports == PIPELINE.len() && codes.iter().all(|&c| c == 0),
        detail: format!("{} commands run twice, {} files compared, {reports} reports, differing {differing:?}", PIPELINE.len(), fa.len()),
    };
    Ok((a3, a9))
}

/// Everything the trained-model criteria share.
struct Stack {
    world: World,
    sched: NoiseSchedule,
    cfg: Config,
    joint: JointDenoiser,
    den: JointDenoiser,
    latents: Vec<Tensor>,
}

fn a4_image_to_text() -> Result<(Verdict, Stack)> {
    let cfg = Config::default();
    let world = World::from_config(&cfg)?;
    let sched = schedule(&cfg)?;
    let alpha: f64 = cfg.get("bidiffuser.alpha")?;
    let seed: u64 = cfg.get("seed")?;
    let t = Instant::now();
    let mut den = new_denoiser(&world, &sched, seed)?;
    train_denoiser(&mut den, &world, &sched, TrainSpec::from_config(&cfg, "joint", seed)?, Objective::Joint, |_, _| Ok(()))?;
    let joint = den.clone();
    let l0 = eval_ld(&den, &world, &sched, alpha, EVAL_SEED)?;
    let mut l2000 = f64::NAN;
    let spec = TrainSpec::from_config(&cfg, "bidiffuser", seed + 1)?;
    train_denoiser(&mut den, &world, &sched, spec, Objective::Bidirectional { alpha }, |step, m| {
        if step == 2000 {
            l2000 = eval_ld(m, &world, &sched, alpha, EVAL_SEED)?;
        }
        Ok(())
    })?;
    let run = image_to_caption_run(&den, &world, &sched, seed + 2)?;
    let secs = t.elapsed().as_secs_f64();
    let acc = run.correct as f64 / world.len() as f64;
    let drop = 1.0 - l2000 / l0;
    let v = Verdict {
        pass: drop >= 0.5 && acc >= 0.9 && secs < 900.0,
        detail: format!(
            "L_d {l0:.4} -> {l2000:.4} at step 2000 ({:.0}% drop, need >= 50%), caption accuracy {}/{} ({:.1}%, need >= 90%), {secs:.0}s (< 900s)",
            100.0 * drop,
            run.correct,
            world.len(),
            100.0 * acc
        ),
    };
    Ok((v, Stack { world, sched, cfg, joint, den, latents: run.latents }))
}

fn a5_alignment(s: &Stack) -> Result<(Verdict, Llm)> {
    let mut llm = new_llm(&s.world, LlmVariant::EncoderDecoder, 0)?;
    pretrain_llm(&mut llm, &s.world, TrainSpec::from_config(&s.cfg, "llm", 0)?)?;
    let examples = caption_examples(&s.world, &s.latents, LlmVariant::EncoderDecoder, 0)?;
    let mut proj = Projection::new(s.den.config.text_dim, llm.width(), 0);
    let (a, b) = pooled_pairs(&proj, &llm, &examples)?;
    let init = alignment_metrics(&a, &b)?;
    let cfg = AlignConfig {
        manner: Manner::Mid,
        train_llm: false,
        steps: s.cfg.get("align.steps")?,
        batch: s.cfg.get("align.batch")?,
        lr: s.cfg.get("align.lr")?,
        seed: 0,
    };
    let before = llm.params.fingerprint();
    train_alignment(&mut proj, &mut llm, &examples, &cfg)?;
    let (a, b) = pooled_pairs(&proj, &llm, &examples)?;
    let after = alignment_metrics(&a, &b)?;
    let ratio = init.avg_mse / after.avg_mse;
    let v = Verdict {
        pass: after.avg_cosine >= 0.8 && ratio >= 10.0 && before == llm.params.fingerprint(),
        detail: format!(
            "avg cosine {:.4} -> {:.4} (need >= 0.8), avg MSE {:.4} -> {:.5} ({ratio:.1}x, need >= 10x)",
            init.avg_cosine, after.avg_cosine, init.avg_mse, after.avg_mse
        ),
    };
    llm.params.set_frozen(true);
    Ok((v, llm))
}

fn a6_adapter(s: &Stack, llm: &Llm) -> Result<Verdict> {
    let n: usize = s.cfg.get("eval.samples")?;
    let fusion = FusionConfig::new(s.cfg.get("adapter.lambda")?)?;
    let mut den = s.den.clone();
    den.params.set_frozen(true);
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let mut adapter = Adapter::new(s.world.codec.encoder.dim(), llm.width(), seed);
        train_adapter(&mut adapter, &den, llm, &s.world, &s.sched, fusion, TrainSpec::from_config(&s.cfg, "adapter", seed)?)?;
        let sys = System {
            codec: s.world.codec.clone(),
            sched: s.sched.clone(),
            den: den.clone(),
            proj: None,
            llm: Some(llm.clone()),
            adapter: Some(adapter),
            fusion,
            guide: mmgen::diffusion::GuidanceConfig::new(s.cfg.get("guidance.scale")?, s.cfg.get("guidance.uncond_mode")?)?,
        };
        with.push(fid_arm(&sys, &s.world, n, 100 + seed, true)?.0);
        without.push(fid_arm(&sys, &s.world, n, 100 + seed, false)?.0);
    }
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    verdict(mw <= mo, format!("median toy FID with adapter {mw:.4} vs without {mo:.4} over seeds ({with:.4?} / {without:.4?}), {n} images per arm"))
}

fn a7_bidirectional(s: &Stack) -> Result<Verdict> {
    const STEPS: usize = 500;
    let alpha: f64 = s.cfg.get("bidiffuser.alpha")?;
    let (mut jx, mut jy, mut bx, mut by) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let spec = TrainSpec { steps: STEPS, batch: s.cfg.get("bidiffuser.batch")?, lr: s.cfg.get("bidiffuser.lr")?, seed: 200 + seed };
        let mut joint = s.joint.clone();
        train_denoiser(&mut joint, &s.world, &s.sched, spec, Objective::Joint, |_, _| Ok(()))?;
        let (x, y) = conditional_losses(&joint, &s.world, &s.sched, EVAL_SEED)?;
        jx.push(x);
        jy.push(y);
        let mut bi = s.joint.clone();
        train_denoiser(&mut bi, &s.world, &s.sched, spec, Objective::Bidirectional { alpha }, |_, _| Ok(()))?;
        let (x, y) = conditional_losses(&bi, &s.world, &s.sched, EVAL_SEED)?;
        bx.push(x);
        by.push(y);
    }
    let (jx, jy, bx, by) = (median(jx), median(jy), median(bx), median(by));
    verdict(
        bx < jx && by < jy,
        format!("{STEPS} steps x 3 seeds, median clean-condition MSE text->image {bx:.5} vs joint {jx:.5}, image->text {by:.5} vs joint {jy:.5}"),
    )
}

const TEMPLATE_FIXTURE: &str = include_str!("fixtures/instruction_templates.tsv");

fn a8_templates() -> Result<Verdict> {
    let mut rows = 0;
    let mut mismatches = Vec::new();
    for line in TEMPLATE_FIXTURE.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let (task, arg, want) = (cols[0], cols[1], cols[2]);
        for variant in [LlmVariant::DecoderOnly, LlmVariant::EncoderDecoder] {
            let got = match task {
                "caption-query" => render_caption(arg.parse().expect("query index"), variant)?,
                "dialogue" => {
                    let turns = arg.split('|').map(|t| t.split_once(": ").expect("speaker")).map(|(a, b)| (a.to_string(), b.to_string())).collect();
                    DialogueSample { turns, target: String::new() }.prompt(variant)?
                }
                id => render_question(id, arg, variant)?,
            };
            let want = match variant {
                LlmVariant::DecoderOnly => want.to_string(),
                LlmVariant::EncoderDecoder => format!("Human:{}", &want["USER:".len()..]),
            };
            if got.as_bytes() != want.as_bytes() {
                mismatches.push(format!("{task}/{variant}"));
            }
            rows += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz ,.!?'-<>/0123456789éü".chars().collect();
    let mut fuzz_fail = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..40);
        let caption: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        if caption.contains("<Img>") || caption.contains("</Img>") {
            continue;
        }
        let d = mmgen::data::photo_dialogue(&caption, &mut rng);
        let (_, caps) = parse_img_spans(&d.target)?;
        if caps != vec![caption] {
            fuzz_fail += 1;
        }
    }
    verdict(
        mismatches.is_empty() && fuzz_fail == 0,
        format!("{rows} renderings vs frozen transcriptions, mismatches {mismatches:?}; 1000 fuzzed captions, {fuzz_fail} span round-trip failures"),
    )
}

/// Collects verdicts in criterion order.
#[derive(Default)]
struct Board {
    failed: Vec<&'static str>,
}

impl Board {
    fn report(&mut self, id: &'static str, name: &str, v: &Verdict, secs: f64) {
        if !v.pass {
            self.failed.push(id);
        }
        println!("{id} {} {name}: {} [{secs:.0}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }

    fn run(&mut self, id: &'static str, name: &str, f: impl FnOnce() -> Result<Verdict>) {
        let t = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        self.report(id, name, &v, t.elapsed().as_secs_f64());
    }
}

fn failure(e: impl std::fmt::Display) -> Verdict {
    Verdict { pass: false, detail: format!("error: {e}") }
}

fn main() {
    let mut board = Board::default();
    board.run("A1", "gradient suite", a1_gradients);
    board.run("A2", "exact identities", a2_identities);
    let t = Instant::now();
    let (a3, a9) = a3_a9_pipeline().unwrap_or_else(|e| (failure(&e), failure(&e)));
    let secs = t.elapsed().as_secs_f64();
    board.report("A3", "freeze contracts", &a3, secs);

    let t = Instant::now();
    match a4_image_to_text() {
        Ok((v4, stack)) => {
            board.report("A4", "toy image-to-text", &v4, t.elapsed().as_secs_f64());
            let t = Instant::now();
            match a5_alignment(&stack) {
                Ok((v5, llm)) => {
                    board.report("A5", "alignment trend", &v5, t.elapsed().as_secs_f64());
                    board.run("A6", "adapter ablation", || a6_adapter(&stack, &llm));
                }
                Err(e) => {
                    board.report("A5", "alignment trend", &failure(e), 0.0);
                    board.report("A6", "adapter ablation", &failure("needs the aligned LLM"), 0.0);
                }
            }
            board.run("A7", "bidirectional fine-tuning", || a7_bidirectional(&stack));
        }
        Err(e) => {
            for (id, name) in [("A4", "toy image-to-text"), ("A5", "alignment trend"), ("A6", "adapter ablation"), ("A7", "bidirectional fine-tuning")] {
                board.report(id, name, &failure(&e), 0.0);
            }
        }
    }
    board.run("A8", "template fidelity", a8_templates);
    board.report("A9", "determinism", &a9, secs);

    if board.failed.is_empty() {
        println!("acceptance: all 9 criteria PASS");
    } else {
        println!("acceptance: {}/9 PASS, FAIL {}", 9 - board.failed.len(), board.failed.join(", "));
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
