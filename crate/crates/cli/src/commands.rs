use std::fs;
use std::path::Path;

use serde::Serialize;
use viact_core::dataset::{read_dataset, write_dataset};
use viact_core::io::{write_atomic, write_jsonl};
use viact_core::mae::{default_scales, token_cost_profile};
use viact_core::phantom::{generate_cohort, CohortSpec, PhantomSpec};
use viact_core::training::{
    configure_threads_from_env, evaluate, finetune, mask_ratio_sweep, pretrain, MetricReport, MASK_RATIO_GRID,
};
use viact_core::{rng, Checkpoint, Dataset, DecoderConfig, Error, ModelConfig, Result, Sample, Task, TrainConfig, Viact};

use crate::overlay::overlay_ppm;
use crate::{Args, Command, Split};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

/// Everything a run resolved from its flags, written next to its outputs.
#[derive(Serialize)]
struct RunConfig<'a> {
    task: Command,
    seed: u64,
    data: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    model: Option<&'a ModelConfig>,
    decoder: Option<&'a DecoderConfig>,
    train: Option<&'a TrainConfig>,
}

pub fn run(args: &Args) -> Result<()> {
    if let Some(n) = configure_threads_from_env()? {
        log::info!("using {n} worker threads");
    }
    validate_paths(args)?;
    match args.task {
        Command::GenData => gen_data(args),
        Command::Pretrain => run_pretrain(args),
        Command::Track => run_finetune(args, Task::Track),
        Command::Classify => run_finetune(args, Task::Classify),
        Command::Ef => run_finetune(args, Task::Ef),
        Command::Eval => run_eval(args),
        Command::Attn => run_attn(args),
        Command::Profile => run_profile(args),
    }
}

fn needs_data(task: Command) -> bool {
    !matches!(task, Command::GenData | Command::Profile)
}

fn needs_checkpoint(task: Command) -> bool {
    matches!(task, Command::Eval | Command::Attn)
}

/// Check every input and the output directory before any work starts.
fn validate_paths(args: &Args) -> Result<()> {
    if needs_data(args.task) {
        let Some(data) = &args.data else {
            return usage(format!("--task {} needs --data", task_name(args.task)));
        };
        if !data.join(viact_core::dataset::MANIFEST).is_file() {
            return usage(format!("{} is not a complete dataset (no manifest)", data.display()));
        }
    }
    match &args.checkpoint {
        Some(p) if !p.is_file() => return usage(format!("checkpoint {} does not exist", p.display())),
        None if needs_checkpoint(args.task) => {
            return usage(format!("--task {} needs --checkpoint", task_name(args.task)))
        }
        _ => {}
    }
    if let Some(p) = &args.resume {
        if !p.is_file() {
            return usage(format!("resume checkpoint {} does not exist", p.display()));
        }
    }
    if args.out.is_file() {
        return usage(format!("--out {} is a file", args.out.display()));
    }
    if args.out.is_dir() && fs::read_dir(&args.out)?.next().is_some() && !args.force {
        return usage(format!(
            "{} exists and is not empty (pass --force to overwrite)",
            args.out.display()
        ));
    }
    Ok(())
}

fn task_name(task: Command) -> String {
    clap::ValueEnum::to_possible_value(&task)
        .map(|v| v.get_name().to_string())
        .unwrap_or_default()
}

fn model_config(args: &Args) -> Result<ModelConfig> {
    let mut c = ModelConfig::tiny().with_dims(args.dim, args.heads, args.depth);
    c.patch_size = args.patch;
    c.frames = args.frames;
    c.points = args.points;
    if let Some(p) = args.pos_embed {
        c.pos_embed = p;
    }
    if let Some(s) = args.coord_scale {
        c.coord_scale = s;
    }
    c.validate()?;
    Ok(c)
}

fn decoder_config(args: &Args) -> DecoderConfig {
    DecoderConfig {
        dim: args.decoder_dim,
        depth: args.decoder_depth,
        heads: args.decoder_heads,
    }
}

fn train_config(args: &Args, task: Task) -> Result<TrainConfig> {
    let mut c = TrainConfig::finetune(task);
    c.seed = args.seed;
    if let Some(e) = args.epochs {
        // warmup keeps its share of the default budget
        c.warmup_epochs = c.warmup_epochs * e / c.epochs;
        c.epochs = e;
    }
    if let Some(w) = args.warmup {
        c.warmup_epochs = w;
    }
    if let Some(b) = args.batch {
        c.batch_size = b;
    }
    if let Some(lr) = args.base_lr {
        c.base_lr = lr;
    }
    if let Some(r) = args.mask_ratio {
        c.mask_ratio = r;
    }
    c.refine = args.refine;
    if args.fixed_windows {
        c.random_windows = false;
    }
    c.validate()?;
    Ok(c)
}

fn load_data(args: &Args, cfg: &ModelConfig) -> Result<Dataset> {
    let path = args.data.as_deref().expect("validated");
    let ds = read_dataset(path)?;
    if let Some(s) = ds.samples.iter().find(|s| s.points.points() != cfg.points) {
        return usage(format!(
            "dataset sample {} has {} points per frame but --points is {}",
            s.id,
            s.points.points(),
            cfg.points
        ));
    }
    Ok(ds)
}

fn split_samples(ds: &Dataset, split: Split) -> Vec<&Sample> {
    match split {
        Split::Train => ds.train(),
        Split::Val => ds.val(),
        Split::Test => ds.test(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    write_atomic(&dir.join("report.jsonl"), report.to_jsonl()?.as_bytes())?;
    write_atomic(&dir.join("loss_curve.csv"), report.loss_curve_csv().as_bytes())
}

fn run_config<'a>(
    args: &'a Args,
    model: Option<&'a ModelConfig>,
    decoder: Option<&'a DecoderConfig>,
    train: Option<&'a TrainConfig>,
) -> RunConfig<'a> {
    RunConfig {
        task: args.task,
        seed: args.seed,
        data: args.data.as_deref(),
        checkpoint: args.checkpoint.as_deref(),
        model,
        decoder,
        train,
    }
}

fn gen_data(args: &Args) -> Result<()> {
    let mut base = PhantomSpec {
        height: args.image_size,
        width: args.image_size,
        frames: args.clip_frames,
        rows: args.rows,
        contour_points: args.contour_points,
        ..PhantomSpec::default()
    };
    if let Some(a) = args.amplitude {
        base.amplitude = a;
    }
    if let Some(g) = args.grain {
        base.grain = g;
    }
    if let Some(n) = args.noise {
        base.noise = n;
    }
    base.validate()?;
    let ranges = CohortSpec {
        base,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(args.n, &ranges, args.seed)?;
    let manifest = write_dataset(&args.out, &cohort, args.force)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        manifest.samples.len(),
        args.out.display(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len()
    );
    Ok(())
}

fn run_pretrain(args: &Args) -> Result<()> {
    let cfg = model_config(args)?;
    let dec = decoder_config(args);
    let tc = train_config(args, Task::Pretrain)?;
    let resume = args
        .resume
        .as_deref()
        .map(|p| Checkpoint::load_expecting(p, &cfg))
        .transpose()?;
    let ds = load_data(args, &cfg)?;
    let (train, val) = (ds.train(), ds.val());
    let init = Viact::new(cfg.clone(), dec, &mut rng::stream(args.seed, rng::STREAM_INIT))?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("run.json"), &run_config(args, Some(&cfg), Some(&dec), Some(&tc)))?;

    if args.mask_ratio_sweep {
        if resume.is_some() {
            return usage("--resume cannot be combined with --mask-ratio-sweep");
        }
        #[derive(Serialize)]
        struct SweepLine {
            mask_ratio: f64,
            train_loss: f64,
            val_loss: Option<f64>,
        }
        let mut lines = Vec::new();
        for (ratio, outcome) in mask_ratio_sweep(&init, &train, &val, &tc, &MASK_RATIO_GRID)? {
            let dir = args.out.join(format!("ratio_{ratio:.2}"));
            fs::create_dir_all(&dir)?;
            write_report(&dir, &outcome.report)?;
            outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            let last = outcome.report.epochs.last().expect("at least one epoch");
            println!("mask ratio {ratio:.2}: train loss {:.6} val loss {:?}", last.train_loss, last.val_loss);
            lines.push(SweepLine {
                mask_ratio: ratio,
                train_loss: last.train_loss,
                val_loss: last.val_loss,
            });
        }
        return write_jsonl(&args.out.join("sweep.jsonl"), &lines);
    }

    let ckpt_dir = args.out.join("checkpoints");
    let outcome = pretrain(init, &train, &val, &tc, resume, &mut |ck| {
        fs::create_dir_all(&ckpt_dir)?;
        ck.save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", ck.epoch)))
    })?;
    write_report(&args.out, &outcome.report)?;
    outcome.checkpoint.save(&args.out.join(CHECKPOINT_FILE))?;
    if let Some(last) = outcome.report.epochs.last() {
        println!("pretrain: final train loss {:.6} val loss {:?}", last.train_loss, last.val_loss);
    }
    Ok(())
}

fn run_finetune(args: &Args, task: Task) -> Result<()> {
    let cfg = model_config(args)?;
    let dec = decoder_config(args);
    let tc = train_config(args, task)?;
    let pretrained = args
        .checkpoint
        .as_deref()
        .map(|p| Checkpoint::load_expecting(p, &cfg))
        .transpose()?;
    let ds = load_data(args, &cfg)?;
    let mut model = Viact::new(cfg.clone(), dec, &mut rng::stream(args.seed, rng::STREAM_INIT))?;
    if let Some(ck) = &pretrained {
        model.load_encoder_from(&ck.model)?;
    }
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("run.json"), &run_config(args, Some(&cfg), Some(&dec), Some(&tc)))?;
    let outcome = finetune(task, model, &ds.train(), &ds.val(), &tc)?;
    write_report(&args.out, &outcome.report)?;
    write_json(&args.out.join("eval_val.json"), &outcome.best)?;
    Checkpoint::new(task.name(), outcome.model).save(&args.out.join(CHECKPOINT_FILE))?;
    println!(
        "{task}: best epoch {:?}, {}",
        outcome.report.best_epoch,
        summary(&outcome.best)
    );
    Ok(())
}

fn summary(e: &viact_core::training::Evaluation) -> String {
    let mut parts = vec![format!("loss {:.6}", e.loss)];
    let mut push = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            parts.push(format!("{name} {v:.6}"));
        }
    };
    push("me", e.me);
    push("accuracy", e.accuracy);
    push("weighted_f1", e.weighted_f1);
    push("mae", e.mae);
    push("rmse", e.rmse);
    parts.join(", ")
}

fn load_task_checkpoint(path: &Path) -> Result<(Checkpoint, Task)> {
    let ck = Checkpoint::load(path)?;
    let task: Task = ck.task.parse()?;
    Ok((ck, task))
}

fn run_eval(args: &Args) -> Result<()> {
    let path = args.checkpoint.as_deref().expect("validated");
    let (ck, task) = load_task_checkpoint(path)?;
    if task == Task::Pretrain {
        return usage("eval needs a fine-tuned checkpoint; this one is from pre-training");
    }
    let ds = load_data(args, ck.model.config())?;
    let samples = split_samples(&ds, args.split);
    let e = evaluate(&ck.model, task, &samples, args.refine)?;
    fs::create_dir_all(&args.out)?;
    let name = format!("eval_{}.json", split_name(args.split));
    write_json(&args.out.join(name), &e)?;
    println!("{task} on {}: {}", split_name(args.split), summary(&e));
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Serialize)]
struct AttentionMeta {
    sample: usize,
    block: usize,
    head: usize,
    frames: usize,
    points: usize,
    /// Sum of the raw class-token attention row, class column included.
    raw_row_sum: f64,
}

fn run_attn(args: &Args) -> Result<()> {
    let path = args.checkpoint.as_deref().expect("validated");
    let (ck, task) = load_task_checkpoint(path)?;
    if !matches!(task, Task::Classify | Task::Ef) {
        return usage(format!(
            "attention export needs a classify or ef checkpoint; `{task}` training leaves the class token untrained"
        ));
    }
    let cfg = ck.model.config().clone();
    let ds = load_data(args, &cfg)?;
    let sample = match args.sample {
        Some(id) => ds
            .samples
            .get(id)
            .ok_or_else(|| Error::Usage(format!("no sample {id} in a dataset of {}", ds.samples.len())))?,
        None => *split_samples(&ds, args.split)
            .first()
            .ok_or_else(|| Error::Usage(format!("split {} is empty", split_name(args.split))))?,
    };
    let t = cfg.frames;
    if sample.clip.frames() < t {
        return usage(format!("sample {} has {} frames, the model needs {t}", sample.id, sample.clip.frames()));
    }
    let clip = sample.clip.window(0, 1, t)?;
    let points = sample.points.window(0, 1, t)?;
    let block = args.block.unwrap_or(cfg.depth.saturating_sub(1));
    let (map, raw) = ck.model.class_attention(&clip, &points, block, args.head)?;
    let n = cfg.points;

    fs::create_dir_all(args.out.join("overlays"))?;
    let mut csv = String::new();
    for row in map.chunks(n) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    write_atomic(&args.out.join("attention.csv"), csv.as_bytes())?;
    let raw_line: Vec<String> = raw.iter().map(|v| v.to_string()).collect();
    write_atomic(&args.out.join("raw_attention.csv"), format!("{}\n", raw_line.join(",")).as_bytes())?;
    for (f, row) in map.chunks(n).enumerate() {
        let ppm = overlay_ppm(clip.frame(f), &points.frame(f), row);
        write_atomic(&args.out.join("overlays").join(format!("frame_{f:03}.ppm")), &ppm)?;
    }
    let meta = AttentionMeta {
        sample: sample.id,
        block,
        head: args.head,
        frames: t,
        points: n,
        raw_row_sum: raw.iter().map(|&v| v as f64).sum(),
    };
    write_json(&args.out.join("attention.json"), &meta)?;
    println!(
        "attention of sample {} (block {block}, head {}) written to {}",
        sample.id,
        args.head,
        args.out.display()
    );
    Ok(())
}

fn run_profile(args: &Args) -> Result<()> {
    let scales: Vec<(String, ModelConfig)> = default_scales()
        .into_iter()
        .map(|(name, mut c)| {
            c.frames = args.frames;
            c.points = args.points;
            c.patch_size = args.patch;
            (name, c)
        })
        .collect();
    let ratio = args.mask_ratio.unwrap_or(0.9);
    let records = token_cost_profile(&scales, args.image_size, args.image_size, ratio)?;
    fs::create_dir_all(&args.out)?;
    write_jsonl(&args.out.join("profile.jsonl"), &records)?;
    for r in &records {
        println!(
            "{}: {} anatomical vs {} full-video tokens, {} visible at mask ratio {}, attention cost ratio {:.4}",
            r.scale,
            r.tokens_anat,
            r.tokens_full,
            r.tokens_visible,
            r.mask_ratio,
            r.attn_cost_estimate as f64 / r.attn_cost_full as f64
        );
    }
    Ok(())
}
