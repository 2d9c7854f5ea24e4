use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, mean_abs_error, rmse, weighted_f1, SeedSummary};
use super::schedule::Schedule;
use super::tracking::track_pass;
use crate::dataset::Sample;
use crate::error::{usage_err, Error, Result};
use crate::geometry::{extract_patches, Clip, PointTrajectorySet};
use crate::io::Checkpoint;
use crate::mae::MaskPlan;
use crate::model::Viact;
use crate::numerics::{AdamWState, ParamGrads};
use crate::rng::{self, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    Track,
    Classify,
    Ef,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pretrain => "pretrain",
            Task::Track => "track",
            Task::Classify => "classify",
            Task::Ef => "ef",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Task::Pretrain, Task::Track, Task::Classify, Task::Ef]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown task `{s}`")))
    }
}

/// Optimization budget and sampling policy of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub mask_ratio: f64,
    /// Largest frame spacing drawn for pre-training windows.
    pub max_stride: usize,
    /// Draw a random start frame per sample and epoch; otherwise frame 0.
    pub random_windows: bool,
    /// Extra tracker passes at the previous prediction.
    pub refine: usize,
    /// Emit a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 16,
            base_lr: 1.6e-2,
            seed: 0,
            mask_ratio: 0.9,
            max_stride: 3,
            random_windows: true,
            refine: 0,
            checkpoint_every: 10,
        }
    }

    pub fn finetune(task: Task) -> Self {
        match task {
            Task::Pretrain => Self::pretrain(),
            Task::Track => Self {
                epochs: 30,
                warmup_epochs: 3,
                checkpoint_every: 0,
                ..Self::pretrain()
            },
            Task::Classify | Task::Ef => Self {
                epochs: 30,
                warmup_epochs: 3,
                random_windows: false,
                checkpoint_every: 0,
                ..Self::pretrain()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return usage_err("epochs and batch size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return usage_err("warmup exceeds the number of epochs");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return usage_err(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.max_stride == 0 {
            return usage_err("max stride must be at least 1");
        }
        Ok(())
    }

    pub fn schedule(&self, samples: usize) -> Result<Schedule> {
        Schedule::new(
            self.base_lr,
            self.batch_size,
            self.warmup_epochs,
            self.epochs,
            samples.div_ceil(self.batch_size).max(1),
        )
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: Task,
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub me: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, for fine-tuning runs.
    pub best_epoch: Option<usize>,
}

impl MetricReport {
    fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            seed,
            epochs: Vec::new(),
            best_epoch: None,
        }
    }

    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// `epoch,lr,train_loss,val_loss` for plotting.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val));
        }
        out
    }
}

/// Clip and trajectories restricted to `frames` (indices may repeat).
fn take_frames(sample: &Sample, frames: &[usize]) -> Result<(Clip, PointTrajectorySet)> {
    let clip = &sample.clip;
    let pts = &sample.points;
    let hw = clip.height() * clip.width();
    let n = pts.points();
    let mut data = Vec::with_capacity(frames.len() * hw);
    let mut coords = Vec::with_capacity(frames.len() * n * 2);
    for &t in frames {
        data.extend_from_slice(&clip.data()[t * hw..(t + 1) * hw]);
        coords.extend_from_slice(&pts.coords()[t * n * 2..(t + 1) * n * 2]);
    }
    Ok((
        Clip::new(frames.len(), clip.height(), clip.width(), data)?,
        PointTrajectorySet::new(frames.len(), n, coords, pts.apex_index())?,
    ))
}

/// `len` frames from `start` at `stride`, repeating the final frame past the end.
fn window_frames(total: usize, start: usize, stride: usize, len: usize) -> Vec<usize> {
    (0..len).map(|k| (start + k * stride).min(total - 1)).collect()
}

/// Random pre-training window: stride uniform over the strides that fit,
/// then a uniform start. `None` if even stride 1 does not fit.
fn draw_pretrain_window<R: Rng>(total: usize, len: usize, max_stride: usize, rng: &mut R) -> Option<(usize, usize)> {
    let fits: Vec<usize> = (1..=max_stride).filter(|&s| (len - 1) * s < total).collect();
    if fits.is_empty() {
        return None;
    }
    let stride = fits[rng.random_range(0..fits.len())];
    let span = (len - 1) * stride + 1;
    let start = rng.random_range(0..=total - span);
    Some((start, stride))
}

fn draw_finetune_start<R: Rng>(total: usize, len: usize, random: bool, rng: &mut R) -> usize {
    if random && total > len {
        rng.random_range(0..=total - len)
    } else {
        0
    }
}

fn check_finite(loss: f64, grads: &ParamGrads) -> Result<()> {
    if !loss.is_finite() || !grads.l2_norm().is_finite() {
        return Err(Error::Numeric(format!("non-finite loss or gradient (loss {loss})")));
    }
    Ok(())
}

/// Average per-sample losses and gradients in job order, then take one
/// optimizer step unless `lr` is zero.
fn batch_step<J, F>(model: &mut Viact, opt: &mut AdamWState, jobs: &[J], lr: f64, f: F) -> Result<f64>
where
    J: Sync,
    F: Fn(&Viact, &J) -> Result<(f64, ParamGrads)> + Sync,
{
    let frozen: &Viact = model;
    let results: Vec<Result<(f64, ParamGrads)>> = jobs.par_iter().map(|j| f(frozen, j)).collect();
    let mut total = ParamGrads::empty(model.store().len());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let b = jobs.len() as f64;
    total.scale((1.0 / b) as f32);
    loss /= b;
    check_finite(loss, &total)?;
    if lr > 0.0 {
        opt.step(model.store_mut(), &total, lr)?;
    }
    Ok(loss)
}

struct MaeJob {
    clip: Clip,
    points: PointTrajectorySet,
    plan: MaskPlan,
}

fn mae_loss(model: &Viact, job: &MaeJob, train: bool) -> Result<(f64, ParamGrads)> {
    let patches = extract_patches(&job.clip, &job.points, model.config().patch_size)?;
    let mut s = model.session(train);
    let out = s.mae_forward(&patches, &job.points, &job.plan)?;
    let loss = s.tape.value(out.loss).item()? as f64;
    let grads = if train {
        s.backward(out.loss)?
    } else {
        ParamGrads::empty(model.store().len())
    };
    Ok((loss, grads))
}

/// Result of a pre-training run.
pub struct PretrainOutcome {
    pub model: Viact,
    pub report: MetricReport,
    /// State after the final epoch, resumable.
    pub checkpoint: Checkpoint,
}

fn pretrain_val_jobs(model: &Viact, val: &[&Sample], cfg: &TrainConfig) -> Result<Vec<MaeJob>> {
    let t = model.config().frames;
    let mut rng = rng::stream(cfg.seed, "mask.val");
    let mut jobs = Vec::new();
    for s in val {
        let (clip, points) = take_frames(s, &window_frames(s.clip.frames(), 0, 1, t))?;
        let plan = MaskPlan::sample(t * points.points(), cfg.mask_ratio, &mut rng)?;
        jobs.push(MaeJob { clip, points, plan });
    }
    Ok(jobs)
}

/// Anatomical masked-autoencoder pre-training on random windows.
///
/// `resume` continues from a checkpoint written by an earlier call with the
/// same data and config; the losses of the remaining epochs match an
/// uninterrupted run bit for bit. `on_checkpoint` receives the state every
/// `checkpoint_every` epochs.
pub fn pretrain(
    model: Viact,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return usage_err("pre-training needs at least one training clip");
    }
    let t = model.config().frames;
    let usable: Vec<&Sample> = train
        .iter()
        .copied()
        .filter(|s| {
            let ok = s.clip.frames() >= t;
            if !ok {
                log::warn!("skipping clip {}: {} frames < window of {t}", s.id, s.clip.frames());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return usage_err(format!("no training clip has the {t} frames a window needs"));
    }
    let schedule = cfg.schedule(usable.len())?;
    let (mut model, mut opt, mut step, first_epoch, mut data_rng, mut mask_rng) = match resume {
        Some(ck) => {
            let restore = |name: &str| -> Result<rng::Rng> {
                ck.rng_state(name)
                    .map(RngState::restore)
                    .ok_or_else(|| Error::Usage(format!("checkpoint lacks the `{name}` random stream")))
            };
            let data_rng = restore(rng::STREAM_DATA)?;
            let mask_rng = restore(rng::STREAM_MASK)?;
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Usage("checkpoint has no optimizer state to resume".into()))?;
            (ck.model, opt, ck.schedule_step, ck.epoch, data_rng, mask_rng)
        }
        None => {
            let opt = AdamWState::new(model.store());
            (
                model,
                opt,
                0,
                0,
                rng::stream(cfg.seed, rng::STREAM_DATA),
                rng::stream(cfg.seed, rng::STREAM_MASK),
            )
        }
    };
    let val_jobs = pretrain_val_jobs(&model, val, cfg)?;
    let mut report = MetricReport::new(Task::Pretrain, cfg.seed);
    let snapshot = |model: &Viact, opt: &AdamWState, step: u64, epoch: usize, d: &rng::Rng, m: &rng::Rng| {
        let mut ck = Checkpoint::new(Task::Pretrain.name(), model.clone());
        ck.optimizer = Some(opt.clone());
        ck.schedule_step = step;
        ck.epoch = epoch;
        ck.rng = vec![
            (rng::STREAM_DATA.to_string(), RngState::capture(d)),
            (rng::STREAM_MASK.to_string(), RngState::capture(m)),
        ];
        ck
    };

    for epoch in first_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut jobs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = usable[i];
                let (start, stride) = draw_pretrain_window(s.clip.frames(), t, cfg.max_stride, &mut data_rng)
                    .expect("usable clips fit a stride-1 window");
                let (clip, points) = take_frames(s, &window_frames(s.clip.frames(), start, stride, t))?;
                let plan = MaskPlan::sample(t * points.points(), cfg.mask_ratio, &mut mask_rng)?;
                jobs.push(MaeJob { clip, points, plan });
            }
            let lr = schedule.effective_lr(step + 1);
            let loss = batch_step(&mut model, &mut opt, &jobs, lr, |m, j| mae_loss(m, j, true))?;
            loss_sum += loss * jobs.len() as f64;
            last_lr = lr;
            step += 1;
        }
        let val_loss = if val_jobs.is_empty() {
            None
        } else {
            let losses = val_jobs
                .par_iter()
                .map(|j| mae_loss(&model, j, false).map(|r| r.0))
                .collect::<Result<Vec<f64>>>()?;
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        let record = EpochRecord {
            task: Task::Pretrain,
            seed: cfg.seed,
            epoch,
            lr: last_lr,
            train_loss: loss_sum / usable.len() as f64,
            val_loss,
            me: None,
            rmse: None,
            mae: None,
            accuracy: None,
            weighted_f1: None,
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.6} val {:?} lr {:.3e}",
            record.train_loss,
            record.val_loss,
            last_lr
        );
        report.epochs.push(record);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            on_checkpoint(&snapshot(&model, &opt, step, epoch + 1, &data_rng, &mask_rng))?;
        }
    }
    let checkpoint = snapshot(&model, &opt, step, cfg.epochs, &data_rng, &mask_rng);
    Ok(PretrainOutcome {
        model,
        report,
        checkpoint,
    })
}

/// Pre-train one copy of `init` per masking ratio.
pub fn mask_ratio_sweep(
    init: &Viact,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    ratios: &[f64],
) -> Result<Vec<(f64, PretrainOutcome)>> {
    ratios
        .iter()
        .map(|&r| {
            let c = TrainConfig {
                mask_ratio: r,
                ..cfg.clone()
            };
            pretrain(init.clone(), train, val, &c, None, &mut |_| Ok(())).map(|o| (r, o))
        })
        .collect()
}

pub const MASK_RATIO_GRID: [f64; 4] = [0.80, 0.85, 0.90, 0.95];

struct TaskJob {
    clip: Clip,
    points: PointTrajectorySet,
    label: u8,
    ef: f32,
}

/// Model output for one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: usize,
    /// Tracked `(x, y)` pairs, frame-major.
    pub points: Option<Vec<f32>>,
    pub truth_points: Option<Vec<f32>>,
    pub logit: Option<f64>,
    pub label: u8,
    pub ef: Option<f64>,
    pub ef_truth: f64,
}

/// Predictions of a whole split plus the metrics derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub task: Task,
    pub loss: f64,
    pub me: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub predictions: Vec<SamplePrediction>,
}

impl Evaluation {
    /// Recompute every metric from the stored predictions.
    pub fn from_predictions(task: Task, loss: f64, predictions: Vec<SamplePrediction>) -> Result<Self> {
        let mut e = Self {
            task,
            loss,
            me: None,
            rmse: None,
            mae: None,
            accuracy: None,
            weighted_f1: None,
            predictions,
        };
        match task {
            Task::Track => {
                let mut pred = Vec::new();
                let mut gt = Vec::new();
                for p in &e.predictions {
                    pred.extend(p.points.as_deref().unwrap_or(&[]));
                    gt.extend(p.truth_points.as_deref().unwrap_or(&[]));
                }
                e.me = Some(super::metrics::me_coords(&pred, &gt)?);
            }
            Task::Classify => {
                let pred: Vec<u8> = e.predictions.iter().map(|p| u8::from(p.logit.unwrap_or(0.0) > 0.0)).collect();
                let labels: Vec<u8> = e.predictions.iter().map(|p| p.label).collect();
                e.accuracy = Some(accuracy(&pred, &labels)?);
                e.weighted_f1 = Some(weighted_f1(&pred, &labels)?);
            }
            Task::Ef => {
                let pred: Vec<f64> = e.predictions.iter().map(|p| p.ef.unwrap_or(f64::NAN)).collect();
                let gt: Vec<f64> = e.predictions.iter().map(|p| p.ef_truth).collect();
                e.mae = Some(mean_abs_error(&pred, &gt)?);
                e.rmse = Some(rmse(&pred, &gt)?);
            }
            Task::Pretrain => return usage_err("pre-training has no prediction metrics"),
        }
        Ok(e)
    }
}

impl Evaluation {
    /// The metric best-epoch selection ranks by: ME, accuracy or EF MAE.
    pub fn headline(&self) -> Option<f64> {
        match self.task {
            Task::Track => self.me,
            Task::Classify => self.accuracy,
            Task::Ef => self.mae,
            Task::Pretrain => Some(self.loss),
        }
    }
}

/// Loss, gradients (if `train`) and prediction for one sample.
fn task_forward(
    model: &Viact,
    task: Task,
    job: &TaskJob,
    refine: usize,
    train: bool,
) -> Result<(f64, ParamGrads, SamplePrediction)> {
    let cfg = model.config();
    let mut pred = SamplePrediction {
        id: 0,
        points: None,
        truth_points: None,
        logit: None,
        label: job.label,
        ef: None,
        ef_truth: job.ef as f64,
    };
    let (loss, grads) = match task {
        Task::Track => {
            let queries = job.points.frame(0);
            let mut init = PointTrajectorySet::repeat_frame(&queries, cfg.frames, job.points.apex_index())?;
            for _ in 0..refine {
                init = track_pass(model, &job.clip, &init)?;
            }
            let patches = extract_patches(&job.clip, &init, cfg.patch_size)?;
            let mut s = model.session(train);
            let tokens = s.assemble_tokens(&patches, &init)?;
            let out = s.encode(&tokens, false)?;
            let p = s.predict_points(&out, &init)?;
            pred.points = Some(s.tape.value(p).data().to_vec());
            pred.truth_points = Some(job.points.coords().to_vec());
            let loss = s.tracking_loss(p, &job.points)?;
            let l = s.tape.value(loss).item()? as f64;
            let g = if train { s.backward(loss)? } else { ParamGrads::empty(0) };
            (l, g)
        }
        Task::Classify | Task::Ef => {
            let patches = extract_patches(&job.clip, &job.points, cfg.patch_size)?;
            let mut s = model.session(train);
            let tokens = s.assemble_tokens(&patches, &job.points)?;
            let out = s.encode(&tokens, false)?;
            let loss = if task == Task::Classify {
                let z = s.classification_head(&out)?;
                pred.logit = Some(s.tape.value(z).item()? as f64);
                s.tape.bce_with_logit(z, job.label as f32)?
            } else {
                let y = s.ef_head(&out)?;
                pred.ef = Some(s.tape.value(y).item()? as f64);
                s.ef_loss(y, job.ef)?
            };
            let l = s.tape.value(loss).item()? as f64;
            let g = if train { s.backward(loss)? } else { ParamGrads::empty(0) };
            (l, g)
        }
        Task::Pretrain => return usage_err("use `pretrain` for masked-autoencoder training"),
    };
    Ok((loss, grads, pred))
}

fn eval_jobs(model: &Viact, samples: &[&Sample]) -> Result<Vec<(usize, TaskJob)>> {
    let t = model.config().frames;
    samples
        .iter()
        .map(|s| {
            let (clip, points) = take_frames(s, &window_frames(s.clip.frames(), 0, 1, t))?;
            Ok((
                s.id,
                TaskJob {
                    clip,
                    points,
                    label: s.labels.label,
                    ef: s.labels.ef_fraction,
                },
            ))
        })
        .collect()
}

/// Evaluate `task` on the first window of every sample.
pub fn evaluate(model: &Viact, task: Task, samples: &[&Sample], refine: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return usage_err("evaluation over no samples");
    }
    let jobs = eval_jobs(model, samples)?;
    let results = jobs
        .par_iter()
        .map(|(id, j)| {
            task_forward(model, task, j, refine, false).map(|(l, _, mut p)| {
                p.id = *id;
                (l, p)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    Evaluation::from_predictions(task, loss, results.into_iter().map(|r| r.1).collect())
}

/// Mean tracking error of a tracker that never moves the queries.
pub fn identity_baseline_me(samples: &[&Sample], frames: usize) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in samples {
        let (_, points) = take_frames(s, &window_frames(s.clip.frames(), 0, 1, frames))?;
        let q = points.frame(0);
        for _ in 0..frames {
            pred.extend(q.iter().flat_map(|&(x, y)| [x, y]));
        }
        gt.extend_from_slice(points.coords());
    }
    super::metrics::me_coords(&pred, &gt)
}

/// Result of a fine-tuning run: the parameters of the best validation epoch.
pub struct FinetuneOutcome {
    pub model: Viact,
    pub report: MetricReport,
    pub best: Evaluation,
}

/// `true` if `a` beats `b` on the task's selection metric.
fn better(task: Task, a: &Evaluation, b: &Evaluation) -> bool {
    match task {
        Task::Track => a.me < b.me,
        Task::Classify => {
            a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.loss < b.loss)
        }
        Task::Ef => a.mae < b.mae,
        Task::Pretrain => a.loss < b.loss,
    }
}

/// Supervised fine-tuning of one head (and the encoder) with best-epoch
/// selection on `val`.
pub fn finetune(
    task: Task,
    model: Viact,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if task == Task::Pretrain {
        return usage_err("use `pretrain` for masked-autoencoder training");
    }
    if train.is_empty() || val.is_empty() {
        return usage_err("fine-tuning needs training and validation samples");
    }
    let t = model.config().frames;
    let schedule = cfg.schedule(train.len())?;
    let mut model = model;
    let mut opt = AdamWState::new(model.store());
    let mut rng = rng::stream(cfg.seed, rng::STREAM_DATA);
    let mut step = 0u64;
    let mut report = MetricReport::new(task, cfg.seed);
    let mut best: Option<(usize, Viact, Evaluation)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut jobs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = train[i];
                let start = draw_finetune_start(s.clip.frames(), t, cfg.random_windows, &mut rng);
                let (clip, points) = take_frames(s, &window_frames(s.clip.frames(), start, 1, t))?;
                jobs.push(TaskJob {
                    clip,
                    points,
                    label: s.labels.label,
                    ef: s.labels.ef_fraction,
                });
            }
            let lr = schedule.effective_lr(step + 1);
            let loss = batch_step(&mut model, &mut opt, &jobs, lr, |m, j| {
                task_forward(m, task, j, cfg.refine, true).map(|(l, g, _)| (l, g))
            })?;
            loss_sum += loss * jobs.len() as f64;
            last_lr = lr;
            step += 1;
        }
        let eval = evaluate(&model, task, val, cfg.refine)?;
        let record = EpochRecord {
            task,
            seed: cfg.seed,
            epoch,
            lr: last_lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: Some(eval.loss),
            me: eval.me,
            rmse: eval.rmse,
            mae: eval.mae,
            accuracy: eval.accuracy,
            weighted_f1: eval.weighted_f1,
        };
        log::info!(
            "{task} epoch {epoch}: loss {:.5} val {:.5} me {:?} acc {:?} mae {:?}",
            record.train_loss,
            eval.loss,
            eval.me,
            eval.accuracy,
            eval.mae
        );
        report.epochs.push(record);
        let improved = best.as_ref().is_none_or(|(_, _, b)| better(task, &eval, b));
        if improved {
            best = Some((epoch, model.clone(), eval));
        }
    }
    let (best_epoch, model, eval) = best.expect("at least one epoch ran");
    report.best_epoch = Some(best_epoch);
    Ok(FinetuneOutcome {
        model,
        report,
        best: eval,
    })
}

/// Fine-tune one model per seed (`make_model` builds the initial model of a
/// seed) and summarize the best-epoch headline metrics.
pub fn finetune_over_seeds(
    task: Task,
    make_model: &dyn Fn(u64) -> Result<Viact>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(Vec<FinetuneOutcome>, SeedSummary)> {
    let mut outcomes = Vec::with_capacity(seeds.len());
    let mut values = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        let out = finetune(task, make_model(seed)?, train, val, &c)?;
        values.push(out.best.headline().unwrap_or(f64::NAN));
        outcomes.push(out);
    }
    let summary = SeedSummary::from_values(&values)?;
    log::info!("{task} over {} seeds: {summary}", seeds.len());
    Ok((outcomes, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_draws_respect_clip_length() {
        let mut r = rng::stream(1, "t");
        for _ in 0..200 {
            let (start, stride) = draw_pretrain_window(36, 18, 3, &mut r).unwrap();
            assert!(stride <= 2, "stride 3 needs 52 frames");
            assert!(start + 17 * stride < 36);
        }
        let mut seen = [false; 4];
        for _ in 0..200 {
            seen[draw_pretrain_window(60, 18, 3, &mut r).unwrap().1] = true;
        }
        assert_eq!(seen, [false, true, true, true]);
        assert!(draw_pretrain_window(17, 18, 3, &mut r).is_none());
    }

    #[test]
    fn padding_repeats_the_final_frame() {
        assert_eq!(window_frames(5, 2, 1, 5), vec![2, 3, 4, 4, 4]);
        assert_eq!(window_frames(10, 1, 2, 3), vec![1, 3, 5]);
    }

    #[test]
    fn task_names_round_trip() {
        for t in [Task::Pretrain, Task::Track, Task::Classify, Task::Ef] {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("eval".parse::<Task>().is_err());
    }
}
