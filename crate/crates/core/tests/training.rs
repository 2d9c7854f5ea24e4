use viact_core::dataset::Dataset;
use viact_core::geometry::extract_patches;
use viact_core::mae::MaskPlan;
use viact_core::numerics::AdamWState;
use viact_core::phantom::{band_mean_intensity, generate_cohort, Cohort, CohortSpec, PhantomSpec};
use viact_core::training::{
    evaluate, finetune, finetune_over_seeds, identity_baseline_me, mask_ratio_sweep, pretrain, MASK_RATIO_GRID,
};
use viact_core::{rng, DecoderConfig, ModelConfig, PosEmbedVariant, Task, TrainConfig, Viact};

fn small_cohort(n: usize, seed: u64) -> Cohort {
    cohort_with(n, seed, |_| {})
}

fn cohort_with(n: usize, seed: u64, edit: impl Fn(&mut PhantomSpec)) -> Cohort {
    let mut base = PhantomSpec {
        height: 64,
        width: 64,
        frames: 8,
        rows: 1,
        contour_points: 9,
        band_half_width: 5.0,
        row_spacing: 3.0,
        grain: 2.0,
        ..PhantomSpec::default()
    };
    edit(&mut base);
    let ranges = CohortSpec {
        base,
        center_jitter: 3.0,
        ..CohortSpec::default()
    };
    generate_cohort(n, &ranges, seed).unwrap()
}

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny().with_dims(16, 2, 1);
    cfg.patch_size = 4;
    cfg.frames = 4;
    cfg.points = 9;
    cfg.coord_scale = 64.0;
    cfg.pos_embed = PosEmbedVariant::ApexSincos;
    cfg
}

fn small_model(seed: u64) -> Viact {
    Viact::new(small_config(), DecoderConfig { dim: 8, depth: 1, heads: 2 }, &mut rng::stream(seed, rng::STREAM_INIT))
        .unwrap()
}

fn budget(task: Task, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::finetune(task);
    c.warmup_epochs = c.warmup_epochs * epochs / c.epochs;
    c.epochs = epochs;
    c
}

#[test]
fn mae_overfits_a_single_clip() {
    let cohort = small_cohort(10, 1);
    let s = &cohort.samples[0];
    let clip = s.clip.window(0, 1, 4).unwrap();
    let pts = s.points.window(0, 1, 4).unwrap();
    let patches = extract_patches(&clip, &pts, 4).unwrap();
    let plan = MaskPlan::sample(36, 0.75, &mut rng::stream(0, rng::STREAM_MASK)).unwrap();
    let mut model = small_model(2);
    let mut opt = AdamWState::new(model.store());
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut sess = model.session(true);
        let out = sess.mae_forward(&patches, &pts, &plan).unwrap();
        losses.push(sess.tape.value(out.loss).item().unwrap());
        let grads = sess.backward(out.loss).unwrap();
        opt.step(model.store_mut(), &grads, 2e-3).unwrap();
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn pretraining_loss_decreases() {
    let cohort = small_cohort(20, 2);
    let ds = Dataset::from_cohort(&cohort);
    let mut cfg = TrainConfig::pretrain();
    cfg.epochs = 10;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 4;
    let out = pretrain(small_model(0), &ds.train(), &ds.val(), &cfg, None, &mut |_| Ok(())).unwrap();
    let e = &out.report.epochs;
    assert_eq!(e.len(), 10);
    assert!(e[9].train_loss < e[0].train_loss, "{} -> {}", e[0].train_loss, e[9].train_loss);
}

#[test]
fn pretraining_resumes_bit_exactly() {
    let cohort = small_cohort(12, 3);
    let ds = Dataset::from_cohort(&cohort);
    let mut cfg = TrainConfig::pretrain();
    cfg.epochs = 6;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 4;
    cfg.checkpoint_every = 3;
    let mut saved = Vec::new();
    let full = pretrain(small_model(0), &ds.train(), &ds.val(), &cfg, None, &mut |ck| {
        saved.push(ck.to_bytes()?);
        Ok(())
    })
    .unwrap();
    assert_eq!(saved.len(), 1);
    let ck = viact_core::Checkpoint::from_bytes(&saved[0]).unwrap();
    assert_eq!(ck.epoch, 3);
    let resumed = pretrain(small_model(99), &ds.train(), &ds.val(), &cfg, Some(ck), &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.report.epochs, full.report.epochs[3..]);
    assert_eq!(resumed.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());

    let again = pretrain(small_model(0), &ds.train(), &ds.val(), &cfg, None, &mut |_| Ok(())).unwrap();
    assert_eq!(again.report, full.report);
}

#[test]
fn mask_ratio_sweep_reports_each_ratio() {
    let cohort = small_cohort(10, 4);
    let ds = Dataset::from_cohort(&cohort);
    let mut cfg = TrainConfig::pretrain();
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.batch_size = 4;
    let runs = mask_ratio_sweep(&small_model(0), &ds.train(), &ds.val(), &cfg, &MASK_RATIO_GRID).unwrap();
    let ratios: Vec<f64> = runs.iter().map(|r| r.0).collect();
    assert_eq!(ratios, vec![0.80, 0.85, 0.90, 0.95]);
    for (_, out) in &runs {
        assert_eq!(out.report.epochs.len(), 1);
        assert!(out.report.epochs[0].train_loss.is_finite());
    }
}

#[test]
fn constant_ef_label_is_learned() {
    let cohort = small_cohort(14, 5);
    let mut ds = Dataset::from_cohort(&cohort);
    for s in &mut ds.samples {
        s.labels.ef_fraction = 0.42;
    }
    let mut cfg = budget(Task::Ef, 30);
    cfg.batch_size = 4;
    cfg.base_lr = 0.1;
    let out = finetune(Task::Ef, small_model(1), &ds.train(), &ds.val(), &cfg).unwrap();
    for p in &out.best.predictions {
        let ef = p.ef.unwrap();
        assert!((ef - 0.42).abs() <= 0.01, "sample {} predicts {ef}", p.id);
    }
}

/// Logistic regression on one feature by gradient descent in f64.
fn logistic_fit(x: &[f64], y: &[u8]) -> (f64, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..5000 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (zi, &yi) in z.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(w * zi + b)).exp());
            gw += (p - yi as f64) * zi;
            gb += p - yi as f64;
        }
        w -= 0.5 * gw / z.len() as f64;
        b -= 0.5 * gb / z.len() as f64;
    }
    // back to the raw feature scale
    (w / sd, b - w * mean / sd)
}

#[test]
fn separable_cohort_is_classified_perfectly() {
    let cohort = cohort_with(20, 6, |b| b.diseased_brightness = 2.0);
    let train = cohort.train();
    let x: Vec<f64> = train.iter().map(|s| band_mean_intensity(s) as f64).collect();
    let y: Vec<u8> = train.iter().map(|s| s.label()).collect();
    let (w, b) = logistic_fit(&x, &y);
    let oracle_hits = x.iter().zip(&y).filter(|(xi, &yi)| u8::from(w * **xi + b > 0.0) == yi).count();
    assert_eq!(oracle_hits, x.len(), "band brightness separates the labels");

    let ds = Dataset::from_cohort(&cohort);
    let mut cfg = budget(Task::Classify, 60);
    cfg.batch_size = 4;
    cfg.base_lr = 0.016;
    let out = finetune(Task::Classify, small_model(2), &ds.train(), &ds.val(), &cfg).unwrap();
    let on_train = evaluate(&out.model, Task::Classify, &ds.train(), 0).unwrap();
    assert_eq!(on_train.accuracy, Some(1.0));
}

#[test]
fn tracking_beats_the_identity_baseline() {
    // half a contraction cycle per model window
    let cohort = cohort_with(40, 7, |b| {
        b.period = 8.0;
        b.amplitude = 0.1;
    });
    let ds = Dataset::from_cohort(&cohort);
    let identity = identity_baseline_me(&ds.val(), 4).unwrap();
    let mut cfg = budget(Task::Track, 40);
    cfg.batch_size = 4;
    cfg.base_lr = 0.32;
    let out = finetune(Task::Track, small_model(3), &ds.train(), &ds.val(), &cfg).unwrap();
    let me = out.best.me.unwrap();
    assert!(me <= 0.7 * identity, "ME {me} vs identity {identity}");
}

#[test]
fn seed_summary_over_five_runs() {
    let cohort = small_cohort(10, 8);
    let ds = Dataset::from_cohort(&cohort);
    let mut cfg = budget(Task::Ef, 2);
    cfg.batch_size = 4;
    let seeds = [0, 1, 2, 3, 4];
    let (runs, summary) =
        finetune_over_seeds(Task::Ef, &|s| Ok(small_model(s)), &ds.train(), &ds.val(), &cfg, &seeds).unwrap();
    assert_eq!(runs.len(), 5);
    assert_eq!(summary.n, 5);
    let maes: Vec<f64> = runs.iter().map(|r| r.best.mae.unwrap()).collect();
    let mean = maes.iter().sum::<f64>() / 5.0;
    assert!((summary.mean - mean).abs() < 1e-12);
    assert!(summary.std > 0.0, "different seeds give different runs");
    assert!(summary.to_string().contains('±'));
    for (r, &s) in runs.iter().zip(&seeds) {
        assert_eq!(r.report.seed, s);
    }
}
