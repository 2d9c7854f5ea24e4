//! Central finite differences (h = 1e-3) against the tape's gradients.

use rand::Rng;
use viact_core::geometry::extract_patches;
use viact_core::mae::MaskPlan;
use viact_core::numerics::{Tape, Tensor, Var};
use viact_core::{rng, Clip, DecoderConfig, ModelConfig, PointTrajectorySet, PosEmbedVariant, Viact};

const H: f32 = 1e-3;
const TOL: f64 = 1e-2;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "fd");
    Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0))
}

/// Differentiate `build` with respect to every element of every input.
fn check_op<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item().unwrap() as f64
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= H;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H as f64));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err <= TOL, "{name}: input {i} relative error {err:.2e}");
    }
}

/// Reduce any output to a scalar through a fixed random quadratic.
fn quad(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let target = tape.constant(random(&shape, seed)).unwrap();
    tape.mse(out, target).unwrap()
}

pub fn matmul_and_linear() {
    check_op("matmul", vec![random(&[3, 4], 1), random(&[4, 5], 2)], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        quad(t, y, 3)
    });
    check_op("linear", vec![random(&[2, 3, 4], 4), random(&[4, 5], 5), random(&[5], 6)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        quad(t, y, 7)
    });
}

pub fn elementwise_ops() {
    check_op("add", vec![random(&[3, 4], 1), random(&[3, 4], 2)], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        quad(t, y, 3)
    });
    check_op("add_row", vec![random(&[3, 4], 1), random(&[4], 2)], |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        quad(t, y, 3)
    });
    check_op("scale", vec![random(&[3, 4], 1)], |t, v| {
        let y = t.scale(v[0], -1.7).unwrap();
        quad(t, y, 3)
    });
    check_op("gelu", vec![random(&[3, 4], 8).map_for_test(|x| 3.0 * x)], |t, v| {
        let y = t.gelu(v[0]).unwrap();
        quad(t, y, 3)
    });
    check_op("sigmoid", vec![random(&[3, 4], 9).map_for_test(|x| 4.0 * x)], |t, v| {
        let y = t.sigmoid(v[0]).unwrap();
        quad(t, y, 3)
    });
}

pub fn normalization_and_softmax() {
    check_op("layer_norm", vec![random(&[3, 6], 1), random(&[6], 2), random(&[6], 3)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        quad(t, y, 4)
    });
    check_op("softmax", vec![random(&[3, 5], 5).map_for_test(|x| 3.0 * x)], |t, v| {
        let y = t.softmax_rows(v[0]).unwrap();
        quad(t, y, 6)
    });
}

pub fn attention_all_inputs() {
    check_op("attention", vec![random(&[5, 4], 1), random(&[5, 4], 2), random(&[5, 4], 3)], |t, v| {
        let y = t.attention(v[0], v[1], v[2], 2).unwrap();
        quad(t, y, 4)
    });
}

pub fn indexing_and_reductions() {
    check_op("gather_rows", vec![random(&[4, 3], 1)], |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap();
        quad(t, y, 2)
    });
    check_op("concat_rows", vec![random(&[1, 3], 1), random(&[4, 3], 2)], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]]).unwrap();
        quad(t, y, 3)
    });
    check_op("sum", vec![random(&[3, 4], 1)], |t, v| {
        let y = t.gelu(v[0]).unwrap();
        t.sum(y).unwrap()
    });
    check_op("mean", vec![random(&[3, 4], 1)], |t, v| {
        let y = t.gelu(v[0]).unwrap();
        t.mean(y).unwrap()
    });
}

pub fn losses() {
    check_op("mse", vec![random(&[3, 4], 1), random(&[3, 4], 2)], |t, v| t.mse(v[0], v[1]).unwrap());
    // differences stay well away from the kink at zero
    let a = random(&[3, 4], 1);
    let b = a.clone().map_for_test(|x| x + if x > 0.0 { 0.5 } else { -0.5 });
    check_op("l1", vec![a, b], |t, v| t.l1(v[0], v[1]).unwrap());
    for label in [0.0, 1.0] {
        for z in [-3.0f32, -0.2, 0.7, 5.0] {
            check_op("bce", vec![Tensor::new(vec![1, 1], vec![z]).unwrap()], |t, v| {
                t.bce_with_logit(v[0], label).unwrap()
            });
        }
    }
}

trait MapForTest {
    fn map_for_test(self, f: impl Fn(f32) -> f32) -> Tensor;
}

impl MapForTest for Tensor {
    fn map_for_test(self, f: impl Fn(f32) -> f32) -> Tensor {
        let shape = self.shape().to_vec();
        Tensor::new(shape, self.data().iter().map(|&x| f(x)).collect()).unwrap()
    }
}

fn micro(variant: PosEmbedVariant) -> Viact {
    let mut cfg = ModelConfig::tiny().with_dims(8, 2, 1);
    cfg.patch_size = 2;
    cfg.frames = 2;
    cfg.points = 3;
    cfg.pos_embed = variant;
    Viact::new(cfg, DecoderConfig { dim: 4, depth: 1, heads: 1 }, &mut rng::stream(11, rng::STREAM_INIT)).unwrap()
}

fn micro_data() -> (Clip, PointTrajectorySet) {
    let mut r = rng::stream(12, "fd.data");
    let clip = Clip::new(2, 8, 8, (0..128).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
    let pts = PointTrajectorySet::new(2, 3, vec![2.3, 3.1, 4.6, 2.2, 5.5, 5.4, 2.8, 3.3, 4.1, 2.9, 5.2, 4.7], Some(1)).unwrap();
    (clip, pts)
}

/// Loss of one micro-model pass; `train` decides whether gradients exist.
type LossFn<'a> = dyn Fn(&Viact, bool) -> (f64, Option<viact_core::numerics::ParamGrads>) + 'a;

fn check_model(name: &str, model: &Viact, loss: &LossFn<'_>) {
    let (_, grads) = loss(model, true);
    let grads = grads.unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id);
        let numel = model.store().value(id).numel();
        for e in 0..numel {
            let mut plus = model.clone();
            plus.store_mut().value_mut(id).data_mut()[e] += H;
            let mut minus = model.clone();
            minus.store_mut().value_mut(id).data_mut()[e] -= H;
            let n = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * H as f64);
            analytic.push(g.map_or(0.0, |g| g[e] as f64));
            numeric.push(n);
        }
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err <= TOL, "{name}: end-to-end relative error {err:.2e}");
}

pub fn micro_model_end_to_end() {
    let (clip, pts) = micro_data();
    for variant in PosEmbedVariant::ALL {
        let model = micro(variant);
        let init = PointTrajectorySet::repeat_frame(&pts.frame(0), 2, Some(1)).unwrap();
        let patches = extract_patches(&clip, &init, 2).unwrap();
        let truth = pts.translate(0.37, -0.21);
        check_model(&format!("track/{variant}"), &model, &|m, train| {
            let mut s = m.session(train);
            let tb = s.assemble_tokens(&patches, &init).unwrap();
            let out = s.encode(&tb, false).unwrap();
            let p = s.predict_points(&out, &init).unwrap();
            let l = s.tracking_loss(p, &truth).unwrap();
            let v = s.tape.value(l).item().unwrap() as f64;
            (v, train.then(|| s.backward(l).unwrap()))
        });

        let patches = extract_patches(&clip, &pts, 2).unwrap();
        check_model(&format!("classify/{variant}"), &model, &|m, train| {
            let mut s = m.session(train);
            let tb = s.assemble_tokens(&patches, &pts).unwrap();
            let out = s.encode(&tb, false).unwrap();
            let z = s.classification_head(&out).unwrap();
            let l = s.tape.bce_with_logit(z, 1.0).unwrap();
            let v = s.tape.value(l).item().unwrap() as f64;
            (v, train.then(|| s.backward(l).unwrap()))
        });
        check_model(&format!("ef/{variant}"), &model, &|m, train| {
            let mut s = m.session(train);
            let tb = s.assemble_tokens(&patches, &pts).unwrap();
            let out = s.encode(&tb, false).unwrap();
            let y = s.ef_head(&out).unwrap();
            let l = s.ef_loss(y, 0.62).unwrap();
            let v = s.tape.value(l).item().unwrap() as f64;
            (v, train.then(|| s.backward(l).unwrap()))
        });
        let plan = MaskPlan::from_masked(6, 0.5, vec![0, 4, 5]).unwrap();
        check_model(&format!("mae/{variant}"), &model, &|m, train| {
            let mut s = m.session(train);
            let out = s.mae_forward(&patches, &pts, &plan).unwrap();
            let v = s.tape.value(out.loss).item().unwrap() as f64;
            (v, train.then(|| s.backward(out.loss).unwrap()))
        });
    }
}
