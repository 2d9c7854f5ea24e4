use rand::Rng;
use viact_core::numerics::{AdamWState, ParamGrads, ParamStore, Tape, Tensor};
use viact_core::rng;

fn random(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let mut r = rng::stream(seed, "numerics");
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn gelu_matches_tanh_formula() {
    let xs = [-4.0f32, -1.5, -0.3, 0.0, 0.2, 1.0, 2.5, 6.0];
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, xs.len()], xs.to_vec()).unwrap(), false).unwrap();
    let y = t.gelu(x).unwrap();
    for (got, &x) in t.value(y).data().iter().zip(&xs) {
        assert!((*got as f64 - gelu_tanh(x as f64)).abs() < 1e-6, "gelu({x}) = {got}");
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let x = random(&[5, 32], 1, 10.0);
    let mut t = Tape::new();
    let xv = t.leaf(x, false).unwrap();
    let g = t.leaf(Tensor::full(&[32], 1.0), false).unwrap();
    let b = t.leaf(Tensor::zeros(&[32]), false).unwrap();
    let y = t.layer_norm(xv, g, b, 1e-6).unwrap();
    for r in 0..5 {
        let row: Vec<f64> = t.value(y).row(r).iter().map(|&v| v as f64).collect();
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "row {r} variance {var}");
    }
}

#[test]
fn softmax_is_stable_and_normalized() {
    let x = Tensor::new(vec![2, 3], vec![1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0]).unwrap();
    let mut t = Tape::new();
    let xv = t.leaf(x, false).unwrap();
    let y = t.softmax_rows(xv).unwrap();
    let out = t.value(y);
    assert!(out.all_finite());
    for r in 0..2 {
        let s: f64 = out.row(r).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    // shift invariance: the first row equals softmax(0, 1, 2)
    let e: Vec<f64> = [0.0f64, 1.0, 2.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    for (got, want) in out.row(0).iter().zip(e.iter().map(|v| v / z)) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

/// Scaled dot-product attention per head in f64, heads taking contiguous
/// column blocks.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (m, d) = q.dims2();
    let dh = d / heads;
    let mut out = vec![0.0f64; m * d];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    (0..dh).map(|c| q.row(i)[c0 + c] as f64 * k.row(j)[c0 + c] as f64).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                out[i * d + c0 + c] = (0..m).map(|j| w[j] / z * v.row(j)[c0 + c] as f64).sum();
            }
        }
    }
    out
}

#[test]
fn attention_matches_f64_oracle() {
    for (m, d, heads, seed) in [(7, 12, 3, 1), (1, 4, 1, 2), (20, 16, 2, 3)] {
        let q = random(&[m, d], seed, 2.0);
        let k = random(&[m, d], seed + 10, 2.0);
        let v = random(&[m, d], seed + 20, 2.0);
        let mut t = Tape::new();
        let (qv, kv, vv) = (
            t.leaf(q.clone(), false).unwrap(),
            t.leaf(k.clone(), false).unwrap(),
            t.leaf(v.clone(), false).unwrap(),
        );
        let y = t.attention(qv, kv, vv, heads).unwrap();
        let want = attention_oracle(&q, &k, &v, heads);
        for (got, want) in t.value(y).data().iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-5, "m={m} d={d}: {got} vs {want}");
        }
        let (h, probs) = t.attention_probs(y).unwrap();
        assert_eq!(h, heads);
        for row in probs.chunks(m) {
            assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn adamw_constant_gradient_closed_form() {
    // with a constant gradient both bias-corrected moments are exact, so
    // every step moves by lr * g / (|g| + eps) after decoupled decay
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![3], vec![0.5, -2.0, 1.0]).unwrap(), true).unwrap();
    let b = store.add("b", Tensor::new(vec![3], vec![0.5, -2.0, 1.0]).unwrap(), false).unwrap();
    let g = [0.3f32, -1.2, 4.0];
    let mut grads = ParamGrads::empty(2);
    grads.set(w, g.to_vec());
    grads.set(b, g.to_vec());
    let mut opt = AdamWState::new(&store);
    let (lr, wd, eps) = (1e-2f64, 0.05f64, 1e-8f64);
    let mut want_w: Vec<f64> = vec![0.5, -2.0, 1.0];
    let mut want_b = want_w.clone();
    for _ in 0..5 {
        opt.step(&mut store, &grads, lr).unwrap();
        for i in 0..3 {
            let gi = g[i] as f64;
            let step = lr * gi / (gi.abs() + eps);
            want_w[i] = want_w[i] * (1.0 - lr * wd) - step;
            want_b[i] -= step;
        }
    }
    for i in 0..3 {
        assert!((store.value(w).data()[i] as f64 - want_w[i]).abs() < 1e-5);
        assert!((store.value(b).data()[i] as f64 - want_b[i]).abs() < 1e-5);
    }
    assert!(opt.step(&mut store, &grads, 0.0).is_err());
}

#[test]
fn adamw_skips_params_without_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::full(&[2], 1.0), true).unwrap();
    let b = store.add("b", Tensor::full(&[2], 1.0), true).unwrap();
    let mut grads = ParamGrads::empty(2);
    grads.set(a, vec![1.0, 1.0]);
    let mut opt = AdamWState::new(&store);
    opt.step(&mut store, &grads, 0.1).unwrap();
    assert_eq!(store.value(b).data(), &[1.0, 1.0]);
    assert_ne!(store.value(a).data(), &[1.0, 1.0]);
}

fn small_graph(x: &Tensor, w: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true).unwrap();
    let wv = t.leaf(w.clone(), true).unwrap();
    let h = t.linear(xv, wv, None).unwrap();
    let h = t.gelu(h).unwrap();
    let a = t.attention(h, h, h, 2).unwrap();
    let l = t.mean(a).unwrap();
    let g = t.backward(l).unwrap();
    (g.wrt(xv).unwrap().to_vec(), g.wrt(wv).unwrap().to_vec())
}

#[test]
fn repeated_passes_are_bitwise_identical() {
    let x = random(&[9, 6], 4, 1.0);
    let w = random(&[6, 8], 5, 1.0);
    assert_eq!(small_graph(&x, &w), small_graph(&x, &w));
}

#[test]
fn second_backward_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[2, 2], 0.5), true).unwrap();
    let l = t.sum(x).unwrap();
    t.backward(l).unwrap();
    assert!(matches!(t.backward(l), Err(viact_core::Error::Usage(_))));
}

#[test]
fn backward_needs_a_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[2, 2], 0.5), true).unwrap();
    let y = t.gelu(x).unwrap();
    assert!(t.backward(y).is_err());
}
