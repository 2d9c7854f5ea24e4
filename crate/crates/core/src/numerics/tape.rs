//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever the
//! backward pass needs. `backward` walks the nodes in reverse insertion
//! order, which is a reverse topological order because inputs always
//! precede their consumers.

use super::gemm::{gemm, matmul, View};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::Tensor;
use crate::error::{shape_err, usage_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2/pi), for the tanh form of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: f32 },
    Gelu { x: Var },
    Sigmoid { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    Mse { pred: Var, target: Var },
    L1 { pred: Var, target: Var },
    Bce { logit: Var, label: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Single use: `backward` may run once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input tensor; `requires_grad` makes its gradient available after `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Bring a trainable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.push(store.value(id).clone(), Op::Param, true, "param")?;
        self.params.push((id, v));
        Ok(v)
    }

    /// Parameter value without gradient tracking.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.value(b).shape().len() != 2 {
            return shape_err(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    /// `x(m x in) * w(in x out) + b(out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2();
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != k {
            return shape_err(format!(
                "linear input {:?} with weight {:?}",
                self.value(x).shape(),
                ws
            ));
        }
        let n = ws[1];
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return shape_err(format!("linear bias length {} != {n}", bias.len()));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            m,
            k,
            n,
            1.0,
            View::rowmajor(self.value(x).data(), k),
            View::rowmajor(self.value(w).data(), n),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            n,
            1,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg, "add")
    }

    /// Add a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        if self.value(row).numel() != n {
            return shape_err(format!(
                "add_row {:?} + {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, row]);
        self.push(Tensor::new(shape, data)?, Op::AddRow { x, row }, rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Scale { x, factor }, rg, "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.check_finite("gelu input")?;
        let data = t.data().iter().map(|&v| gelu_scalar(v as f64) as f32).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Gelu { x }, rg, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v as f64) as f32).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Sigmoid { x }, rg, "sigmoid")
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return shape_err(format!(
                "layer_norm width {n} with gamma {:?} beta {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for c in 0..n {
                let h = ((row[c] as f64 - mean) * rs) as f32;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data)?, Op::Softmax { x }, rg, "softmax")
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are `(tokens x dim)` with heads occupying contiguous column
    /// blocks of width `dim / heads`. The output has the same layout; the caller
    /// applies the output projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (m, d) = self.value(q).dims2();
        if self.value(k).dims2() != (m, d) || self.value(v).dims2() != (m, d) {
            return shape_err(format!(
                "attention q {:?} k {:?} v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("dim {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0f32; heads * m * m];
        let mut out = vec![0.0f32; m * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * m * m..(h + 1) * m * m];
            gemm(
                m,
                dh,
                m,
                scale,
                View::strided(&qd[off..], d, 1),
                View::strided(&kd[off..], 1, d),
                0.0,
                p,
                m,
                1,
            );
            for row in p.chunks_exact_mut(m) {
                softmax_in_place(row);
            }
            gemm(
                m,
                m,
                dh,
                1.0,
                View::rowmajor(p, m),
                View::strided(&vd[off..], d, 1),
                0.0,
                &mut out[off..],
                d,
                1,
            );
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new(vec![m, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Attention weights `(heads x tokens x tokens)` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[f32])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs.as_slice())),
            _ => None,
        }
    }

    /// Rows of `x` picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return shape_err(format!("gather_rows index {bad} out of {m} rows"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![index.len(), n], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Stack row blocks vertically. All parts share the last dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing");
        };
        let n = self.value(first).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != n {
                return shape_err(format!("concat_rows width {c} != {n}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
            "concat_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return shape_err("mean of empty tensor");
        }
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Mean { x }, rg, "mean")
    }

    fn check_pair(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        if self.value(a).numel() == 0 {
            return shape_err(format!("{what} of empty tensors"));
        }
        Ok(())
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_pair(pred, target, "mse")?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let s = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        self.push(Tensor::scalar(s as f32), Op::Mse { pred, target }, rg, "mse")
    }

    /// Sum of absolute differences. The subgradient at zero is zero.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_pair(pred, target, "l1")?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let s = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>();
        let rg = self.rg(&[pred, target]);
        self.push(Tensor::scalar(s as f32), Op::L1 { pred, target }, rg, "l1")
    }

    /// Binary cross-entropy on a single logit.
    pub fn bce_with_logit(&mut self, logit: Var, label: f32) -> Result<Var> {
        if label != 0.0 && label != 1.0 {
            return usage_err(format!("bce label must be 0 or 1, got {label}"));
        }
        let z = self.value(logit).item()? as f64;
        let y = label as f64;
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let rg = self.rg(&[logit]);
        self.push(Tensor::scalar(loss as f32), Op::Bce { logit, label }, rg, "bce")
    }

    /// Back-propagate from a scalar. Consumes the recording: a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return usage_err("backward already ran on this tape; re-run the forward pass");
        }
        if !self.value(loss).is_scalar() {
            return usage_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                acc(*a, &mut |ga| {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rowmajor(g, n),
                        View::transposed(val(*b).data(), n),
                        1.0,
                        ga,
                        k,
                        1,
                    )
                });
                acc(*b, &mut |gb| {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(val(*a).data(), k),
                        View::rowmajor(g, n),
                        1.0,
                        gb,
                        n,
                        1,
                    )
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = val(*x).dims2();
                let n = val(*w).shape()[1];
                acc(*x, &mut |gx| {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rowmajor(g, n),
                        View::transposed(val(*w).data(), n),
                        1.0,
                        gx,
                        k,
                        1,
                    )
                });
                acc(*w, &mut |gw| {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(val(*x).data(), k),
                        View::rowmajor(g, n),
                        1.0,
                        gw,
                        n,
                        1,
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for (c, slot) in gb.iter_mut().enumerate() {
                            let s: f64 = (0..m).map(|r| g[r * n + c] as f64).sum();
                            *slot += s as f32;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::AddRow { x, row } => {
                acc(*x, &mut |gx| add_assign(gx, g));
                let n = val(*row).numel();
                let m = g.len() / n;
                acc(*row, &mut |gr| {
                    for (c, slot) in gr.iter_mut().enumerate() {
                        let s: f64 = (0..m).map(|r| g[r * n + c] as f64).sum();
                        *slot += s as f32;
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b)
                });
            }
            Op::Gelu { x } => {
                let xs = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((slot, &xv), &gv) in gx.iter_mut().zip(xs).zip(g) {
                        *slot += (gelu_grad(xv as f64) * gv as f64) as f32;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let ys = node.value.data();
                acc(*x, &mut |gx| {
                    for ((slot, &y), &gv) in gx.iter_mut().zip(ys).zip(g) {
                        *slot += y * (1.0 - y) * gv;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).numel();
                let m = xhat.len() / n;
                let gam = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (c, slot) in gg.iter_mut().enumerate() {
                        let s: f64 = (0..m)
                            .map(|r| g[r * n + c] as f64 * xhat[r * n + c] as f64)
                            .sum();
                        *slot += s as f32;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (c, slot) in gb.iter_mut().enumerate() {
                        let s: f64 = (0..m).map(|r| g[r * n + c] as f64).sum();
                        *slot += s as f32;
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0f64;
                        let mut mean_dh = 0.0f64;
                        for c in 0..n {
                            let d = gr[c] as f64 * gam[c] as f64;
                            mean_d += d;
                            mean_dh += d * hr[c] as f64;
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let rs = rstd[r] as f64;
                        for c in 0..n {
                            let d = gr[c] as f64 * gam[c] as f64;
                            gx[r * n + c] += (rs * (d - mean_d - hr[c] as f64 * mean_dh)) as f32;
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let ys = node.value.data();
                let n = node.value.dims2().1;
                acc(*x, &mut |gx| {
                    for ((gxr, yr), gr) in gx
                        .chunks_exact_mut(n)
                        .zip(ys.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        softmax_backward_row(yr, gr, gxr);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::GatherRows { x, index } => {
                let n = val(*x).dims2().1;
                acc(*x, &mut |gx| {
                    for (r, &src) in index.iter().enumerate() {
                        add_assign(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |gp| add_assign(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Sum { x } => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean { x } => {
                let n = val(*x).numel() as f32;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let t = val(*target).data();
                let c = 2.0 * g[0] as f64 / p.len() as f64;
                acc(*pred, &mut |gp| {
                    for ((slot, &a), &b) in gp.iter_mut().zip(p).zip(t) {
                        *slot += (c * (a as f64 - b as f64)) as f32;
                    }
                });
                acc(*target, &mut |gt| {
                    for ((slot, &a), &b) in gt.iter_mut().zip(p).zip(t) {
                        *slot -= (c * (a as f64 - b as f64)) as f32;
                    }
                });
            }
            Op::L1 { pred, target } => {
                let p = val(*pred).data();
                let t = val(*target).data();
                let sign = |a: f32, b: f32| {
                    if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*pred, &mut |gp| {
                    for ((slot, &a), &b) in gp.iter_mut().zip(p).zip(t) {
                        *slot += g[0] * sign(a, b);
                    }
                });
                acc(*target, &mut |gt| {
                    for ((slot, &a), &b) in gt.iter_mut().zip(p).zip(t) {
                        *slot -= g[0] * sign(a, b);
                    }
                });
            }
            Op::Bce { logit, label } => {
                let z = val(*logit).data()[0] as f64;
                let d = (sigmoid(z) - *label as f64) * g[0] as f64;
                acc(*logit, &mut |gl| gl[0] += d as f32);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (m, d) = self.value(q).dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let need = |x: Var| self.nodes[x.0].requires_grad;
        let mut gq = need(q).then(|| vec![0.0f32; m * d]);
        let mut gk = need(k).then(|| vec![0.0f32; m * d]);
        let mut gv = need(v).then(|| vec![0.0f32; m * d]);
        let mut dp = vec![0.0f32; m * m];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * m * m..(h + 1) * m * m];
            if let Some(gv) = gv.as_mut() {
                // dV = P^T dO
                gemm(
                    m,
                    m,
                    dh,
                    1.0,
                    View::transposed(p, m),
                    View::strided(&g[off..], d, 1),
                    1.0,
                    &mut gv[off..],
                    d,
                    1,
                );
            }
            if gq.is_none() && gk.is_none() {
                continue;
            }
            // dP = dO V^T
            gemm(
                m,
                dh,
                m,
                1.0,
                View::strided(&g[off..], d, 1),
                View::strided(&vd[off..], 1, d),
                0.0,
                &mut dp,
                m,
                1,
            );
            for (dr, pr) in dp.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
                let dot: f64 = dr.iter().zip(pr).map(|(&a, &b)| a as f64 * b as f64).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot as f32) * scale;
                }
            }
            if let Some(gq) = gq.as_mut() {
                gemm(
                    m,
                    m,
                    dh,
                    1.0,
                    View::rowmajor(&dp, m),
                    View::strided(&kd[off..], d, 1),
                    1.0,
                    &mut gq[off..],
                    d,
                    1,
                );
            }
            if let Some(gk) = gk.as_mut() {
                gemm(
                    m,
                    m,
                    dh,
                    1.0,
                    View::transposed(&dp, m),
                    View::strided(&qd[off..], d, 1),
                    1.0,
                    &mut gk[off..],
                    d,
                    1,
                );
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                match &mut grads[var.0] {
                    Some(existing) => add_assign(existing, &local),
                    slot @ None => *slot = Some(local),
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients keyed by parameter, summing over repeated uses.
    pub fn param_grads(&self, num_params: usize) -> ParamGrads {
        let mut out = ParamGrads::empty(num_params);
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                out.add_into(id, g);
            }
        }
        out
    }
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn softmax_backward_row(y: &[f32], g: &[f32], out: &mut [f32]) {
    let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o += yv * (gv - dot as f32);
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
