use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::geometry::PointTrajectorySet;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return usage_err("metric over empty input");
    }
    if a != b {
        return usage_err(format!("metric inputs differ in length: {a} vs {b}"));
    }
    Ok(())
}

/// Mean Euclidean distance between matching points, in pixels.
pub fn me(pred: &PointTrajectorySet, gt: &PointTrajectorySet) -> Result<f64> {
    if pred.frames() != gt.frames() || pred.points() != gt.points() {
        return usage_err(format!(
            "trajectory shapes differ: {}x{} vs {}x{}",
            pred.frames(),
            pred.points(),
            gt.frames(),
            gt.points()
        ));
    }
    me_coords(pred.coords(), gt.coords())
}

/// [`me`] over flat `(x, y)` pairs.
pub fn me_coords(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if !pred.len().is_multiple_of(2) {
        return usage_err("coordinate list has odd length");
    }
    let sum: f64 = pred
        .chunks_exact(2)
        .zip(gt.chunks_exact(2))
        .map(|(p, g)| {
            let dx = p[0] as f64 - g[0] as f64;
            let dy = p[1] as f64 - g[1] as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(sum / (pred.len() / 2) as f64)
}

/// Mean absolute error of scalars.
pub fn mean_abs_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn accuracy(pred: &[u8], labels: &[u8]) -> Result<f64> {
    check_len(pred.len(), labels.len())?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-class F1 averaged with weights equal to each class's support in
/// `labels`. A class with no predictions and no support contributes nothing.
pub fn weighted_f1(pred: &[u8], labels: &[u8]) -> Result<f64> {
    check_len(pred.len(), labels.len())?;
    let mut classes: Vec<u8> = labels.iter().chain(pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for c in classes {
        let tp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let fp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
        let fn_ = pred.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count() as f64;
        let support = tp + fn_;
        if support == 0.0 {
            continue;
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        total += support * f1;
    }
    Ok(total / labels.len() as f64)
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return usage_err("summary over no runs");
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { n, mean, std })
    }
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.std, self.n)
    }
}
