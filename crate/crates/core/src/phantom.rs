//! Synthetic echo-like clips with known point trajectories.
//!
//! A horseshoe-shaped bright band (the myocardium analog) carries a
//! multiplicative speckle texture over a dark background. Each frame is the
//! base texture pulled back through a smooth periodic deformation: an
//! anisotropic contraction toward the base midpoint with a small twist.
//! Contour points are pushed forward through the same map, so trajectories
//! are exact.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Error, Result};
use crate::geometry::{bilinear_sample, Clip, Frame, PointTrajectorySet};
use crate::rng;

/// Every constant that shapes one phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Points along one contour row.
    pub contour_points: usize,
    /// Parallel contour rows (1 gives the centerline only, 4 gives 84 points).
    pub rows: usize,
    /// Spacing between contour rows, pixels.
    pub row_spacing: f32,
    /// Band half-thickness, pixels.
    pub band_half_width: f32,
    /// Horseshoe center as a fraction of `(width, height)`.
    pub center: (f32, f32),
    /// Horseshoe semi-axes as a fraction of `(width, height)`.
    pub semi_axes: (f32, f32),
    /// Peak longitudinal shortening per unit EF.
    pub amplitude: f32,
    /// Radial contraction relative to longitudinal shortening.
    pub radial_ratio: f32,
    /// Peak twist, radians per unit EF.
    pub twist: f32,
    /// Frames per contraction cycle.
    pub period: f32,
    /// Speckle grain (Gaussian blur sigma), pixels.
    pub grain: f32,
    /// Additive per-frame Gaussian noise sigma.
    pub noise: f32,
    pub tissue_level: f32,
    pub background_level: f32,
    /// Texture brightness multiplier for label 1.
    pub diseased_brightness: f32,
    pub seed: u64,
    pub label: u8,
    pub ef_fraction: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            frames: 36,
            contour_points: 21,
            rows: 4,
            row_spacing: 6.0,
            band_half_width: 13.0,
            center: (0.5, 0.64),
            semi_axes: (0.2, 0.38),
            amplitude: 0.075,
            radial_ratio: 0.6,
            twist: 0.02,
            period: 24.0,
            grain: 1.2,
            noise: 0.02,
            tissue_level: 0.5,
            background_level: 0.05,
            diseased_brightness: 1.35,
            seed: 0,
            label: 0,
            ef_fraction: 0.6,
        }
    }
}

impl PhantomSpec {
    /// Small frames for fast unit tests.
    pub fn small_test() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 6,
            rows: 1,
            contour_points: 9,
            band_half_width: 5.0,
            row_spacing: 3.0,
            ..Self::default()
        }
    }

    pub fn num_points(&self) -> usize {
        self.contour_points * self.rows
    }

    /// Index of the apex point on the first row.
    pub fn apex_index(&self) -> usize {
        self.contour_points / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.frames == 0 {
            return usage_err("phantom needs at least 8x8 pixels and one frame");
        }
        if self.contour_points < 2 || self.rows == 0 {
            return usage_err("phantom needs at least 2 contour points and 1 row");
        }
        if !(self.ef_fraction > 0.0 && self.ef_fraction < 1.0) {
            return usage_err(format!("ef_fraction {} outside (0, 1)", self.ef_fraction));
        }
        if self.amplitude < 0.0 || !(self.period > 0.0) || self.grain < 0.0 || self.noise < 0.0 {
            return usage_err("amplitude, grain and noise must be >= 0 and period > 0");
        }
        if self.label > 1 {
            return usage_err("label must be 0 or 1");
        }
        Ok(())
    }

    fn geometry(&self) -> Horseshoe {
        Horseshoe {
            cx: self.center.0 * self.width as f32,
            cy: self.center.1 * self.height as f32,
            a: self.semi_axes.0 * self.width as f32,
            b: self.semi_axes.1 * self.height as f32,
        }
    }

    pub fn deformation(&self) -> Deformation {
        let g = self.geometry();
        let long = self.amplitude * self.ef_fraction;
        Deformation {
            anchor: (g.cx, g.cy),
            radial: long * self.radial_ratio,
            longitudinal: long,
            twist: self.twist * self.ef_fraction,
            period: self.period,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Horseshoe {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
}

impl Horseshoe {
    /// Contour points: `rows` offset copies of the upper half-ellipse,
    /// from one base end over the apex to the other.
    fn contour(&self, count: usize, rows: usize, spacing: f32) -> Vec<(f32, f32)> {
        let mut out = Vec::with_capacity(count * rows);
        for r in 0..rows {
            let off = r as f32 * spacing - (rows - 1) as f32 * spacing / 2.0;
            for i in 0..count {
                let theta = std::f32::consts::PI * i as f32 / (count - 1) as f32;
                let x = self.cx - self.a * theta.cos();
                let y = self.cy - self.b * theta.sin();
                let nx = (x - self.cx) / (self.a * self.a);
                let ny = (y - self.cy) / (self.b * self.b);
                let norm = (nx * nx + ny * ny).sqrt();
                out.push((x + off * nx / norm, y + off * ny / norm));
            }
        }
        out
    }

    /// Offset `l` such that `p` lies on the ellipse with semi-axes `(a+l, b+l)`.
    fn level(&self, x: f32, y: f32) -> f32 {
        let dx = (x - self.cx) as f64;
        let dy = (y - self.cy) as f64;
        let f = |l: f64| (dx / (self.a as f64 + l)).powi(2) + (dy / (self.b as f64 + l)).powi(2) - 1.0;
        let mut lo = -(self.a.min(self.b) as f64) + 1e-3;
        let mut hi = (self.a.max(self.b) as f64) * 4.0 + 4.0 * (dx.abs() + dy.abs());
        if f(lo) <= 0.0 {
            return lo as f32;
        }
        for _ in 0..48 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)) as f32
    }
}

/// Periodic contraction `phi_t(p) = anchor + R(w g) S(g) (p - anchor)` with
/// `g(t) = (1 - cos(2 pi t / period)) / 2`, so `phi_0` is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformation {
    pub anchor: (f32, f32),
    pub radial: f32,
    pub longitudinal: f32,
    pub twist: f32,
    pub period: f32,
}

impl Deformation {
    pub fn phase(&self, t: f32) -> f64 {
        (1.0 - (2.0 * std::f64::consts::PI * t as f64 / self.period as f64).cos()) / 2.0
    }

    fn parts(&self, t: f32) -> (f64, f64, f64, f64) {
        let g = self.phase(t);
        let sx = 1.0 - self.radial as f64 * g;
        let sy = 1.0 - self.longitudinal as f64 * g;
        let w = self.twist as f64 * g;
        (sx, sy, w.cos(), w.sin())
    }

    pub fn forward(&self, t: f32, p: (f32, f32)) -> (f32, f32) {
        let (sx, sy, c, s) = self.parts(t);
        if sx == 1.0 && sy == 1.0 && s == 0.0 {
            return p;
        }
        let dx = (p.0 - self.anchor.0) as f64 * sx;
        let dy = (p.1 - self.anchor.1) as f64 * sy;
        (
            (self.anchor.0 as f64 + c * dx - s * dy) as f32,
            (self.anchor.1 as f64 + s * dx + c * dy) as f32,
        )
    }

    pub fn inverse(&self, t: f32, q: (f32, f32)) -> (f32, f32) {
        let (sx, sy, c, s) = self.parts(t);
        let dx = (q.0 - self.anchor.0) as f64;
        let dy = (q.1 - self.anchor.1) as f64;
        let rx = c * dx + s * dy;
        let ry = -s * dx + c * dy;
        (
            (self.anchor.0 as f64 + rx / sx) as f32,
            (self.anchor.1 as f64 + ry / sy) as f32,
        )
    }
}

/// One rendered phantom with its ground truth.
#[derive(Clone, Debug)]
pub struct PhantomSample {
    pub id: usize,
    pub spec: PhantomSpec,
    pub clip: Clip,
    pub points: PointTrajectorySet,
}

impl PhantomSample {
    pub fn label(&self) -> u8 {
        self.spec.label
    }

    pub fn ef_fraction(&self) -> f32 {
        self.spec.ef_fraction
    }
}

fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * data[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            data[y * w + x] = acc;
        }
    }
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft band membership in `[0, 1]`.
fn band_mask(spec: &PhantomSpec) -> Vec<f32> {
    let g = spec.geometry();
    let (h, w) = (spec.height, spec.width);
    let half = spec.band_half_width;
    let edge = 2.5f32;
    let tail = spec.band_half_width;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let yf = y as f32;
        // open at the bottom: fade out just below the base line
        let vertical = 1.0 - smoothstep(g.cy + 0.4 * tail, g.cy + tail, yf);
        if vertical <= 0.0 {
            continue;
        }
        for x in 0..w {
            let l = g.level(x as f32, yf).abs();
            if l >= half + edge {
                continue;
            }
            out[y * w + x] = vertical * (1.0 - smoothstep(half - edge, half + edge, l));
        }
    }
    out
}

/// Frame-0 speckle texture; deterministic per seed.
pub fn generate_texture(spec: &PhantomSpec) -> Result<Vec<f32>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng::stream(spec.seed, "phantom.texture");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut re: Vec<f64> = (0..h * w).map(|_| normal.sample(&mut rng)).collect();
    let mut im: Vec<f64> = (0..h * w).map(|_| normal.sample(&mut rng)).collect();
    gaussian_blur(&mut re, h, w, spec.grain);
    gaussian_blur(&mut im, h, w, spec.grain);
    let amp: Vec<f64> = re.iter().zip(&im).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let mean = amp.iter().sum::<f64>() / amp.len() as f64;
    let mask = band_mask(spec);
    let tissue = spec.tissue_level
        * if spec.label == 1 {
            spec.diseased_brightness
        } else {
            1.0
        };
    Ok(amp
        .iter()
        .zip(&mask)
        .map(|(&s, &m)| {
            let level = spec.background_level + (tissue - spec.background_level) * m;
            (level * (s / mean) as f32).clamp(0.0, 1.0)
        })
        .collect())
}

/// Render the clip and its exact trajectories.
pub fn render_sample(spec: &PhantomSpec) -> Result<PhantomSample> {
    render_sample_with_id(spec, 0)
}

fn render_sample_with_id(spec: &PhantomSpec, id: usize) -> Result<PhantomSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let base = generate_texture(spec)?;
    let deform = spec.deformation();
    let contour = spec
        .geometry()
        .contour(spec.contour_points, spec.rows, spec.row_spacing);

    let mut coords = Vec::with_capacity(spec.frames * contour.len() * 2);
    for t in 0..spec.frames {
        for &p in &contour {
            let (x, y) = deform.forward(t as f32, p);
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f32 && y <= (h - 1) as f32) {
                return Err(Error::Generation(format!(
                    "trajectory leaves the {w}x{h} frame at t={t}: ({x:.1}, {y:.1})"
                )));
            }
            coords.extend([x, y]);
        }
    }
    let points = PointTrajectorySet::new(spec.frames, contour.len(), coords, Some(spec.apex_index()))?;

    let frame0 = Frame {
        data: &base,
        height: h,
        width: w,
    };
    let mut rng = rng::stream(spec.seed, "phantom.noise");
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("noise sigma");
    let mut data = Vec::with_capacity(spec.frames * h * w);
    for t in 0..spec.frames {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = deform.inverse(t as f32, (x as f32, y as f32));
                let mut v = bilinear_sample(frame0, sx, sy);
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let clip = Clip::new(spec.frames, h, w, data)?;
    Ok(PhantomSample {
        id,
        spec: spec.clone(),
        clip,
        points,
    })
}

/// Ranges the cohort draws per-sample specs from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub base: PhantomSpec,
    pub ef_range: (f32, f32),
    /// Max shift of the horseshoe center, pixels.
    pub center_jitter: f32,
    /// Relative jitter of the semi-axes.
    pub size_jitter: f32,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            base: PhantomSpec::default(),
            ef_range: (0.3, 0.75),
            center_jitter: 8.0,
            size_jitter: 0.08,
        }
    }
}

/// Sample ids per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Deterministic 70/15/15 split of `0..n`.
    pub fn seventy_fifteen_fifteen<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(rng);
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        let mut train = ids[..n_train].to_vec();
        let mut val = ids[n_train..n_train + n_val].to_vec();
        let mut test = ids[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub seed: u64,
    pub samples: Vec<PhantomSample>,
    pub splits: Splits,
}

impl Cohort {
    pub fn split(&self, ids: &[usize]) -> Vec<&PhantomSample> {
        ids.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn train(&self) -> Vec<&PhantomSample> {
        self.split(&self.splits.train)
    }

    pub fn val(&self) -> Vec<&PhantomSample> {
        self.split(&self.splits.val)
    }

    pub fn test(&self) -> Vec<&PhantomSample> {
        self.split(&self.splits.test)
    }
}

/// Per-sample specs of a cohort, without rendering.
pub fn cohort_specs(n: usize, ranges: &CohortSpec, seed: u64) -> Result<Vec<PhantomSpec>> {
    if n < 10 {
        return usage_err(format!("cohort needs at least 10 samples, got {n}"));
    }
    let (lo, hi) = ranges.ef_range;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return usage_err(format!("ef range ({lo}, {hi}) must lie inside (0, 1)"));
    }
    let mut rng = rng::stream(seed, "phantom.cohort");
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut s = ranges.base.clone();
            s.seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            s.label = label;
            s.ef_fraction = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let j = ranges.center_jitter;
            let dx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            let dy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            s.center.0 += dx / s.width as f32;
            s.center.1 += dy / s.height as f32;
            let sj = ranges.size_jitter;
            let scale = if sj > 0.0 { 1.0 + rng.random_range(-sj..=sj) } else { 1.0 };
            s.semi_axes = (s.semi_axes.0 * scale, s.semi_axes.1 * scale);
            s
        })
        .collect())
}

/// Render a whole cohort. A pure function of `(n, ranges, seed)`.
pub fn generate_cohort(n: usize, ranges: &CohortSpec, seed: u64) -> Result<Cohort> {
    let specs = cohort_specs(n, ranges, seed)?;
    let samples = specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| render_sample_with_id(s, i))
        .collect::<Result<Vec<_>>>()?;
    let splits = Splits::seventy_fifteen_fifteen(n, &mut rng::stream(seed, "phantom.splits"));
    Ok(Cohort {
        spec: ranges.clone(),
        seed,
        samples,
        splits,
    })
}

/// Mean frame-0 intensity over pixels under the band mask.
pub fn band_mean_intensity(sample: &PhantomSample) -> f32 {
    let mask = band_mask(&sample.spec);
    let f = sample.clip.frame(0);
    let (mut acc, mut wsum) = (0.0f64, 0.0f64);
    for (v, m) in f.data.iter().zip(&mask) {
        if *m > 0.5 {
            acc += *v as f64;
            wsum += 1.0;
        }
    }
    (acc / wsum.max(1.0)) as f32
}
