//! Point trajectories, clips and bilinear patch extraction.
//!
//! Coordinates are `(x, y)` in pixels with `x` the column and `y` the row;
//! `(0, 0)` is the center of the top-left pixel.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, usage_err, Error, Result};

/// `frames x points` 2D coordinates describing the anatomy through a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTrajectorySet {
    frames: usize,
    points: usize,
    coords: Vec<f32>,
    apex_index: Option<usize>,
}

impl PointTrajectorySet {
    /// `coords` is laid out `[t][i][x, y]`.
    pub fn new(frames: usize, points: usize, coords: Vec<f32>, apex_index: Option<usize>) -> Result<Self> {
        if frames == 0 || points == 0 {
            return usage_err("trajectory set needs at least one frame and one point");
        }
        if coords.len() != frames * points * 2 {
            return shape_err(format!(
                "{frames} frames x {points} points needs {} coordinates, got {}",
                frames * points * 2,
                coords.len()
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("non-finite point coordinate".into()));
        }
        if let Some(a) = apex_index {
            if a >= points {
                return usage_err(format!("apex index {a} out of {points} points"));
            }
        }
        Ok(Self {
            frames,
            points,
            coords,
            apex_index,
        })
    }

    /// The same point set repeated on every frame.
    pub fn repeat_frame(points: &[(f32, f32)], frames: usize, apex_index: Option<usize>) -> Result<Self> {
        let mut coords = Vec::with_capacity(frames * points.len() * 2);
        for _ in 0..frames {
            for &(x, y) in points {
                coords.extend([x, y]);
            }
        }
        Self::new(frames, points.len(), coords, apex_index)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn apex_index(&self) -> Option<usize> {
        self.apex_index
    }

    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn get(&self, t: usize, i: usize) -> (f32, f32) {
        let o = (t * self.points + i) * 2;
        (self.coords[o], self.coords[o + 1])
    }

    pub fn set(&mut self, t: usize, i: usize, p: (f32, f32)) {
        let o = (t * self.points + i) * 2;
        self.coords[o] = p.0;
        self.coords[o + 1] = p.1;
    }

    pub fn frame(&self, t: usize) -> Vec<(f32, f32)> {
        (0..self.points).map(|i| self.get(t, i)).collect()
    }

    /// Frames `start, start + stride, ...`, `len` of them.
    pub fn window(&self, start: usize, stride: usize, len: usize) -> Result<Self> {
        check_window(self.frames, start, stride, len)?;
        let mut coords = Vec::with_capacity(len * self.points * 2);
        for k in 0..len {
            let t = start + k * stride;
            coords.extend_from_slice(&self.coords[t * self.points * 2..(t + 1) * self.points * 2]);
        }
        Self::new(len, self.points, coords, self.apex_index)
    }

    /// Reorder points: output point `i` is input point `perm[i]`.
    pub fn permute_points(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.points {
            return shape_err("permutation length mismatch");
        }
        let mut out = self.clone();
        for t in 0..self.frames {
            for (i, &src) in perm.iter().enumerate() {
                out.set(t, i, self.get(t, src));
            }
        }
        out.apex_index = self
            .apex_index
            .and_then(|a| perm.iter().position(|&p| p == a));
        Ok(out)
    }

    pub fn translate(&self, dx: f32, dy: f32) -> Self {
        let mut out = self.clone();
        for c in out.coords.chunks_exact_mut(2) {
            c[0] += dx;
            c[1] += dy;
        }
        out
    }

    pub fn with_apex(mut self, apex_index: Option<usize>) -> Result<Self> {
        if let Some(a) = apex_index {
            if a >= self.points {
                return usage_err(format!("apex index {a} out of {} points", self.points));
            }
        }
        self.apex_index = apex_index;
        Ok(self)
    }
}

fn check_window(frames: usize, start: usize, stride: usize, len: usize) -> Result<()> {
    if len == 0 || stride == 0 {
        return usage_err("window needs positive length and stride");
    }
    let last = start + (len - 1) * stride;
    if last >= frames {
        return usage_err(format!(
            "window start {start} stride {stride} length {len} exceeds {frames} frames"
        ));
    }
    Ok(())
}

/// Grayscale video with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Clip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return usage_err("clip dimensions must be positive");
        }
        if data.len() != frames * height * width {
            return shape_err(format!(
                "clip {frames}x{height}x{width} needs {} values, got {}",
                frames * height * width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return usage_err(format!("clip intensity {v} outside [0, 1]"));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> Frame<'_> {
        let n = self.height * self.width;
        Frame {
            data: &self.data[t * n..(t + 1) * n],
            height: self.height,
            width: self.width,
        }
    }

    pub fn window(&self, start: usize, stride: usize, len: usize) -> Result<Self> {
        check_window(self.frames, start, stride, len)?;
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(len * n);
        for k in 0..len {
            let t = start + k * stride;
            data.extend_from_slice(&self.data[t * n..(t + 1) * n]);
        }
        Ok(Self {
            frames: len,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Append copies of the final frame until the clip has `len` frames.
    pub fn pad_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        let n = self.height * self.width;
        let last = self.data[(self.frames - 1) * n..].to_vec();
        while out.frames < len {
            out.data.extend_from_slice(&last);
            out.frames += 1;
        }
        out
    }
}

/// Borrowed single frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl Frame<'_> {
    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// `frames x points` flattened `j x j` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    frames: usize,
    points: usize,
    patch_size: usize,
    data: Vec<f32>,
}

impl PatchSet {
    pub fn new(frames: usize, points: usize, patch_size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * points * patch_size * patch_size {
            return shape_err("patch buffer size mismatch");
        }
        Ok(Self {
            frames,
            points,
            patch_size,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// All patches as a `(frames * points) x j^2` row-major matrix.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn patch(&self, t: usize, i: usize) -> &[f32] {
        let l = self.patch_len();
        let o = (t * self.points + i) * l;
        &self.data[o..o + l]
    }

    pub fn permute_points(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for t in 0..self.frames {
            for &src in perm {
                data.extend_from_slice(self.patch(t, src));
            }
        }
        Self { data, ..*self }
    }
}

/// `j x j` sample locations centered on `point`, one pixel apart, row-major
/// (outer loop over `y`). Offsets run from `-(j-1)/2` to `(j-1)/2`.
pub fn build_sampling_grid(point: (f32, f32), j: usize) -> Vec<(f32, f32)> {
    let half = (j as f32 - 1.0) / 2.0;
    let mut grid = Vec::with_capacity(j * j);
    for r in 0..j {
        let y = point.1 - half + r as f32;
        for c in 0..j {
            grid.push((point.0 - half + c as f32, y));
        }
    }
    grid
}

/// Bilinear interpolation of `frame` at `(x, y)`.
///
/// Locations outside `[0, W-1] x [0, H-1]` read as zero.
pub fn bilinear_sample(frame: Frame<'_>, x: f32, y: f32) -> f32 {
    let (w, h) = (frame.width, frame.height);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f32 && y <= (h - 1) as f32) {
        return 0.0;
    }
    let (x, y) = (x as f64, y as f64);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let p = |xx: usize, yy: usize| frame.data[yy * w + xx] as f64;
    let mut top = p(x0, y0);
    if fx > 0.0 {
        top = top * (1.0 - fx) + p(x0 + 1, y0) * fx;
    }
    if fy == 0.0 {
        return top as f32;
    }
    let mut bottom = p(x0, y0 + 1);
    if fx > 0.0 {
        bottom = bottom * (1.0 - fx) + p(x0 + 1, y0 + 1) * fx;
    }
    (top * (1.0 - fy) + bottom * fy) as f32
}

pub fn sample_grid(frame: Frame<'_>, locations: &[(f32, f32)]) -> Vec<f32> {
    locations
        .iter()
        .map(|&(x, y)| bilinear_sample(frame, x, y))
        .collect()
}

/// Sample a `j x j` patch around every point of every frame.
pub fn extract_patches(clip: &Clip, points: &PointTrajectorySet, j: usize) -> Result<PatchSet> {
    if clip.frames() != points.frames() {
        return usage_err(format!(
            "clip has {} frames but trajectories have {}",
            clip.frames(),
            points.frames()
        ));
    }
    if j == 0 {
        return usage_err("patch size must be positive");
    }
    let half = (j as f32 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(points.frames() * points.points() * j * j);
    for t in 0..points.frames() {
        let frame = clip.frame(t);
        for i in 0..points.points() {
            let (px, py) = points.get(t, i);
            for r in 0..j {
                let y = py - half + r as f32;
                for c in 0..j {
                    data.push(bilinear_sample(frame, px - half + c as f32, y));
                }
            }
        }
    }
    PatchSet::new(points.frames(), points.points(), j, data)
}
