//! In-memory samples and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json          written last
//! <root>/sample_0007/frame_000.pgm ...   16-bit binary graymaps
//! <root>/sample_0007/points.csv          frame,point,x,y
//! <root>/sample_0007/labels.json
//! <root>/sample_0007/spec.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Error, Result};
use crate::geometry::{Clip, PointTrajectorySet};
use crate::io::write_atomic;
use crate::phantom::{Cohort, PhantomSpec, Splits};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub label: u8,
    pub ef_fraction: f32,
}

/// One clip with its ground-truth trajectories and labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub clip: Clip,
    pub points: PointTrajectorySet,
    pub labels: Labels,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

impl Dataset {
    pub fn from_cohort(cohort: &Cohort) -> Self {
        let samples = cohort
            .samples
            .iter()
            .map(|s| Sample {
                id: s.id,
                clip: s.clip.clone(),
                points: s.points.clone(),
                labels: Labels {
                    label: s.label(),
                    ef_fraction: s.ef_fraction(),
                },
            })
            .collect();
        Self {
            samples,
            splits: cohort.splits.clone(),
        }
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<&Sample> {
        ids.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.subset(&self.splits.train)
    }

    pub fn val(&self) -> Vec<&Sample> {
        self.subset(&self.splits.val)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.subset(&self.splits.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub dir: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub points: usize,
    pub apex_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
    pub splits: Splits,
}

fn sample_dir(id: usize) -> String {
    format!("sample_{id:04}")
}

/// 16-bit binary graymap, big-endian samples, values scaled from `[0, 1]`.
pub fn encode_pgm16(data: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(data.len() * 2);
    for &v in data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated graymap header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("graymap header is not ASCII".into()))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5 graymap, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad graymap field `{s}`")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 65535 {
        return Err(Error::Format(format!("expected 16-bit graymap, maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != width * height * 2 {
        return Err(Error::Format(format!(
            "graymap body has {} bytes, expected {}",
            body.len(),
            width * height * 2
        )));
    }
    let data = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Ok((height, width, data))
}

pub fn points_to_csv(points: &PointTrajectorySet) -> String {
    let mut s = String::from("frame,point,x,y\n");
    for t in 0..points.frames() {
        for i in 0..points.points() {
            let (x, y) = points.get(t, i);
            s.push_str(&format!("{t},{i},{x},{y}\n"));
        }
    }
    s
}

pub fn points_from_csv(text: &str, apex_index: Option<usize>) -> Result<PointTrajectorySet> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("frame,point,x,y") {
        return Err(Error::Format("points file must start with `frame,point,x,y`".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("points line {}: expected 4 fields", n + 2)));
        }
        let bad = || Error::Format(format!("points line {}: unparsable field", n + 2));
        let t: usize = f[0].trim().parse().map_err(|_| bad())?;
        let i: usize = f[1].trim().parse().map_err(|_| bad())?;
        let x: f32 = f[2].trim().parse().map_err(|_| bad())?;
        let y: f32 = f[3].trim().parse().map_err(|_| bad())?;
        rows.push((t, i, x, y));
    }
    let frames = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let points = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != frames * points {
        return Err(Error::Format(format!(
            "points file has {} rows, expected {frames} x {points}",
            rows.len()
        )));
    }
    let mut coords = vec![f32::NAN; frames * points * 2];
    for (t, i, x, y) in rows {
        let o = (t * points + i) * 2;
        coords[o] = x;
        coords[o + 1] = y;
    }
    if coords.iter().any(|c| c.is_nan()) {
        return Err(Error::Format("points file has duplicate rows".into()));
    }
    PointTrajectorySet::new(frames, points, coords, apex_index)
}

/// Refuse to reuse a non-empty directory unless `force`; with `force`,
/// clear the files this layout owns.
pub fn prepare_output_dir(root: &Path, force: bool) -> Result<()> {
    if root.exists() {
        let entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        if !entries.is_empty() {
            if !force {
                return usage_err(format!(
                    "{} exists and is not empty (pass --force to overwrite)",
                    root.display()
                ));
            }
            for p in entries {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name == MANIFEST || (name.starts_with("sample_") && p.is_dir()) {
                    if p.is_dir() {
                        fs::remove_dir_all(&p)?;
                    } else {
                        fs::remove_file(&p)?;
                    }
                }
            }
        }
    }
    fs::create_dir_all(root)?;
    Ok(())
}

/// Write every sample, then the manifest as the completion marker.
pub fn write_dataset(root: &Path, cohort: &Cohort, force: bool) -> Result<Manifest> {
    prepare_output_dir(root, force)?;
    let mut entries = Vec::with_capacity(cohort.samples.len());
    for s in &cohort.samples {
        let dir_name = sample_dir(s.id);
        let dir = root.join(&dir_name);
        fs::create_dir_all(&dir)?;
        let (h, w) = (s.clip.height(), s.clip.width());
        for t in 0..s.clip.frames() {
            let bytes = encode_pgm16(s.clip.frame(t).data, h, w);
            fs::write(dir.join(format!("frame_{t:03}.pgm")), bytes)?;
        }
        fs::write(dir.join("points.csv"), points_to_csv(&s.points))?;
        let labels = Labels {
            label: s.label(),
            ef_fraction: s.ef_fraction(),
        };
        fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)?)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&s.spec)?)?;
        entries.push(ManifestEntry {
            id: s.id,
            dir: dir_name,
            frames: s.clip.frames(),
            height: h,
            width: w,
            points: s.points.points(),
            apex_index: s.points.apex_index(),
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed: cohort.seed,
        samples: entries,
        splits: cohort.splits.clone(),
    };
    write_atomic(&root.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return usage_err(format!("{} has no {MANIFEST}; incomplete or not a dataset", root.display()));
    }
    let m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    if m.version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {} unsupported", m.version)));
    }
    Ok(m)
}

pub fn read_sample(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let dir = root.join(&entry.dir);
    let mut data = Vec::with_capacity(entry.frames * entry.height * entry.width);
    for t in 0..entry.frames {
        let (h, w, frame) = decode_pgm16(&fs::read(dir.join(format!("frame_{t:03}.pgm")))?)?;
        if (h, w) != (entry.height, entry.width) {
            return Err(Error::Format(format!("{}: frame {t} is {w}x{h}", entry.dir)));
        }
        data.extend(frame);
    }
    let clip = Clip::new(entry.frames, entry.height, entry.width, data)?;
    let points = points_from_csv(&fs::read_to_string(dir.join("points.csv"))?, entry.apex_index)?;
    if points.frames() != entry.frames || points.points() != entry.points {
        return Err(Error::Format(format!("{}: points disagree with manifest", entry.dir)));
    }
    let labels: Labels = serde_json::from_slice(&fs::read(dir.join("labels.json"))?)?;
    Ok(Sample {
        id: entry.id,
        clip,
        points,
        labels,
    })
}

pub fn read_spec(root: &Path, entry: &ManifestEntry) -> Result<PhantomSpec> {
    Ok(serde_json::from_slice(&fs::read(root.join(&entry.dir).join("spec.json"))?)?)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let m = read_manifest(root)?;
    let samples = m
        .samples
        .iter()
        .map(|e| read_sample(root, e))
        .collect::<Result<Vec<_>>>()?;
    for (i, s) in samples.iter().enumerate() {
        if s.id != i {
            return Err(Error::Format(format!("manifest entry {i} has id {}", s.id)));
        }
    }
    Ok(Dataset {
        samples,
        splits: m.splits,
    })
}
