//! Digit datasets: the IDX distribution format and an offline synthetic substitute.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, rng_from_seed, tag};
use crate::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const N_CLASSES: usize = 10;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major images in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub dim: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, dim: usize, split: &str) -> Result<Self> {
        if dim == 0 || images.len() != labels.len() * dim {
            return Err(Error::Dimension {
                expected: labels.len() * dim,
                got: images.len(),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::config(format!("label {l} out of range")));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset {
            images,
            labels,
            dim,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            split: self.split.clone(),
        }
    }

    pub fn class_histogram(&self) -> [usize; N_CLASSES] {
        let mut h = [0; N_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, field: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            field: format!("{} {field}", self.what),
            offset: self.pos,
            reason: format!("truncated: need 4 bytes, {} left", self.bytes.len() - self.pos.min(self.bytes.len())),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let offset = self.pos;
        let m = self.u32("magic")?;
        if m != expected {
            return Err(Error::Parse {
                field: format!("{} magic", self.what),
                offset,
                reason: format!("expected {expected:#010x}, found {m:#010x}"),
            });
        }
        Ok(())
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(Error::Parse {
                field: format!("{} data", self.what),
                offset: self.bytes.len(),
                reason: format!("truncated: need {len} bytes, {have} left"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// Parses an IDX image/label pair already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8], split: &str) -> Result<Dataset> {
    let mut ri = Reader {
        bytes: images,
        pos: 0,
        what: "images",
    };
    ri.magic(IMAGES_MAGIC)?;
    let n = ri.u32("count")? as usize;
    let rows_at = ri.pos;
    let rows = ri.u32("rows")? as usize;
    let cols = ri.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            field: "images rows".into(),
            offset: rows_at,
            reason: format!("degenerate image shape {rows}x{cols}"),
        });
    }
    let pixels = ri.payload(n * rows * cols)?;

    let mut rl = Reader {
        bytes: labels,
        pos: 0,
        what: "labels",
    };
    rl.magic(LABELS_MAGIC)?;
    let count_at = rl.pos;
    let nl = rl.u32("count")? as usize;
    if nl != n {
        return Err(Error::Parse {
            field: "labels count".into(),
            offset: count_at,
            reason: format!("{nl} labels for {n} images"),
        });
    }
    let data_at = rl.pos;
    let raw = rl.payload(n)?;
    if let Some(i) = raw.iter().position(|&l| l as usize >= N_CLASSES) {
        return Err(Error::Parse {
            field: "labels data".into(),
            offset: data_at + i,
            reason: format!("label {} out of range", raw[i]),
        });
    }
    Ok(Dataset {
        images: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels: raw.to_vec(),
        dim: rows * cols,
        split: split.to_string(),
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let split = images_path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| if s.starts_with("t10k") { "test" } else { "train" })
        .unwrap_or("train");
    parse_idx(&images, &labels, split)
}

/// Encodes a dataset back into the IDX pair (pixels rounded to bytes).
pub fn to_idx(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.dim {
        return Err(Error::Dimension {
            expected: data.dim,
            got: rows * cols,
        });
    }
    let mut im = Vec::with_capacity(16 + data.images.len());
    for v in [IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        im.extend_from_slice(&v.to_be_bytes());
    }
    im.extend(data.images.iter().map(|p| (p * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + data.len());
    lb.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lb.extend_from_slice(&data.labels);
    Ok((im, lb))
}

// Polyline strokes per digit on the 28x28 canvas, as (x, y) points.
const STROKES: [&[&[(f64, f64)]]; N_CLASSES] = [
    &[&[(14.0, 5.0), (19.0, 7.0), (21.0, 14.0), (19.0, 21.0), (14.0, 23.0), (9.0, 21.0), (7.0, 14.0), (9.0, 7.0), (14.0, 5.0)]],
    &[&[(10.0, 9.0), (15.0, 5.0), (15.0, 23.0)], &[(11.0, 23.0), (19.0, 23.0)]],
    &[&[(8.0, 9.0), (11.0, 5.0), (17.0, 5.0), (20.0, 9.0), (19.0, 13.0), (8.0, 23.0), (21.0, 23.0)]],
    &[&[(8.0, 6.0), (19.0, 6.0), (13.0, 13.0), (19.0, 16.0), (19.0, 21.0), (14.0, 23.0), (8.0, 21.0)]],
    &[&[(17.0, 23.0), (17.0, 5.0), (7.0, 17.0), (21.0, 17.0)]],
    &[&[(20.0, 5.0), (9.0, 5.0), (8.0, 13.0), (15.0, 12.0), (20.0, 16.0), (19.0, 21.0), (14.0, 23.0), (8.0, 21.0)]],
    &[&[(18.0, 5.0), (11.0, 9.0), (8.0, 16.0), (10.0, 22.0), (15.0, 23.0), (19.0, 19.0), (17.0, 14.0), (12.0, 14.0), (8.0, 17.0)]],
    &[&[(7.0, 5.0), (21.0, 5.0), (12.0, 23.0)], &[(11.0, 14.0), (19.0, 14.0)]],
    &[
        &[(14.0, 14.0), (9.0, 11.0), (10.0, 6.0), (14.0, 5.0), (18.0, 6.0), (19.0, 11.0), (14.0, 14.0)],
        &[(14.0, 14.0), (8.0, 17.0), (9.0, 22.0), (14.0, 23.0), (19.0, 22.0), (20.0, 17.0), (14.0, 14.0)],
    ],
    &[&[(19.0, 12.0), (15.0, 14.0), (9.0, 12.0), (9.0, 7.0), (14.0, 5.0), (19.0, 7.0), (19.0, 12.0), (17.0, 23.0)]],
];

const PEN_RADIUS: f64 = 1.0;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// The noise-free 28x28 template of `digit`.
pub fn digit_template(digit: usize) -> Vec<f64> {
    let mut img = vec![0.0; IMAGE_DIM];
    for (k, px) in img.iter_mut().enumerate() {
        let p = ((k % IMAGE_SIDE) as f64, (k / IMAGE_SIDE) as f64);
        let d = STROKES[digit]
            .iter()
            .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        *px = (1.0 + PEN_RADIUS - d).clamp(0.0, 1.0);
    }
    img
}

/// Template digits plus clamped Gaussian pixel noise; classes are interleaved `0, 1, .., 9, 0, ..`.
pub fn synthetic_digits(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!("noise must be finite and >= 0, got {noise}")));
    }
    let templates: Vec<Vec<f64>> = (0..N_CLASSES).map(digit_template).collect();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng_from_seed(derive_seed(seed, tag::DATA, 0));
    let n = n_per_class * N_CLASSES;
    let mut images = Vec::with_capacity(n * IMAGE_DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % N_CLASSES;
        labels.push(class as u8);
        for &t in &templates[class] {
            let v = if noise > 0.0 { t + normal.sample(&mut rng) } else { t };
            images.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Dataset {
        images,
        labels,
        dim: IMAGE_DIM,
        split: "synthetic".into(),
    })
}

/// Random permutation of the samples, deterministic per seed.
pub fn shuffled(data: &Dataset, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut images = Vec::with_capacity(data.images.len());
    for &i in &order {
        images.extend_from_slice(data.image(i));
    }
    Dataset {
        images,
        labels: order.iter().map(|&i| data.labels[i]).collect(),
        dim: data.dim,
        split: data.split.clone(),
    }
}
