//! Procedural K-class image dataset. Each class is a geometric or texture
//! family; every sample draws its own colours, frequency, phase, position and
//! pixel noise from a stream keyed by `(seed, split, index)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::Sample;
use crate::error::{Error, FormatError, Result};
use crate::io;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"PDRD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    Checkerboard,
    Rings,
    Blob,
    Diagonal,
    AntiDiagonal,
    Cross,
    Frame,
    Dots,
}

const PATTERNS: [Pattern; 10] = [
    Pattern::HorizontalStripes,
    Pattern::VerticalStripes,
    Pattern::Checkerboard,
    Pattern::Rings,
    Pattern::Blob,
    Pattern::Diagonal,
    Pattern::AntiDiagonal,
    Pattern::Cross,
    Pattern::Frame,
    Pattern::Dots,
];

pub const MAX_CLASSES: usize = PATTERNS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub shape: [usize; 3],
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { seed: 0, classes: 5, n_train: 1000, n_test: 200, shape: [3, 32, 32], noise: 0.04 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("class count must be in 2..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("train and test counts must be at least 1".into()));
        }
        let [c, h, w] = self.shape;
        if c == 0 || h < 11 || w < 11 {
            return Err(Error::Config(format!("image shape {:?} too small (need at least 11x11)", self.shape)));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 0.5), got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn colour_pair(r: &mut Rng, channels: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let fg: Vec<f64> = (0..channels).map(|_| r.gen_range(0.0..1.0)).collect();
        let bg: Vec<f64> = (0..channels).map(|_| r.gen_range(0.0..1.0)).collect();
        let dist: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist >= 0.5 * (channels as f64 / 3.0).sqrt() {
            return (fg, bg);
        }
    }
}

/// Per-pixel pattern intensity in `[0, 1]`.
fn intensity(pattern: Pattern, r: &mut Rng, h: usize, w: usize) -> Vec<f64> {
    let period = r.gen_range(4.0..8.0);
    let phase = r.gen_range(0.0..2.0 * PI);
    let ci = h as f64 / 2.0 + r.gen_range(-4.0..4.0);
    let cj = w as f64 / 2.0 + r.gen_range(-4.0..4.0);
    let wave = |u: f64| 0.5 + 0.5 * (2.0 * PI * u / period + phase).sin();
    let cell = r.gen_range(3.0..6.0);
    let (p1, p2) = (r.gen_range(0.0..PI), r.gen_range(0.0..PI));
    let sigma = r.gen_range(4.0..7.0);
    let band = r.gen_range(2..=4);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (i as f64, j as f64);
            let t = match pattern {
                Pattern::HorizontalStripes => wave(fi),
                Pattern::VerticalStripes => wave(fj),
                Pattern::Diagonal => wave((fi + fj) / 2f64.sqrt()),
                Pattern::AntiDiagonal => wave((fi - fj) / 2f64.sqrt()),
                Pattern::Checkerboard => {
                    let s = (PI * fi / cell + p1).sin() * (PI * fj / cell + p2).sin();
                    if s > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Pattern::Rings => wave(((fi - ci).powi(2) + (fj - cj).powi(2)).sqrt()),
                Pattern::Blob => (-((fi - ci).powi(2) + (fj - cj).powi(2)) / (2.0 * sigma * sigma)).exp(),
                Pattern::Cross => {
                    let width = sigma / 3.0;
                    let a = (-(fi - ci).powi(2) / (2.0 * width * width)).exp();
                    let b = (-(fj - cj).powi(2) / (2.0 * width * width)).exp();
                    a.max(b)
                }
                Pattern::Frame => {
                    let d = i.min(j).min(h - 1 - i).min(w - 1 - j);
                    if d < band {
                        1.0
                    } else {
                        0.0
                    }
                }
                Pattern::Dots => {
                    let v = (2.0 * PI * fi / period + p1).cos() * (2.0 * PI * fj / period + p2).cos();
                    v.max(0.0)
                }
            };
            out.push(t);
        }
    }
    out
}

fn render(label: usize, r: &mut Rng, spec: &DatasetSpec) -> Tensor {
    let [c, h, w] = spec.shape;
    let (fg, bg) = colour_pair(r, c);
    let t = intensity(PATTERNS[label], r, h, w);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for &ti in &t {
            let noise = if spec.noise > 0.0 { r.gen_range(-spec.noise..spec.noise) } else { 0.0 };
            data.push((bg[ch] + ti * (fg[ch] - bg[ch]) + noise).clamp(0.0, 1.0));
        }
    }
    Tensor::from_parts(spec.shape.to_vec(), data)
}

fn split(spec: &DatasetSpec, which: u64, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let label = i % spec.classes;
            let mut r = rng::stream(spec.seed, &[which, i as u64]);
            Sample { image: render(label, &mut r, spec), label }
        })
        .collect()
}

pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset { spec: spec.clone(), train: split(spec, 0, spec.n_train), test: split(spec, 1, spec.n_test) })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    n_train: usize,
    n_test: usize,
}

/// `PDRD` container: spec manifest, then per sample its label followed by
/// its pixels, train split first.
pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let manifest = Manifest { spec: d.spec.clone(), n_train: d.train.len(), n_test: d.test.len() };
    let mut values = Vec::new();
    for s in d.train.iter().chain(&d.test) {
        values.push(s.label as f64);
        values.extend_from_slice(s.image.data());
    }
    io::encode(DATASET_MAGIC, DATASET_VERSION, &serde_json::to_string(&manifest).expect("manifest"), &values)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (text, values) = io::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let per = 1 + m.spec.shape.iter().product::<usize>();
    if values.len() != per * (m.n_train + m.n_test) {
        return Err(FormatError::Manifest(format!(
            "{} values for {} samples of {} values",
            values.len(),
            m.n_train + m.n_test,
            per
        ))
        .into());
    }
    let mut samples = values.chunks(per).map(|c| {
        let label = c[0];
        if label < 0.0 || label.fract() != 0.0 || label as usize >= m.spec.classes {
            return Err(Error::from(FormatError::Manifest(format!("bad label {label}"))));
        }
        Ok(Sample { label: label as usize, image: Tensor::from_parts(m.spec.shape.to_vec(), c[1..].to_vec()) })
    });
    let train = samples.by_ref().take(m.n_train).collect::<Result<Vec<_>>>()?;
    let test = samples.collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: m.spec, train, test })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    io::write_file(path.as_ref(), &encode_dataset(d))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&io::read_file(path.as_ref())?)
}
