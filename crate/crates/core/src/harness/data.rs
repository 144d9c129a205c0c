//! Datasets: the synthetic foreground/background task, CIFAR-10 binary
//! batches and pre-tensorized frame files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Frames;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Frames,
    pub label: usize,
    /// Tokens carrying the class pattern; empty for real data.
    pub foreground: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_foreground(&self) -> bool {
        self.samples.iter().any(|s| !s.foreground.is_empty())
    }

    /// The same images with labels permuted (control experiment).
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels: Vec<usize> = self.samples.iter().map(|s| s.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let samples = self.samples.iter().zip(labels).map(|(s, label)| Sample { label, ..s.clone() }).collect();
        Self { samples, num_classes: self.num_classes }
    }

    pub fn take(&self, n: usize) -> Self {
        Self { samples: self.samples.iter().take(n).cloned().collect(), num_classes: self.num_classes }
    }
}

/// Class patterns on a contiguous block of tokens at a random grid position,
/// over dim label-independent background noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub image_hw: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Token grid side; each token covers `(image_hw / grid)^2` pixels.
    pub grid: usize,
    /// Side of the square foreground block, in tokens.
    pub foreground_side: usize,
    pub foreground_amplitude: f32,
    pub background_amplitude: f32,
    /// Probability of flipping each template bit.
    pub flip_prob: f64,
    pub coding: ObjectCoding,
    /// Background tokens carrying a dim copy of a random pattern.
    pub distractors: usize,
    pub distractor_amplitude: f32,
    /// Seeds the class templates, shared by train and test splits.
    pub template_seed: u64,
}

/// How the foreground block spells out the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCoding {
    /// Every foreground token shows the whole class pattern, so any one of them identifies the class.
    Whole,
    /// Column `j` of the block shows digit `j` of the label in the smallest base `b` with
    /// `b^side >= classes`; naming the class takes a token from every column.
    Columns,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_hw: 8,
            channels: 3,
            num_classes: 4,
            grid: 4,
            foreground_side: 2,
            foreground_amplitude: 1.0,
            background_amplitude: 0.4,
            flip_prob: 0.1,
            coding: ObjectCoding::Columns,
            distractors: 2,
            distractor_amplitude: 0.6,
            template_seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn patch(&self) -> usize {
        self.image_hw / self.grid.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic dataset: {m}")));
        if self.grid == 0 || self.image_hw % self.grid != 0 {
            return bad("grid must divide image_hw");
        }
        if self.foreground_side == 0 || self.foreground_side >= self.grid {
            return bad("foreground block must be nonempty and smaller than the grid");
        }
        if self.num_classes < 2 || self.channels == 0 {
            return bad("need at least 2 classes and 1 channel");
        }
        if self.distractors > self.tokens() - self.foreground_side * self.foreground_side {
            return bad("more distractors than background tokens");
        }
        if !(0.0..=0.5).contains(&self.flip_prob) {
            return bad("flip_prob must be in [0, 0.5]");
        }
        Ok(())
    }

    /// Digit base of [`ObjectCoding::Columns`].
    pub fn digit_base(&self) -> usize {
        let side = self.foreground_side as u32;
        (2..).find(|&b: &usize| b.pow(side) >= self.num_classes).unwrap_or(self.num_classes)
    }

    /// Binary patch templates, `[patch * patch * channels]` each: one per class
    /// for whole coding, one per (column, digit) for column coding.
    pub fn templates(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        let len = self.patch() * self.patch() * self.channels;
        let count = match self.coding {
            ObjectCoding::Whole => self.num_classes,
            ObjectCoding::Columns => self.foreground_side * self.digit_base(),
        };
        (0..count).map(|_| (0..len).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).collect()
    }

    /// Template shown at column `col` of a foreground block of class `label`.
    pub fn template_index(&self, label: usize, col: usize) -> usize {
        match self.coding {
            ObjectCoding::Whole => label,
            ObjectCoding::Columns => {
                let b = self.digit_base();
                col * b + (label / b.pow(col as u32)) % b
            }
        }
    }
}

/// `n` samples with labels `i mod num_classes`.
pub fn generate_synthetic(n: usize, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<Dataset> {
    cfg.validate()?;
    let templates = cfg.templates();
    let (hw, ps, g, c) = (cfg.image_hw, cfg.patch(), cfg.grid, cfg.channels);
    let fs = cfg.foreground_side;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % cfg.num_classes;
        let mut img = Matrix::from_fn(hw * hw, c, |_, _| cfg.background_amplitude * rng.random::<f32>());
        let (r0, c0) = (rng.random_range(0..=g - fs), rng.random_range(0..=g - fs));
        let mut foreground = Vec::with_capacity(fs * fs);
        for r in r0..r0 + fs {
            for col in c0..c0 + fs {
                foreground.push(r * g + col);
            }
        }
        foreground.sort_unstable();
        let mut background: Vec<usize> = (0..g * g).filter(|t| !foreground.contains(t)).collect();
        background.shuffle(rng);
        let paint = |img: &mut Matrix, token: usize, pattern: usize, amp: f32, rng: &mut dyn rand::RngCore| {
            let (tr, tc) = (token / g, token % g);
            for py in 0..ps {
                for px in 0..ps {
                    let pix = (tr * ps + py) * hw + tc * ps + px;
                    for ch in 0..c {
                        let mut bit = templates[pattern][(py * ps + px) * c + ch];
                        if rng.random_bool(cfg.flip_prob) {
                            bit = 1.0 - bit;
                        }
                        img.set(pix, ch, amp * bit);
                    }
                }
            }
        };
        for &t in &foreground {
            paint(&mut img, t, cfg.template_index(label, t % g - c0), cfg.foreground_amplitude, rng);
        }
        for &t in background.iter().take(cfg.distractors) {
            let pattern = rng.random_range(0..templates.len());
            paint(&mut img, t, pattern, cfg.distractor_amplitude, rng);
        }
        samples.push(Sample { frames: Frames::new(img, 1)?, label, foreground });
    }
    Ok(Dataset { samples, num_classes: cfg.num_classes })
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!("truncated record: {} trailing bytes, records are {CIFAR_RECORD}", bytes.len() - whole),
        });
    }
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format { offset: (i * CIFAR_RECORD) as u64, message: format!("label {label} > 9") });
        }
        let px: Vec<f32> = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        samples.push(Sample { frames: Frames::from_chw(3, 32, 32, &px)?, label, foreground: Vec::new() });
    }
    Ok(Dataset { samples, num_classes: 10 })
}

pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    parse_cifar10(&fs::read(path)?)
}

/// Loads `data_batch_*.bin` as the train split and `test_batch.bin` as the test split.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin")))
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Config(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let mut train = Dataset { samples: Vec::new(), num_classes: 10 };
    for f in &train_files {
        train.samples.extend(load_cifar10_file(f)?.samples);
    }
    let test = load_cifar10_file(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

const FRAMES_MAGIC: &[u8; 4] = b"TFRM";
const FRAMES_VERSION: u32 = 1;

/// Header of a `tensor_frames` file: magic `TFRM`, then little-endian u32
/// version, count, frames, channels, height, width, classes. Each record is
/// a u32 label followed by `frames * channels * height * width` f32 values
/// in `[T, C, H, W]` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramesHeader {
    pub count: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

const HEADER_BYTES: usize = 4 + 7 * 4;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { offset: offset as u64, message: "unexpected end of file".into() })
}

pub fn parse_tensor_frames(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != FRAMES_MAGIC {
        return Err(Error::Format { offset: 0, message: "missing TFRM magic".into() });
    }
    let version = read_u32(bytes, 4)?;
    if version != FRAMES_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported tensor_frames version {version}") });
    }
    let field = |i: usize| read_u32(bytes, 8 + 4 * i).map(|v| v as usize);
    let h = FramesHeader {
        count: field(0)?,
        frames: field(1)?,
        channels: field(2)?,
        height: field(3)?,
        width: field(4)?,
        classes: field(5)?,
    };
    let values = h.frames * h.channels * h.height * h.width;
    let record = 4 + 4 * values;
    let mut samples = Vec::with_capacity(h.count);
    for i in 0..h.count {
        let base = HEADER_BYTES + i * record;
        if bytes.len() < base + record {
            return Err(Error::Format { offset: base as u64, message: format!("record {i} truncated") });
        }
        let label = read_u32(bytes, base)? as usize;
        if label >= h.classes {
            return Err(Error::Format { offset: base as u64, message: format!("label {label} >= {} classes", h.classes) });
        }
        let buf: Vec<f32> = bytes[base + 4..base + record]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        samples.push(Sample { frames: Frames::from_tchw(h.frames, h.channels, h.height, h.width, &buf)?, label, foreground: Vec::new() });
    }
    let end = HEADER_BYTES + h.count * record;
    if bytes.len() != end {
        return Err(Error::Format { offset: end as u64, message: "trailing bytes after last record".into() });
    }
    Ok(Dataset { samples, num_classes: h.classes })
}

pub fn load_tensor_frames(path: &Path) -> Result<Dataset> {
    parse_tensor_frames(&fs::read(path)?)
}

/// Writes `[T, C, H, W]` records; every sample must share one shape.
pub fn write_tensor_frames(mut out: impl Write, ds: &Dataset, height: usize, width: usize) -> Result<()> {
    let first = ds.samples.first().ok_or_else(|| Error::Usage("cannot write an empty dataset".into()))?;
    let (frames, channels) = (first.frames.frames(), first.frames.channels());
    out.write_all(FRAMES_MAGIC)?;
    for v in [FRAMES_VERSION as usize, ds.len(), frames, channels, height, width, ds.num_classes] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let plane = height * width;
    for s in &ds.samples {
        if s.frames.frames() != frames || s.frames.channels() != channels || s.frames.pixels() != plane {
            return Err(Error::dim("tensor_frames sample", format!("[{frames}, {channels}, {height}, {width}]"), "mismatched sample"));
        }
        out.write_all(&(s.label as u32).to_le_bytes())?;
        for f in 0..frames {
            for c in 0..channels {
                for p in 0..plane {
                    out.write_all(&s.frames.data().get(f * plane + p, c).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}
