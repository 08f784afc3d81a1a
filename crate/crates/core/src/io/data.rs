//! Datasets: procedurally rendered shapes and an image-folder loader.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigViolations, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticShapes,
    ImageFolder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Root with `train/<class>/*` and `test/<class>/*` for image folders.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticShapes,
            image_size: 32,
            channels: 3,
            num_classes: 4,
            train_size: 2000,
            test_size: 500,
            seed: 0,
            path: None,
        }
    }
}

pub const NUM_SHAPES: usize = 6;

impl DatasetSpec {
    pub fn check(&self, prefix: &str, out: &mut ConfigViolations) {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.image_size < 8 {
            out.push(p("image_size"), "must be ≥ 8");
        }
        match self.kind {
            DatasetKind::SyntheticShapes => {
                if !(2..=NUM_SHAPES).contains(&self.num_classes) {
                    out.push(p("num_classes"), format!("synthetic shapes support 2..={NUM_SHAPES} classes"));
                }
                if self.channels != 1 && self.channels != 3 {
                    out.push(p("channels"), "synthetic shapes render 1 or 3 channels");
                }
                if self.train_size == 0 {
                    out.push(p("train_size"), "must be ≥ 1");
                }
                if self.test_size == 0 {
                    out.push(p("test_size"), "must be ≥ 1");
                }
            }
            DatasetKind::ImageFolder => {
                if self.path.is_none() {
                    out.push(p("path"), "image-folder datasets need a path");
                }
                if self.channels != 1 && self.channels != 3 {
                    out.push(p("channels"), "must be 1 or 3");
                }
            }
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Test => self.test_size,
        }
    }
}

/// Deterministic per-sample stream derived from `(seed, split, index)`.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    // jump to an independent stream per sample
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    s.set_stream(tag << 48 | index as u64);
    s
}

fn shape_inside(class: usize, x: f64, y: f64) -> bool {
    // (x, y) in the shape's unit frame, shape roughly fills radius 1
    let r = (x * x + y * y).sqrt();
    match class {
        0 => r <= 1.0,
        1 => x.abs() <= 0.8 && y.abs() <= 0.8,
        2 => {
            // equilateral triangle with circumradius 1
            let h = 0.5;
            y >= -h && (3f64.sqrt() * x.abs() + y) <= 1.0
        }
        3 => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
        4 => (0.55..=1.0).contains(&r),
        _ => {
            // five-pointed star
            let theta = y.atan2(x);
            let k = (theta * 5.0 / (2.0 * PI)).rem_euclid(1.0);
            let edge = 0.45 + 0.55 * (1.0 - (2.0 * k - 1.0).abs()).powf(2.0);
            r <= edge
        }
    }
}

/// Renders sample `index` of a synthetic split as `[c, s, s]` pixels in
/// `[0, 1]` with label `index % num_classes`.
pub fn synth_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<(Tensor<f32>, usize)> {
    let len = spec.split_size(split);
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let label = index % spec.num_classes;
    let mut rng = sample_rng(spec.seed, split, index);
    let s = spec.image_size;
    let c = spec.channels;
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.random(), rng.random(), rng.random()] };

    // low-contrast stripes: the texture is a nuisance, not a second object
    let bg_a = color(&mut rng);
    let bg_b = bg_a.map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    let freq = rng.random_range(1.0..4.0);
    let orient = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut fg = color(&mut rng);
    // keep the shape visible against the mean background
    let bg_mean = [0, 1, 2].map(|i| 0.5 * (bg_a[i] + bg_b[i]));
    let contrast: f64 = (0..3).map(|i| (fg[i] - bg_mean[i]).abs()).sum::<f64>() / 3.0;
    if contrast < 0.25 {
        fg = bg_mean.map(|v| if v > 0.5 { v - 0.45 } else { v + 0.45 });
    }
    let radius = rng.random_range(0.22..0.38) * s as f64;
    let margin = radius * 0.9;
    let cx = rng.random_range(margin..s as f64 - margin);
    let cy = rng.random_range(margin..s as f64 - margin);
    let rot = rng.random_range(0.0..2.0 * PI);
    let noise_amp = 0.04;

    let (sin_r, cos_r) = rot.sin_cos();
    let (sin_o, cos_o) = orient.sin_cos();
    let mut out = vec![0f32; c * s * s];
    for py in 0..s {
        for px in 0..s {
            let mut cover = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = px as f64 + 0.25 + 0.5 * sx as f64 - cx;
                    let y = py as f64 + 0.25 + 0.5 * sy as f64 - cy;
                    let u = (cos_r * x + sin_r * y) / radius;
                    let v = (-sin_r * x + cos_r * y) / radius;
                    if shape_inside(label_shape(label), u, v) {
                        cover += 0.25;
                    }
                }
            }
            let t = (px as f64 * cos_o + py as f64 * sin_o) * 2.0 * PI * freq / s as f64 + phase;
            let mix = 0.5 + 0.5 * t.sin();
            let noise: f64 = rng.random_range(-noise_amp..noise_amp);
            for ch in 0..c {
                let ci = if c == 1 { 0 } else { ch };
                let bg = bg_a[ci] * mix + bg_b[ci] * (1.0 - mix);
                let v = if c == 1 {
                    let lum = |p: [f64; 3]| (p[0] + p[1] + p[2]) / 3.0;
                    let bgl = lum(bg_a) * mix + lum(bg_b) * (1.0 - mix);
                    bgl * (1.0 - cover) + lum(fg) * cover
                } else {
                    bg * (1.0 - cover) + fg[ci] * cover
                };
                out[(ch * s + py) * s + px] = (v + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((Tensor::new([c, s, s], out)?, label))
}

fn label_shape(label: usize) -> usize {
    label % NUM_SHAPES
}

/// A fully materialized split.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the listed samples into `[b, c, s, s]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([idx.len(), self.channels, self.size, self.size], data)?, labels))
    }

    /// Like [`batch`](Self::batch), with a random crop (zero padding `pad`)
    /// and, if `flip`, a random horizontal flip per sample.
    pub fn augmented_batch(&self, idx: &[usize], pad: usize, flip: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (mut t, labels) = self.batch(idx)?;
        let (c, s) = (self.channels, self.size);
        let mut buf = vec![0f32; c * s * s];
        for img in t.data_mut().chunks_exact_mut(c * s * s) {
            let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
            let flip = flip && rng.random::<bool>();
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let sx = if flip { s - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        buf[(ch * s + y) * s + x] = if (0..s as isize).contains(&sx) && (0..s as isize).contains(&sy) {
                            img[(ch * s + sy as usize) * s + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
            img.copy_from_slice(&buf);
        }
        Ok((t, labels))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: DataSplit,
    pub test: DataSplit,
    pub num_classes: usize,
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        let mut v = ConfigViolations::default();
        spec.check("dataset", &mut v);
        v.into_result()?;
        match spec.kind {
            DatasetKind::SyntheticShapes => Ok(Self {
                train: synth_split(spec, Split::Train)?,
                test: synth_split(spec, Split::Test)?,
                num_classes: spec.num_classes,
            }),
            DatasetKind::ImageFolder => {
                let root = spec.path.as_deref().expect("checked above");
                let classes = class_dirs(&root.join("train"))?;
                if classes.len() < 2 {
                    return Err(Error::config(format!("{}: need ≥ 2 class folders", root.display())));
                }
                Ok(Self {
                    train: folder_split(&root.join("train"), &classes, spec)?,
                    test: folder_split(&root.join("test"), &classes, spec)?,
                    num_classes: classes.len(),
                })
            }
        }
    }
}

impl Dataset {
    /// Materializes only `split`.
    pub fn load_split(spec: &DatasetSpec, split: Split) -> Result<DataSplit> {
        let mut v = ConfigViolations::default();
        spec.check("dataset", &mut v);
        v.into_result()?;
        match spec.kind {
            DatasetKind::SyntheticShapes => synth_split(spec, split),
            DatasetKind::ImageFolder => {
                let root = spec.path.as_deref().expect("checked above");
                let classes = class_dirs(&root.join("train"))?;
                folder_split(&root.join(split.name()), &classes, spec)
            }
        }
    }
}

fn synth_split(spec: &DatasetSpec, split: Split) -> Result<DataSplit> {
    let n = spec.split_size(split);
    let mut images = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (img, label) = synth_sample(spec, split, i)?;
        images.extend_from_slice(img.data());
        labels.push(label);
    }
    Ok(DataSplit {
        images,
        labels,
        channels: spec.channels,
        size: spec.image_size,
    })
}

fn class_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

fn folder_split(dir: &Path, classes: &[String], spec: &DatasetSpec) -> Result<DataSplit> {
    let s = spec.image_size as u32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join(class))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| Error::Image(format!("{}: {e}", f.display())))?;
            let img = img.resize_exact(s, s, image::imageops::FilterType::Triangle);
            if spec.channels == 1 {
                let g = img.to_luma8();
                images.extend(g.pixels().map(|p| p[0] as f32 / 255.0));
            } else {
                let rgb = img.to_rgb8();
                for ch in 0..3 {
                    images.extend(rgb.pixels().map(|p| p[ch] as f32 / 255.0));
                }
            }
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::config(format!("{}: no images found", dir.display())));
    }
    Ok(DataSplit {
        images,
        labels,
        channels: spec.channels,
        size: spec.image_size,
    })
}
