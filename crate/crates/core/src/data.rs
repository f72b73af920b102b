//! IDX loading, normalisation, synthetic tasks and pixel-space corruptions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tide_autograd::Tensor;

use crate::config::DataConfig;
use crate::error::{Result, TideError};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N·C·H·W` values, row-major per image.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// `[B, C, H, W]` batch and its labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        (Tensor::new(&[idx.len(), c, h, w], data), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            classes: self.classes,
            split: self.split.clone(),
        }
    }

    pub fn map_images(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Dataset {
        let mut images = Vec::with_capacity(self.images.len());
        for i in 0..self.len() {
            images.extend(f(i, self.image(i)));
        }
        Dataset { images, ..self.clone() }
    }
}

fn be_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_file(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| TideError::Data(format!("{}: {e}", p.display())))
}

/// Parse an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = read_file(images_path)?;
    let lb = read_file(labels_path)?;
    let derr = |m: String| TideError::Data(m);
    if ib.len() < 16 {
        return Err(derr(format!("{}: truncated header, expected 16 bytes, got {}", images_path.display(), ib.len())));
    }
    if lb.len() < 8 {
        return Err(derr(format!("{}: truncated header, expected 8 bytes, got {}", labels_path.display(), lb.len())));
    }
    if be_u32(&ib, 0) != IMAGE_MAGIC {
        return Err(derr(format!("{}: bad magic {:#010x}", images_path.display(), be_u32(&ib, 0))));
    }
    if be_u32(&lb, 0) != LABEL_MAGIC {
        return Err(derr(format!("{}: bad magic {:#010x}", labels_path.display(), be_u32(&lb, 0))));
    }
    let (n, h, w) = (be_u32(&ib, 4) as usize, be_u32(&ib, 8) as usize, be_u32(&ib, 12) as usize);
    let want = 16 + n * h * w;
    if ib.len() != want {
        return Err(derr(format!("{}: expected {want} bytes, got {}", images_path.display(), ib.len())));
    }
    let nl = be_u32(&lb, 4) as usize;
    if lb.len() != 8 + nl {
        return Err(derr(format!("{}: expected {} bytes, got {}", labels_path.display(), 8 + nl, lb.len())));
    }
    if nl != n {
        return Err(derr(format!("{n} images but {nl} labels")));
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&x| x as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset {
        images: ib[16..].iter().map(|&p| p as f64 / 255.0).collect(),
        labels,
        shape: [1, h, w],
        classes,
        split: String::new(),
    })
}

/// Write a single-channel dataset as IDX (pixels rounded to bytes).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.shape;
    if c != 1 {
        return Err(TideError::Data("IDX images must have one channel".into()));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, ib)?;
    fs::write(labels_path, lb)?;
    Ok(())
}

/// `(x − mean) / std` on every pixel (single-channel statistics).
pub fn normalize(ds: &Dataset, mean: f64, std: f64) -> Dataset {
    assert!(std > 0.0, "std must be positive");
    Dataset { images: ds.images.iter().map(|x| (x - mean) / std).collect(), ..ds.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// A Gaussian bump centred at (2,2) or (5,5) on 8×8.
    Blobs,
    /// Horizontal vs vertical bar on 8×8.
    Bars,
}

impl std::str::FromStr for SyntheticKind {
    type Err = TideError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "bars" => Ok(Self::Bars),
            _ => Err(TideError::Config(format!("unknown synthetic task {s}"))),
        }
    }
}

/// Seeded two-class 8×8 task with balanced, alternating labels.
pub fn synthetic_task(kind: SyntheticKind, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let mut img = [0.0f64; 64];
        match kind {
            SyntheticKind::Blobs => {
                let c = if y == 0 { 2.0 } else { 5.0 };
                let amp = rng.random_range(0.8..1.0);
                for (k, p) in img.iter_mut().enumerate() {
                    let (r, q) = ((k / 8) as f64, (k % 8) as f64);
                    *p = amp * (-((r - c).powi(2) + (q - c).powi(2)) / 2.0).exp();
                }
            }
            SyntheticKind::Bars => {
                let pos = rng.random_range(2..=5usize);
                for t in 1..=6 {
                    let k = if y == 0 { pos * 8 + t } else { t * 8 + pos };
                    img[k] = 1.0;
                }
            }
        }
        for p in img.iter_mut() {
            *p = (*p + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        images.extend_from_slice(&img);
        labels.push(y);
    }
    Dataset { images, labels, shape: [1, 8, 8], classes: 2, split: "synthetic".into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Rotate,
    HorizontalFlip,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        Self::GaussianNoise,
        Self::GaussianBlur,
        Self::Rotate,
        Self::HorizontalFlip,
        Self::Contrast,
        Self::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian-noise",
            Self::GaussianBlur => "gaussian-blur",
            Self::Rotate => "rotate-15",
            Self::HorizontalFlip => "horizontal-flip",
            Self::Contrast => "contrast",
            Self::Brightness => "brightness",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TideError::Config(format!("unknown corruption kind {s}")))
    }
}

pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const BLUR_SIGMA: [f64; 5] = [0.4, 0.6, 0.8, 1.1, 1.5];
pub const CONTRAST: [f64; 5] = [0.8, 0.6, 0.45, 0.3, 0.2];
pub const BRIGHTNESS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Degrees per severity level; level 5 is 15°.
pub const ROTATE_STEP: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: usize,
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.severity)
    }
}

/// Comma-separated `kind[:severity]`; a bare kind expands to severities 1..=5.
pub fn parse_corruptions(list: &str) -> Result<Vec<Corruption>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, sev) = match item.split_once(':') {
            Some((k, s)) => {
                let s: usize = s.parse().map_err(|_| TideError::Config(format!("bad severity in {item}")))?;
                (k, Some(s))
            }
            None => (item, None),
        };
        let kind = CorruptionKind::parse(k)?;
        match sev {
            Some(s) if (1..=5).contains(&s) => out.push(Corruption { kind, severity: s }),
            Some(s) => return Err(TideError::Config(format!("severity {s} outside 1..=5"))),
            None => out.extend((1..=5).map(|severity| Corruption { kind, severity })),
        }
    }
    Ok(out)
}

fn blur_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Apply one corruption to a `[C, H, W]` image in pixel space.
pub fn corrupt(image: &[f64], shape: [usize; 3], c: Corruption, seed: u64) -> Result<Vec<f64>> {
    if !(1..=5).contains(&c.severity) {
        return Err(TideError::Config(format!("severity {} outside 1..=5", c.severity)));
    }
    let [ch, h, w] = shape;
    let s = c.severity - 1;
    let at = |img: &[f64], k: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[k * h * w + y as usize * w + x as usize]
        }
    };
    let out = match c.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            image
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + NOISE_SIGMA[s] * z
                })
                .collect()
        }
        CorruptionKind::GaussianBlur => {
            let k = blur_1d(BLUR_SIGMA[s]);
            let r = (k.len() / 2) as isize;
            let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1);
            let mut tmp = vec![0.0; image.len()];
            for kk in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        tmp[kk * h * w + y * w + x] = k
                            .iter()
                            .enumerate()
                            .map(|(i, wt)| wt * image[kk * h * w + y * w + clampi(x as isize + i as isize - r, w) as usize])
                            .sum();
                    }
                }
            }
            let mut out = vec![0.0; image.len()];
            for kk in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        out[kk * h * w + y * w + x] = k
                            .iter()
                            .enumerate()
                            .map(|(i, wt)| wt * tmp[kk * h * w + clampi(y as isize + i as isize - r, h) as usize * w + x])
                            .sum();
                    }
                }
            }
            out
        }
        CorruptionKind::Rotate => {
            let th = (ROTATE_STEP * c.severity as f64).to_radians();
            let (sn, cs) = th.sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let mut out = vec![0.0; image.len()];
            for kk in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        // inverse map of the output pixel into the source
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        let sy = cs * dy - sn * dx + cy;
                        let sx = sn * dy + cs * dx + cx;
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = (sy - y0, sx - x0);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        out[kk * h * w + y * w + x] = (1.0 - fy) * (1.0 - fx) * at(image, kk, y0, x0)
                            + (1.0 - fy) * fx * at(image, kk, y0, x0 + 1)
                            + fy * (1.0 - fx) * at(image, kk, y0 + 1, x0)
                            + fy * fx * at(image, kk, y0 + 1, x0 + 1);
                    }
                }
            }
            out
        }
        CorruptionKind::HorizontalFlip => {
            let mut out = vec![0.0; image.len()];
            for kk in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        out[kk * h * w + y * w + x] = image[kk * h * w + y * w + (w - 1 - x)];
                    }
                }
            }
            out
        }
        CorruptionKind::Contrast => {
            let mean = image.iter().sum::<f64>() / image.len() as f64;
            image.iter().map(|p| mean + CONTRAST[s] * (p - mean)).collect()
        }
        CorruptionKind::Brightness => image.iter().map(|p| (p + BRIGHTNESS[s]).clamp(0.0, 1.0)).collect(),
    };
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Directory for IDX data: explicit setting, else `TIDE_DATA_DIR`.
pub fn data_dir(cfg: &DataConfig) -> Result<PathBuf> {
    if let Some(d) = &cfg.dir {
        return Ok(PathBuf::from(d));
    }
    std::env::var("TIDE_DATA_DIR")
        .map(PathBuf::from)
        .map_err(|_| TideError::Data("no data directory: set data.dir or TIDE_DATA_DIR".into()))
}

/// Raw pixel-space split `[0, 1]` as configured (limits applied).
pub fn load_split_raw(cfg: &DataConfig, split: Split, seed: u64) -> Result<Dataset> {
    let mut ds = match cfg.dataset.as_str() {
        "mnist" | "fashion-mnist" => {
            let dir = data_dir(cfg)?;
            let prefix = if split == Split::Train { "train" } else { "t10k" };
            let mut d = load_idx(
                &dir.join(format!("{prefix}-images-idx3-ubyte")),
                &dir.join(format!("{prefix}-labels-idx1-ubyte")),
            )?;
            d.classes = 10;
            d
        }
        other => {
            let kind: SyntheticKind = other.parse()?;
            let off = if split == Split::Train { 0 } else { 0x7e57 };
            synthetic_task(kind, cfg.synthetic_n, seed.wrapping_add(off))
        }
    };
    let limit = if split == Split::Train { cfg.train_limit } else { cfg.test_limit };
    if let Some(n) = limit {
        ds = ds.take(n);
    }
    ds.split = if split == Split::Train { "train".into() } else { "test".into() };
    Ok(ds)
}

/// Normalised split ready for the model. Synthetic tasks are not normalised.
pub fn load_split(cfg: &DataConfig, split: Split, seed: u64) -> Result<Dataset> {
    let ds = load_split_raw(cfg, split, seed)?;
    Ok(if is_synthetic(cfg) { ds } else { normalize(&ds, cfg.mean, cfg.std) })
}

pub fn is_synthetic(cfg: &DataConfig) -> bool {
    !matches!(cfg.dataset.as_str(), "mnist" | "fashion-mnist")
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}
