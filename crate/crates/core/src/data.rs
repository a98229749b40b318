//! Paired low/normal image datasets: directory loading, synthetic
//! degradation, aligned random crops and hash-based splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FileIssue, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// A decoded pair of `H x W x 3` images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub low: Tensor,
    pub high: Tensor,
}

impl ImagePair {
    pub fn size(&self) -> (usize, usize) {
        (self.high.shape()[0], self.high.shape()[1])
    }
}

#[derive(Clone, Debug)]
enum Source {
    Files { low: PathBuf, high: PathBuf },
    Memory { low: Tensor, high: Tensor },
}

#[derive(Clone, Debug)]
pub struct PairEntry {
    pub name: String,
    pub height: usize,
    pub width: usize,
    source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Test,
}

/// Ordered list of pairs. File-backed entries decode on access.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    entries: Vec<PairEntry>,
    pub split: Split,
}

impl PairedDataset {
    pub fn from_pairs(pairs: Vec<ImagePair>) -> Result<Self> {
        let mut entries = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.low.shape() != p.high.shape() || p.high.rank() != 3 || p.high.shape()[2] != 3 {
                return Err(Error::Dataset(vec![FileIssue {
                    path: PathBuf::from(&p.name),
                    reason: format!(
                        "low {:?} and normal {:?} must both be H x W x 3",
                        p.low.shape(),
                        p.high.shape()
                    ),
                }]));
            }
            let (height, width) = p.size();
            entries.push(PairEntry {
                name: p.name,
                height,
                width,
                source: Source::Memory {
                    low: p.low,
                    high: p.high,
                },
            });
        }
        Ok(Self {
            entries,
            split: Split::All,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, i: usize) -> Result<ImagePair> {
        let e = &self.entries[i];
        let (low, high) = match &e.source {
            Source::Memory { low, high } => (low.clone(), high.clone()),
            Source::Files { low, high } => (load_image(low)?, load_image(high)?),
        };
        if low.shape() != high.shape() {
            return Err(mismatch(&e.name, low.shape(), high.shape()));
        }
        Ok(ImagePair {
            name: e.name.clone(),
            low,
            high,
        })
    }

    /// Deterministic train/test split by filename hash.
    ///
    /// A name goes to the test side when its hash falls below
    /// `test_ratio` of the hash range. If that leaves one side empty, the
    /// pair with the most extreme hash is moved across; a single pair is
    /// placed in both splits.
    pub fn split(&self, test_ratio: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_ratio) {
            return Err(Error::Config(format!(
                "test ratio must be in [0, 1), got {test_ratio}"
            )));
        }
        if self.is_empty() {
            return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
        }
        let unit = |e: &PairEntry| fnv1a(e.name.as_bytes()) as f64 / u64::MAX as f64;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for e in &self.entries {
            if unit(e) < test_ratio {
                test.push(e.clone());
            } else {
                train.push(e.clone());
            }
        }
        if self.len() == 1 {
            train = self.entries.clone();
            test = self.entries.clone();
        } else if test.is_empty() && test_ratio > 0.0 {
            let i = argmin(&train, unit);
            test.push(train.remove(i));
        } else if train.is_empty() {
            let i = argmin(&test, |e| -unit(e));
            train.push(test.remove(i));
        }
        let by_name = |v: &mut Vec<PairEntry>| v.sort_by(|a, b| a.name.cmp(&b.name));
        by_name(&mut train);
        by_name(&mut test);
        Ok((
            Self {
                entries: train,
                split: Split::Train,
            },
            Self {
                entries: test,
                split: Split::Test,
            },
        ))
    }
}

fn argmin(v: &[PairEntry], key: impl Fn(&PairEntry) -> f64) -> usize {
    (0..v.len())
        .min_by(|&a, &b| key(&v[a]).total_cmp(&key(&v[b])))
        .unwrap_or(0)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn mismatch(name: &str, low: &[usize], high: &[usize]) -> Error {
    Error::Dataset(vec![FileIssue {
        path: PathBuf::from(name),
        reason: format!("size mismatch: low is {low:?}, normal is {high:?}"),
    }])
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(vec![FileIssue {
            path: dir.to_path_buf(),
            reason: "directory not found".into(),
        }]));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs files with identical names in `low_dir` and `high_dir`, sorted by
/// name. Only image headers are read here; pixels decode in
/// [`PairedDataset::get`].
pub fn load_pairs(low_dir: &Path, high_dir: &Path) -> Result<PairedDataset> {
    let low = list_images(low_dir)?;
    let high = list_images(high_dir)?;
    if low.is_empty() && high.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no PNG or JPEG files in {} or {}",
            low_dir.display(),
            high_dir.display()
        )));
    }
    let mut issues = Vec::new();
    for (name, path) in &high {
        if !low.contains_key(name) {
            issues.push(FileIssue {
                path: path.clone(),
                reason: format!("no low-light counterpart in {}", low_dir.display()),
            });
        }
    }
    let mut entries = Vec::new();
    for (name, low_path) in &low {
        let Some(high_path) = high.get(name) else {
            issues.push(FileIssue {
                path: low_path.clone(),
                reason: format!("no normal-light counterpart in {}", high_dir.display()),
            });
            continue;
        };
        let dims = |p: &Path| image::image_dimensions(p).map_err(|e| e.to_string());
        match (dims(low_path), dims(high_path)) {
            (Ok(l), Ok(h)) if l == h => entries.push(PairEntry {
                name: name.clone(),
                height: l.1 as usize,
                width: l.0 as usize,
                source: Source::Files {
                    low: low_path.clone(),
                    high: high_path.clone(),
                },
            }),
            (Ok(l), Ok(h)) => issues.push(FileIssue {
                path: low_path.clone(),
                reason: format!(
                    "size mismatch: low is {}x{}, normal is {}x{}",
                    l.1, l.0, h.1, h.0
                ),
            }),
            (Err(e), _) => issues.push(FileIssue {
                path: low_path.clone(),
                reason: format!("undecodable: {e}"),
            }),
            (_, Err(e)) => issues.push(FileIssue {
                path: high_path.clone(),
                reason: format!("undecodable: {e}"),
            }),
        }
    }
    if !issues.is_empty() {
        return Err(Error::Dataset(issues));
    }
    Ok(PairedDataset {
        entries,
        split: Split::All,
    })
}

/// Loads `<root>/low` against `<root>/high`.
pub fn load_root(root: &Path) -> Result<PairedDataset> {
    load_pairs(&root.join("low"), &root.join("high"))
}

/// Decodes a PNG or JPEG into `H x W x 3` values in `[0, 1]`. Grayscale
/// and alpha images are converted to RGB.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

pub fn to_rgb8(img: &Tensor) -> Result<image::RgbImage> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(Error::shape(
            "to_rgb8",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let raw = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::shape("to_rgb8", "buffer size"))
}

/// Writes an 8-bit PNG, clamping values to `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    to_rgb8(img)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

/// Ranges for synthetic darkening: `low = clamp(high^gamma + N(0, sigma))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub gamma: (f64, f64),
    pub sigma: (f64, f64),
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            gamma: (2.0, 5.0),
            sigma: (0.0, 0.02),
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let (g0, g1) = self.gamma;
        let (s0, s1) = self.sigma;
        if !(g0 >= 1.0 && g1 >= g0) {
            return Err(Error::Config(format!(
                "gamma range must satisfy 1 <= lo <= hi, got {:?}",
                self.gamma
            )));
        }
        if !(s0 >= 0.0 && s1 >= s0) {
            return Err(Error::Config(format!(
                "sigma range must satisfy 0 <= lo <= hi, got {:?}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Same ranges with a seed derived for the `i`-th image.
    pub fn for_index(&self, i: usize) -> Self {
        Self {
            seed: self.seed ^ fnv1a(&(i as u64).to_le_bytes()),
            ..self.clone()
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Returns `(low, normal)`; the degradation draw depends only on `cfg`.
pub fn synthesize_pair(normal: &Tensor, cfg: &DegradationConfig) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = draw(&mut rng, cfg.gamma) as f32;
    let sigma = draw(&mut rng, cfg.sigma);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut low = normal.clone();
    for v in low.data_mut() {
        let n = if sigma > 0.0 {
            noise.sample(&mut rng) as f32
        } else {
            0.0
        };
        *v = (v.clamp(0.0, 1.0).powf(gamma) + n).clamp(0.0, 1.0);
    }
    Ok((low, normal.clone()))
}

/// Crops the same `patch x patch` window out of both images.
pub fn random_crop_pair(pair: &ImagePair, patch: usize, seed: u64) -> Result<ImagePair> {
    let (h, w) = pair.size();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Config(format!(
            "patch {patch} does not fit `{}` of size {h}x{w}",
            pair.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    let crop = |t: &Tensor| {
        Tensor::from_fn(&[patch, patch, 3], |i| {
            let (y, x, c) = (i / (patch * 3), (i / 3) % patch, i % 3);
            t.data()[((y0 + y) * w + x0 + x) * 3 + c]
        })
    };
    Ok(ImagePair {
        name: pair.name.clone(),
        low: crop(&pair.low),
        high: crop(&pair.high),
    })
}

/// Procedural test scene in `[0.05, 0.95]`: a colour gradient with soft
/// disks and a low-frequency texture.
pub fn synthetic_scene(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f32; 3]; 2] = [
        std::array::from_fn(|_| rng.random_range(0.2..0.8)),
        std::array::from_fn(|_| rng.random_range(0.2..0.8)),
    ];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let disks: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                std::array::from_fn(|_| rng.random_range(0.05..0.95)),
            )
        })
        .collect();
    let freq: f32 = rng.random_range(2.0..6.0);
    Tensor::from_fn(&[h, w, 3], |i| {
        let c = i % 3;
        let y = (i / (3 * w)) as f32 / h.max(1) as f32;
        let x = ((i / 3) % w) as f32 / w.max(1) as f32;
        let t = 0.5 + 0.5 * ((x - 0.5) * angle.cos() + (y - 0.5) * angle.sin());
        let mut v = base[0][c] * (1.0 - t) + base[1][c] * t;
        for &(cx, cy, r, col) in &disks {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let a = (1.0 - (d - r) / 0.04).clamp(0.0, 1.0);
            v = v * (1.0 - a) + col[c] * a;
        }
        v += 0.05
            * (freq * std::f32::consts::TAU * x).sin()
            * (freq * std::f32::consts::TAU * y).cos();
        v.clamp(0.05, 0.95)
    })
}

/// `n` synthetic scenes degraded with `cfg`, named `synthetic_000.png` on.
pub fn synthetic_dataset(
    n: usize,
    h: usize,
    w: usize,
    cfg: &DegradationConfig,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset("synthetic dataset of size 0".into()));
    }
    let pairs = (0..n)
        .map(|i| {
            let scene = synthetic_scene(
                h,
                w,
                cfg.seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9),
            );
            let (low, high) = synthesize_pair(&scene, &cfg.for_index(i))?;
            Ok(ImagePair {
                name: format!("synthetic_{i:03}.png"),
                low,
                high,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::from_pairs(pairs)
}
