//! Random-ellipse phantoms and the on-disk dataset format.
//!
//! Dataset file layout (little endian): magic `SQDS`, `u32` version,
//! `u32` image count, `u32` extent, `count·extent²` `f32` pixels, `count`
//! split label bytes (0 train, 1 val, 2 test), then a CRC32 of everything
//! before it.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SQDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extent: usize,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    /// Additive intensity range of each ellipse.
    pub intensity: (f64, f64),
    /// Half-width of the per-image dominant orientation around horizontal.
    pub orientation_spread_deg: f64,
    /// Half-width of the per-ellipse deviation from the dominant orientation.
    pub jitter_deg: f64,
    /// Rotate every phantom by a uniform angle in `[0°, 180°)`.
    pub rotate: bool,
    /// Gaussian smoothing width in pixels (0 disables).
    pub smoothing_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extent: 64,
            min_ellipses: 3,
            max_ellipses: 8,
            intensity: (0.15, 0.5),
            orientation_spread_deg: 30.0,
            jitter_deg: 10.0,
            rotate: false,
            smoothing_sigma: 0.7,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.extent.is_power_of_two() || self.extent < 2 {
            return Err(arg_err("phantom", format!("extent {} is not a power of two", self.extent)));
        }
        if self.min_ellipses > self.max_ellipses {
            return Err(arg_err("phantom", "min_ellipses exceeds max_ellipses"));
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(arg_err("phantom", "intensities must satisfy 0 <= lo <= hi <= 1"));
        }
        if self.smoothing_sigma < 0.0 {
            return Err(arg_err("phantom", "negative smoothing width"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Orientation of the major axis, radians, counter-clockwise from +x.
    pub angle: f64,
    pub intensity: f64,
}

/// Geometry of one phantom in normalised coordinates (`[-1, 1]²`, `y` up).
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub ellipses: Vec<Ellipse>,
    /// Global rotation already applied to `ellipses`, radians.
    pub rotation: f64,
}

impl PhantomGeometry {
    pub fn sample<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Self {
        let count = rng.gen_range(spec.min_ellipses..=spec.max_ellipses);
        let spread = spec.orientation_spread_deg.to_radians();
        let jitter = spec.jitter_deg.to_radians();
        let dominant = if spread > 0.0 { rng.gen_range(-spread..=spread) } else { 0.0 };
        let ellipses = (0..count)
            .map(|_| {
                let a = rng.gen_range(0.2..0.7);
                let b = a * rng.gen_range(0.2..0.5);
                let r = (0.95 - a) * rng.gen::<f64>().sqrt();
                let t = rng.gen_range(0.0..2.0 * PI);
                let dev = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
                Ellipse {
                    center: (r * t.cos(), r * t.sin()),
                    semi_major: a,
                    semi_minor: b,
                    angle: dominant + dev,
                    intensity: rng.gen_range(spec.intensity.0..=spec.intensity.1),
                }
            })
            .collect();
        let mut g = Self {
            ellipses,
            rotation: 0.0,
        };
        if spec.rotate {
            g = g.rotated(rng.gen_range(0.0..PI));
        }
        g
    }

    /// Rotates the whole arrangement about the image centre.
    pub fn rotated(&self, phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            ellipses: self
                .ellipses
                .iter()
                .map(|e| Ellipse {
                    center: (c * e.center.0 - s * e.center.1, s * e.center.0 + c * e.center.1),
                    angle: e.angle + phi,
                    ..*e
                })
                .collect(),
            rotation: self.rotation + phi,
        }
    }

    pub fn render(&self, extent: usize, smoothing_sigma: f64) -> Tensor<f32> {
        let n = extent;
        let mut img = vec![0.0f64; n * n];
        for e in &self.ellipses {
            let (s, c) = e.angle.sin_cos();
            for r in 0..n {
                let y = 1.0 - 2.0 * (r as f64 + 0.5) / n as f64;
                for q in 0..n {
                    let x = 2.0 * (q as f64 + 0.5) / n as f64 - 1.0;
                    let (dx, dy) = (x - e.center.0, y - e.center.1);
                    let u = c * dx + s * dy;
                    let v = -s * dx + c * dy;
                    if (u / e.semi_major).powi(2) + (v / e.semi_minor).powi(2) <= 1.0 {
                        img[r * n + q] += e.intensity;
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        if smoothing_sigma > 0.0 {
            img = gaussian_blur(&img, n, smoothing_sigma);
        }
        Tensor::new(&[n, n], img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("phantom shape")
    }
}

fn gaussian_blur(img: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for q in 0..n {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as i64 - radius;
                    let (rr, qq) = if horizontal { (r as i64, q as i64 + o) } else { (r as i64 + o, q as i64) };
                    if rr >= 0 && qq >= 0 && rr < n as i64 && qq < n as i64 {
                        acc += kv * src[rr as usize * n + qq as usize];
                    }
                }
                out[r * n + q] = acc;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// One phantom drawn from `rng`.
pub fn generate_phantom<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<Tensor<f32>> {
    spec.validate()?;
    Ok(PhantomGeometry::sample(spec, rng).render(spec.extent, spec.smoothing_sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split label {other}"))),
        }
    }
}

/// How images are divided between splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Train/val fractions; the rest is test.
    Fractions { train: f64, val: f64 },
    Counts { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.8, val: 0.1 }
    }
}

impl SplitSpec {
    pub fn counts(&self, total: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSpec::Fractions { train, val } => {
                if !(train >= 0.0 && val >= 0.0 && train + val <= 1.0) {
                    return Err(arg_err("split", "fractions must be non-negative and sum to <= 1"));
                }
                let n_train = (train * total as f64).round() as usize;
                let n_val = ((val * total as f64).round() as usize).min(total - n_train);
                Ok((n_train, n_val, total - n_train - n_val))
            }
            SplitSpec::Counts { train, val, test } => {
                if train + val + test != total {
                    return Err(arg_err("split", format!("counts sum to {} but {total} images", train + val + test)));
                }
                Ok((train, val, test))
            }
        }
    }

    /// Split labels as a seeded permutation of the index range.
    pub fn assign(&self, total: usize, seed: u64) -> Result<Vec<Split>> {
        let (n_train, n_val, _) = self.counts(total)?;
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut seed::stream(seed, &[0x5917]));
        let mut labels = vec![Split::Test; total];
        for (rank, &i) in order.iter().enumerate() {
            labels[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    extent: usize,
    images: Vec<Tensor<f32>>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(extent: usize, images: Vec<Tensor<f32>>, splits: Vec<Split>) -> Result<Self> {
        if images.len() != splits.len() {
            return Err(arg_err("dataset", "one split label per image required"));
        }
        if let Some(bad) = images.iter().find(|i| i.shape() != [extent, extent]) {
            return Err(arg_err("dataset", format!("image {:?} in a {extent}x{extent} dataset", bad.shape())));
        }
        Ok(Self { extent, images, splits })
    }

    /// `count` phantoms, image `i` drawn from its own stream of `spec.seed`.
    pub fn generate(spec: &PhantomSpec, count: usize, split: &SplitSpec) -> Result<Self> {
        spec.validate()?;
        let images = (0..count)
            .map(|i| generate_phantom(spec, &mut seed::stream(spec.seed, &[i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let splits = split.assign(count, spec.seed)?;
        Self::new(spec.extent, images, splits)
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Dataset indices belonging to `split`, in order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// A dataset holding only the images of `split`.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx = self.indices(split);
        Dataset {
            extent: self.extent,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            splits: vec![split; idx.len()],
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.len() * (self.extent * self.extent * 4 + 1) + 4);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.extent as u32).to_le_bytes());
        for img in &self.images {
            for &v in img.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend(self.splits.iter().map(|s| s.code()));
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 20 {
            return Err(Error::Format("dataset file truncated".into()));
        }
        if &buf[..4] != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let word = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let count = word(8) as usize;
        let extent = word(12) as usize;
        let pixels = extent
            .checked_mul(extent)
            .and_then(|p| p.checked_mul(count))
            .ok_or_else(|| Error::Format("dataset header overflows".into()))?;
        let expected = 16 + pixels * 4 + count + 4;
        if buf.len() != expected {
            return Err(Error::Format(format!(
                "dataset file has {} bytes, header implies {expected}",
                buf.len()
            )));
        }
        let body = expected - 4;
        let stored = word(body);
        if crc32fast::hash(&buf[..body]) != stored {
            return Err(Error::Format("dataset checksum mismatch".into()));
        }
        let plane = extent * extent;
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let start = 16 + i * plane * 4;
            let data = buf[start..start + plane * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            images.push(Tensor::new(&[extent, extent], data)?);
        }
        let labels = &buf[16 + pixels * 4..body];
        let splits = labels.iter().map(|&c| Split::from_code(c)).collect::<Result<Vec<_>>>()?;
        Self::new(extent, images, splits)
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    ds.write(&mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    Dataset::read(&mut f)
}
