//! Image datasets: an in-memory container with batch gathering, a
//! deterministic synthetic grating corpus, and loaders for IDX and raw-u8
//! files. Pixels are stored as f32 in [0,1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable per-purpose seed derivation: mixes a master seed, a stream name
/// and an index so every consumer of randomness gets its own stream.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16 + stream.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(stream.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

pub fn seeded_rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, c: usize, h: usize, w: usize) -> Result<Dataset> {
        let plane = c * h * w;
        if plane == 0 {
            return Err(Error::Config("dataset needs positive image dimensions".into()));
        }
        if images.len() != labels.len() * plane {
            return Err(Error::Config(format!(
                "dataset holds {} pixel values, expected {} images x {} pixels",
                images.len(),
                labels.len(),
                plane
            )));
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("dataset pixels must lie in [0,1]".into()));
        }
        Ok(Dataset { images, labels, c, h, w })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Number of classes implied by the labels (max + 1).
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Gather the given rows into a [k,C,H,W] batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let plane = self.image_numel();
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new([indices.len(), self.c, self.h, self.w], data)?,
            labels,
        ))
    }

    /// Split off the first `n_first` images.
    pub fn split(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first > self.len() {
            return Err(Error::Usage(format!(
                "cannot split {n_first} images off a dataset of {}",
                self.len()
            )));
        }
        let plane = self.image_numel();
        let a = Dataset {
            images: self.images[..n_first * plane].to_vec(),
            labels: self.labels[..n_first].to_vec(),
            c: self.c,
            h: self.h,
            w: self.w,
        };
        let b = Dataset {
            images: self.images[n_first * plane..].to_vec(),
            labels: self.labels[n_first..].to_vec(),
            c: self.c,
            h: self.h,
            w: self.w,
        };
        Ok((a, b))
    }
}

const GRATING_CLASSES: usize = 10;
const GRATING_BLOBS: usize = 3;

/// Deterministic grayscale grating corpus. The class sets the orientation of
/// a smooth sinusoidal grating (class `k` leans `k*pi/10` radians, plus a
/// small jitter); random phase, frequency and amplitude vary within a class,
/// and a few random Gaussian blobs add label-free clutter. The field is
/// squashed through tanh so pixels stay strictly inside (0,1). All
/// randomness is a handful of per-image scalars; there is no per-pixel
/// noise, so clean images are smooth and lie on a low-dimensional manifold
/// a denoiser can learn. Same arguments, same bytes.
pub fn synthetic_gratings(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if h < 8 || w < 8 {
        return Err(Error::Config("synthetic gratings need at least 8x8 pixels".into()));
    }
    let s = h.min(w) as f32;
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % GRATING_CLASSES;
        let mut rng = seeded_rng(seed, "gratings", i as u64);
        let theta = class as f32 * std::f32::consts::PI / GRATING_CLASSES as f32
            + rng.random_range(-0.06..0.06f32);
        let freq = rng.random_range(1.7..2.3f32);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let amp = rng.random_range(0.16..0.24f32);
        let blobs: Vec<[f32; 4]> = (0..GRATING_BLOBS)
            .map(|_| {
                [
                    rng.random_range(-0.5..0.5f32),
                    rng.random_range(-0.5..0.5f32),
                    rng.random_range(0.12..0.30f32),
                    rng.random_range(-0.25..0.25f32),
                ]
            })
            .collect();
        let (dx, dy) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let xn = (x as f32 - 0.5 * (w - 1) as f32) / s;
                let yn = (y as f32 - 0.5 * (h - 1) as f32) / s;
                let u = xn * dx + yn * dy;
                let mut field = amp * (std::f32::consts::TAU * freq * u + phase).sin();
                for &[bx, by, bw, ba] in &blobs {
                    let d2 = (xn - bx) * (xn - bx) + (yn - by) * (yn - by);
                    field += ba * (-d2 / (2.0 * bw * bw)).exp();
                }
                images.push(0.5 + 0.45 * field.tanh());
            }
        }
        labels.push(class);
    }
    Dataset::new(images, labels, 1, h, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Big-endian IDX (the MNIST container): images as 3-dim `[n,h,w]` or
    /// 4-dim `[n,c,h,w]` unsigned bytes, labels as 1-dim unsigned bytes.
    Idx,
    /// Little-endian raw: images as four u32 `[n,c,h,w]` then bytes,
    /// labels as one u32 count then bytes.
    Raw,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Cursor<'a> {
        Cursor { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "{}: truncated while reading {field} ({} bytes left, {n} needed)",
                    self.what,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32_le(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "{}: {} trailing bytes after payload",
                    self.what,
                    self.bytes.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize, usize)> {
    let mut cur = Cursor::new(bytes, "idx images");
    let magic = cur.u32_be("magic")?;
    let ndims = (magic & 0xff) as usize;
    if magic >> 8 != 0x0008 || !(ndims == 3 || ndims == 4) {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("idx images: bad magic {magic:#010x}, expected u8 data with 3 or 4 dims"),
        });
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(cur.u32_be(&format!("dim {i}"))? as usize);
    }
    let (n, c, h, w) = if ndims == 3 {
        (dims[0], 1, dims[1], dims[2])
    } else {
        (dims[0], dims[1], dims[2], dims[3])
    };
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Parse {
            offset: 4,
            msg: "idx images: dimension overflow".into(),
        })?;
    let payload = cur.take(count, "pixel payload")?.to_vec();
    cur.expect_done()?;
    Ok((payload, n, c, h, w))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes, "idx labels");
    let magic = cur.u32_be("magic")?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("idx labels: bad magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let n = cur.u32_be("count")? as usize;
    let payload = cur.take(n, "label payload")?.to_vec();
    cur.expect_done()?;
    Ok(payload)
}

fn parse_raw_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize, usize)> {
    let mut cur = Cursor::new(bytes, "raw images");
    let n = cur.u32_le("n")? as usize;
    let c = cur.u32_le("c")? as usize;
    let h = cur.u32_le("h")? as usize;
    let w = cur.u32_le("w")? as usize;
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Parse {
            offset: 0,
            msg: "raw images: dimension overflow".into(),
        })?;
    let payload = cur.take(count, "pixel payload")?.to_vec();
    cur.expect_done()?;
    Ok((payload, n, c, h, w))
}

fn parse_raw_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes, "raw labels");
    let n = cur.u32_le("count")? as usize;
    let payload = cur.take(n, "label payload")?.to_vec();
    cur.expect_done()?;
    Ok(payload)
}

/// Load an image/label file pair. Pixel bytes are normalized to [0,1].
pub fn load_dataset(images: &Path, labels: &Path, format: DatasetFormat) -> Result<Dataset> {
    let image_bytes = std::fs::read(images)?;
    let label_bytes = std::fs::read(labels)?;
    let ((pixels, n, c, h, w), raw_labels) = match format {
        DatasetFormat::Idx => (parse_idx_images(&image_bytes)?, parse_idx_labels(&label_bytes)?),
        DatasetFormat::Raw => (parse_raw_images(&image_bytes)?, parse_raw_labels(&label_bytes)?),
    };
    if raw_labels.len() != n {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("{} images but {} labels", n, raw_labels.len()),
        });
    }
    Dataset::new(
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        raw_labels.iter().map(|&b| b as usize).collect(),
        c,
        h,
        w,
    )
}
