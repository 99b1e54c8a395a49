//! Images, patch sets and their file formats.
//!
//! Readers: binary PGM (`P5`), IDX3 image files (MNIST layout) and the `PST1`
//! patch cache (`PST1 <count> <dim>\n` followed by little-endian `f64`s).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::rng::{self, Stream};

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// The `size x size` patch with top-left corner `(x, y)`, row-major.
    pub fn patch(&self, x: usize, y: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for row in y..y + size {
            let start = row * self.width + x;
            out.extend_from_slice(&self.pixels[start..start + size]);
        }
        out
    }
}

/// Where a patch set came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub source: String,
    pub patch_size: Option<usize>,
    pub seed: Option<u64>,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source)?;
        if let Some(p) = self.patch_size {
            write!(f, " patch={p}")?;
        }
        if let Some(s) = self.seed {
            write!(f, " seed={s}")?;
        }
        Ok(())
    }
}

/// Non-negative training vectors of a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub dim: usize,
    pub patches: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl PatchSet {
    pub fn new(dim: usize, patches: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        for (p, v) in patches.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(format!("patch {p} has length {}, expected {dim}", v.len())));
            }
            if let Some(k) = v.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidValue(format!("patch {p} entry {k} is {}", v[k])));
            }
        }
        Ok(Self { dim, patches, provenance })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            if self.pos >= self.bytes.len() {
                return Err(Error::Truncated {
                    path: self.path.into(),
                    detail: format!("header ends before {what}"),
                });
            }
            return Err(Error::MalformedHeader {
                path: self.path.into(),
                detail: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::MalformedHeader {
                path: self.path.into(),
                detail: format!("{what} out of range"),
            })
    }
}

/// Parses a binary PGM held in memory.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::BadMagic {
            path: path.into(),
            detail: "expected binary PGM (P5)".into(),
        });
    }
    let mut cur = HeaderCursor { bytes, pos: 2, path };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if cur.pos >= bytes.len() {
        return Err(Error::Truncated {
            path: path.into(),
            detail: "no pixel data".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = &bytes[cur.pos + 1..];
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    if data.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("need {need} pixel bytes, found {}", data.len()),
        });
    }
    let scale = f64::from(maxval);
    let pixels = if bpp == 1 {
        data[..need].iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        data[..need]
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    GrayImage::new(width, height, pixels)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    decode_pgm(&read_file(path)?, path)
}

/// 8-bit binary PGM; values are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Images read from an IDX3 file.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub set: PatchSet,
    pub rows: usize,
    pub cols: usize,
}

impl IdxImages {
    /// True for the 28x28 MNIST layout.
    pub fn is_mnist_shape(&self) -> bool {
        self.rows == 28 && self.cols == 28
    }
}

pub fn decode_idx3(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("IDX3 header needs 16 bytes, found {}", bytes.len()),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let magic = word(0);
    if magic != 2051 {
        return Err(Error::BadMagic {
            path: path.into(),
            detail: format!("IDX3 magic must be 2051, found {magic}"),
        });
    }
    let (count, rows, cols) = (word(1), word(2), word(3));
    if rows != 28 || cols != 28 {
        log::warn!("{}: images are {rows}x{cols}, not 28x28", path.display());
    }
    let dim = rows * cols;
    let need = count * dim;
    let data = &bytes[16..];
    if data.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("need {need} pixel bytes, found {}", data.len()),
        });
    }
    let patches = data[..need]
        .chunks_exact(dim.max(1))
        .take(count)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let provenance = Provenance {
        source: path.display().to_string(),
        patch_size: None,
        seed: None,
    };
    Ok(IdxImages {
        set: PatchSet::new(dim, patches, provenance)?,
        rows,
        cols,
    })
}

pub fn load_mnist_idx(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    decode_idx3(&read_file(path)?, path)
}

/// Draws `count` square patches at uniformly random positions.
pub fn sample_patches_with<R: Rng + ?Sized>(
    img: &GrayImage,
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if size == 0 || size > img.width || size > img.height {
        return Err(Error::PatchLargerThanImage {
            patch: size,
            width: img.width,
            height: img.height,
        });
    }
    let xs = img.width - size + 1;
    let ys = img.height - size + 1;
    Ok((0..count)
        .map(|_| {
            let x = rng.random_range(0..xs);
            let y = rng.random_range(0..ys);
            img.patch(x, y, size)
        })
        .collect())
}

/// [`sample_patches_with`] on the patch-sampling stream of `seed`.
pub fn sample_patches(img: &GrayImage, size: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_patches_with(img, size, count, &mut rng::stream(seed, Stream::PatchSampling))
}

/// A patch after centering and normalization, with what is needed to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPatch {
    pub channels: Vec<f64>,
    pub mean: f64,
    pub norm: f64,
}

/// Centers, l2-normalizes and splits one raw patch; `None` if it is constant.
pub fn split_patch(raw: &[f64]) -> Option<SplitPatch> {
    let n = raw.len();
    if n == 0 {
        return None;
    }
    let mean = raw.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return None;
    }
    let mut channels = vec![0.0; 2 * n];
    for (i, v) in centered.iter().enumerate() {
        let v = v / norm;
        if v > 0.0 {
            channels[i] = v;
        } else if v < 0.0 {
            channels[n + i] = -v;
        }
    }
    Some(SplitPatch { channels, mean, norm })
}

/// Inverse of [`split_patch`] applied to a (reconstructed) channel vector.
pub fn merge_patch(channels: &[f64], mean: f64, norm: f64) -> Vec<f64> {
    let n = channels.len() / 2;
    (0..n).map(|i| (channels[i] - channels[n + i]) * norm + mean).collect()
}

/// Splits every raw patch; returns the set and the number of constant patches dropped.
pub fn preprocess_split(raw: &[Vec<f64>], provenance: Provenance) -> Result<(PatchSet, usize)> {
    let dim = raw.first().map_or(0, |p| 2 * p.len());
    let mut patches = Vec::with_capacity(raw.len());
    let mut dropped = 0;
    for p in raw {
        match split_patch(p) {
            Some(s) => patches.push(s.channels),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} constant patches");
    }
    Ok((PatchSet::new(dim, patches, provenance)?, dropped))
}

pub fn encode_pst(set: &PatchSet) -> Vec<u8> {
    let mut out = format!("PST1 {} {}\n", set.len(), set.dim).into_bytes();
    for p in &set.patches {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pst(bytes: &[u8], path: &Path) -> Result<PatchSet> {
    if bytes.len() < 4 || &bytes[..4] != b"PST1" {
        return Err(Error::BadMagic {
            path: path.into(),
            detail: "expected PST1".into(),
        });
    }
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Truncated {
        path: path.into(),
        detail: "header has no newline".into(),
    })?;
    let header = String::from_utf8_lossy(&bytes[..nl]);
    let fields: Vec<&str> = header.split(' ').collect();
    let parsed = match fields.as_slice() {
        [_, c, d] => c.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
        _ => None,
    };
    let (count, dim) = parsed.ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        detail: format!("{header:?}"),
    })?;
    let need = count * dim * 8;
    let payload = &bytes[nl + 1..];
    if payload.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("need {need} payload bytes, found {}", payload.len()),
        });
    }
    let values: Vec<f64> = payload[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let patches = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        values.chunks_exact(dim).map(<[f64]>::to_vec).collect()
    };
    let provenance = Provenance {
        source: path.display().to_string(),
        ..Provenance::default()
    };
    PatchSet::new(dim, patches, provenance)
}

pub fn write_pst(path: impl AsRef<Path>, set: &PatchSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pst(set)).map_err(|e| Error::io(path, e))
}

pub fn read_pst(path: impl AsRef<Path>) -> Result<PatchSet> {
    let path = path.as_ref();
    decode_pst(&read_file(path)?, path)
}

/// File formats recognized by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Pgm,
    Idx3,
    Pst,
}

pub fn detect_format(bytes: &[u8]) -> Option<DatasetFormat> {
    if bytes.starts_with(b"P5") {
        Some(DatasetFormat::Pgm)
    } else if bytes.starts_with(b"PST1") {
        Some(DatasetFormat::Pst)
    } else if bytes.starts_with(&[0, 0, 8, 3]) {
        Some(DatasetFormat::Idx3)
    } else {
        None
    }
}

/// Something a training run can draw samples from.
#[derive(Debug, Clone)]
pub enum Dataset {
    Image(GrayImage, PathBuf),
    Patches(PatchSet),
}

/// Loads a dataset file, picking the reader from its leading bytes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    match detect_format(&bytes) {
        Some(DatasetFormat::Pgm) => Ok(Dataset::Image(decode_pgm(&bytes, path)?, path.into())),
        Some(DatasetFormat::Pst) => Ok(Dataset::Patches(decode_pst(&bytes, path)?)),
        Some(DatasetFormat::Idx3) => Ok(Dataset::Patches(decode_idx3(&bytes, path)?.set)),
        None => Err(Error::BadMagic {
            path: path.into(),
            detail: "not a PGM, IDX3 or PST1 file".into(),
        }),
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> Result<GrayImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidValue(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let mut r = rng::stream(seed, Stream::Noise);
    let pixels = img
        .pixels
        .iter()
        .map(|v| (v + normal.sample(&mut r)).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(img.width, img.height, pixels)
}

/// Bisects for the noise level whose noisy image has PSNR `target` dB.
///
/// Returns `(sigma, achieved_psnr)`.
pub fn calibrate_sigma(clean: &GrayImage, target: f64, seed: u64, tol: f64) -> Result<(f64, f64)> {
    let eval = |s: f64| -> Result<f64> { psnr(clean, &add_gaussian_noise(clean, s, seed)?) };
    let mut lo = 0.0;
    let mut hi = 1.0;
    if eval(hi)? > target {
        return Err(Error::InvalidValue(format!("PSNR {target} dB is below what sigma = 1 reaches")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p = eval(mid)?;
        if (p - target).abs() <= tol {
            return Ok((mid, p));
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    Ok((mid, eval(mid)?))
}

/// A procedurally generated piecewise-smooth test scene.
///
/// Overlapping discs, rotated bars and soft ramps on a shaded background,
/// lightly blurred, with values in roughly `[0.05, 0.95]`.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut r = rng::stream(seed, Stream::Instance);
    let (w, h) = (width as f64, height as f64);
    let gx: f64 = r.random_range(-0.3..0.3);
    let gy: f64 = r.random_range(-0.3..0.3);
    let mut px: Vec<f64> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 / w, (i / width) as f64 / h);
            0.5 + gx * (x - 0.5) + gy * (y - 0.5)
        })
        .collect();

    let shapes = 12 + (width * height) / 2048;
    for _ in 0..shapes {
        let level: f64 = r.random_range(0.05..0.95);
        let cx = r.random_range(0.0..w);
        let cy = r.random_range(0.0..h);
        let kind = r.random_range(0..3u8);
        let size = r.random_range(0.04..0.25) * w.min(h);
        let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
        let (sa, ca) = angle.sin_cos();
        let aspect = r.random_range(0.15..0.6);
        for yi in 0..height {
            for xi in 0..width {
                let dx = xi as f64 - cx;
                let dy = yi as f64 - cy;
                let along = dx * ca + dy * sa;
                let across = -dx * sa + dy * ca;
                let inside = match kind {
                    0 => dx * dx + dy * dy <= size * size,
                    1 => along.abs() <= size && across.abs() <= size * aspect,
                    _ => along >= 0.0 && along <= 2.0 * size && across.abs() <= size,
                };
                if inside {
                    let p = &mut px[yi * width + xi];
                    *p = if kind == 2 {
                        // Soft ramp towards the target level.
                        let t = (along / (2.0 * size)).clamp(0.0, 1.0);
                        *p * (1.0 - t) + level * t
                    } else {
                        level
                    };
                }
            }
        }
    }

    let mut out = vec![0.0; width * height];
    for yi in 0..height {
        for xi in 0..width {
            let mut acc = 0.0;
            let mut n = 0.0;
            for oy in yi.saturating_sub(1)..(yi + 2).min(height) {
                for ox in xi.saturating_sub(1)..(xi + 2).min(width) {
                    acc += px[oy * width + ox];
                    n += 1.0;
                }
            }
            out[yi * width + xi] = (acc / n).clamp(0.0, 1.0);
        }
    }
    GrayImage {
        width,
        height,
        pixels: out,
    }
}
