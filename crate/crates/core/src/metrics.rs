//! Quality measures for weights, codes and images.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coding;
use crate::data::{merge_patch, split_patch, GrayImage};
use crate::engine::SimParams;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::NetworkWeights;
use crate::oracle::{CoordinateDescent, DEFAULT_TOL};

/// `1 - |H - F B|_F / |H|_F`.
pub fn consistency(h: &Array2<f64>, f: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if f.ncols() != b.nrows() || h.dim() != (f.nrows(), b.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "H {:?}, F {:?}, B {:?}",
            h.dim(),
            f.dim(),
            b.dim()
        )));
    }
    let hn = linalg::frobenius(h);
    if hn == 0.0 {
        return Err(Error::ZeroH);
    }
    let diff = h - &linalg::matmul(f, b);
    Ok(1.0 - linalg::frobenius(&diff) / hn)
}

/// Mean cosine between row `i` of `F` and column `i` of `B`.
///
/// Pairs where either vector is zero contribute 0; their count is returned.
pub fn symmetry_with_degenerate(f: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, usize)> {
    if f.nrows() != b.ncols() || f.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch(format!("F {:?}, B {:?}", f.dim(), b.dim())));
    }
    let n = f.nrows();
    let mut total = 0.0;
    let mut degenerate = 0;
    for i in 0..n {
        let fr = f.row(i);
        let bc = b.column(i);
        let denom = linalg::norm2(fr) * linalg::norm2(bc);
        if denom > 0.0 {
            total += linalg::dot(fr, bc) / denom;
        } else {
            degenerate += 1;
        }
    }
    Ok((total / n as f64, degenerate))
}

pub fn symmetry(f: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    symmetry_with_degenerate(f, b).map(|(v, _)| v)
}

/// Peak signal-to-noise ratio in dB for peak 1; `+inf` for identical images.
pub fn psnr(clean: &GrayImage, test: &GrayImage) -> Result<f64> {
    if clean.width != test.width || clean.height != test.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            clean.width, clean.height, test.width, test.height
        )));
    }
    let mut sq = 0.0;
    for (a, b) in clean.pixels.iter().zip(&test.pixels) {
        sq += (a - b) * (a - b);
    }
    let mse = sq / clean.pixels.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// How patches are coded during denoising.
#[derive(Debug, Clone, Copy)]
pub enum Coder<'a> {
    /// Coordinate descent against `d` with unit scaling.
    Oracle { d: &'a Array2<f64>, lambda1: f64 },
    /// The spiking network at `gamma = 0`; reconstruction uses `B`.
    Network {
        weights: &'a NetworkWeights,
        t_phase: f64,
        params: SimParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub image: GrayImage,
    /// Mean number of active coefficients per patch.
    pub mean_l0: f64,
}

fn positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("non-empty") != last {
        out.push(last);
    }
    out
}

/// Codes every patch of `noisy`, reconstructs it and averages overlaps.
pub fn denoise(coder: &Coder<'_>, noisy: &GrayImage, patch: usize, stride: usize) -> Result<Denoised> {
    if patch == 0 || patch > noisy.width || patch > noisy.height {
        return Err(Error::PatchLargerThanImage {
            patch,
            width: noisy.width,
            height: noisy.height,
        });
    }
    if stride == 0 {
        return Err(Error::InvalidValue("stride must be >= 1".into()));
    }
    let m = 2 * patch * patch;
    let (d, solver) = match coder {
        Coder::Oracle { d, .. } => (*d, Some(CoordinateDescent::new(d))),
        Coder::Network { weights, .. } => (&weights.b, None),
    };
    if d.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "dictionary has {} rows, {patch}x{patch} split patches need {m}",
            d.nrows()
        )));
    }
    let n = d.ncols();
    let ones = vec![1.0; n];
    let xs = positions(noisy.width, patch, stride);
    let ys = positions(noisy.height, patch, stride);
    let corners: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();

    let coded: Vec<(Vec<f64>, usize)> = corners
        .par_iter()
        .map(|&(x, y)| {
            let raw = noisy.patch(x, y, patch);
            let Some(sp) = split_patch(&raw) else {
                return Ok((raw, 0));
            };
            let (a, l0) = match coder {
                Coder::Oracle { lambda1, .. } => {
                    let solver = solver.as_ref().expect("oracle solver");
                    let sweeps = 100 * n.max(1);
                    let a = match solver.solve(&sp.channels, *lambda1, &ones, None, DEFAULT_TOL, sweeps) {
                        Ok(sol) => sol.a,
                        Err(Error::NotConverged { best, .. }) => best,
                        Err(e) => return Err(e),
                    };
                    let l0 = a.iter().filter(|v| **v > 0.0).count();
                    (a, l0)
                }
                Coder::Network { weights, t_phase, params } => {
                    let (a, _) = coding::sparse_code(weights, &sp.channels, 0.0, *t_phase, *params)?;
                    let l0 = coding::support(a.view(), *t_phase).len();
                    (a.to_vec(), l0)
                }
            };
            let recon = linalg::matvec(d, ArrayView1::from(&a[..]));
            Ok((merge_patch(recon.as_slice().expect("contiguous"), sp.mean, sp.norm), l0))
        })
        .collect::<Result<_>>()?;

    let mut sum = vec![0.0; noisy.pixels.len()];
    let mut weight = vec![0.0; noisy.pixels.len()];
    let mut l0_total = 0usize;
    for (&(x, y), (rec, l0)) in corners.iter().zip(&coded) {
        l0_total += l0;
        for r in 0..patch {
            for c in 0..patch {
                let idx = (y + r) * noisy.width + x + c;
                sum[idx] += rec[r * patch + c];
                weight[idx] += 1.0;
            }
        }
    }
    let pixels = sum.iter().zip(&weight).map(|(s, w)| (s / w).clamp(0.0, 1.0)).collect();
    Ok(Denoised {
        image: GrayImage::new(noisy.width, noisy.height, pixels)?,
        mean_l0: l0_total as f64 / corners.len() as f64,
    })
}

/// Tiles the atoms of `d` into one image, each scaled to `[0, 1]`.
///
/// Atoms of length `2 * th * tw` are treated as split channels and shown as
/// positive minus negative.
pub fn export_atlas(d: &Array2<f64>, tile: (usize, usize)) -> Result<GrayImage> {
    let (th, tw) = tile;
    let area = th * tw;
    let m = d.nrows();
    if area == 0 || (m != area && m != 2 * area) {
        return Err(Error::ShapeMismatch(format!(
            "atoms of length {m} do not fit {th}x{tw} tiles"
        )));
    }
    let n = d.ncols();
    let grid_cols = (n as f64).sqrt().ceil() as usize;
    let grid_rows = n.div_ceil(grid_cols);
    let width = grid_cols * tw;
    let height = grid_rows * th;
    let mut img = GrayImage::filled(width, height, 0.0);
    for j in 0..n {
        let col = d.column(j);
        let atom: Vec<f64> = if m == area {
            col.to_vec()
        } else {
            (0..area).map(|i| col[i] - col[area + i]).collect()
        };
        let lo = atom.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = atom.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let (gx, gy) = ((j % grid_cols) * tw, (j / grid_cols) * th);
        for r in 0..th {
            for c in 0..tw {
                let v = if span > 0.0 { (atom[r * tw + c] - lo) / span } else { 0.0 };
                img.pixels[(gy + r) * width + gx + c] = v;
            }
        }
    }
    Ok(img)
}

/// One row of the training log, shared by the network learner and SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub iteration: usize,
    /// Surrogate objective on the test set.
    pub objective: Option<f64>,
    pub consistency: Option<f64>,
    pub symmetry: Option<f64>,
    pub mean_atom_norm: f64,
    /// Largest `|mu|` seen since the previous record.
    pub max_current: Option<f64>,
    pub max_s: Option<f64>,
    /// Frobenius norm of the threshold catch-up term at this iteration.
    pub catch_up_norm: Option<f64>,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 9] = [
        "method",
        "iteration",
        "objective",
        "consistency",
        "symmetry",
        "mean_atom_norm",
        "max_current",
        "max_s",
        "catch_up_norm",
    ];

    pub fn sgd(iteration: usize, objective: Option<f64>, mean_atom_norm: f64) -> Self {
        Self {
            method: "sgd".into(),
            iteration,
            objective,
            consistency: None,
            symmetry: None,
            mean_atom_norm,
            max_current: None,
            max_s: None,
            catch_up_norm: None,
        }
    }

    /// Values in [`Self::COLUMNS`] order; missing values are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.10e}"));
        vec![
            self.method.clone(),
            self.iteration.to_string(),
            opt(self.objective),
            opt(self.consistency),
            opt(self.symmetry),
            format!("{:.10e}", self.mean_atom_norm),
            opt(self.max_current),
            opt(self.max_s),
            opt(self.catch_up_norm),
        ]
    }
}

/// Mean Euclidean norm of the columns of `d`.
pub fn mean_atom_norm(d: &Array2<f64>) -> f64 {
    let n = d.ncols();
    let mut total = 0.0;
    for j in 0..n {
        total += linalg::norm2(d.column(j));
    }
    total / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn consistency_examples() {
        let f = array![[1.0, 2.0], [0.0, 1.0]];
        let b = array![[1.0, 0.0], [0.5, 1.0]];
        let h = linalg::matmul(&f, &b);
        assert_eq!(consistency(&h, &f, &b).unwrap(), 1.0);
        let z = Array2::zeros((2, 2));
        assert_eq!(consistency(&Array2::eye(2), &z, &z).unwrap(), 0.0);
        assert!(matches!(consistency(&z, &z, &z), Err(Error::ZeroH)));
    }

    #[test]
    fn symmetry_examples() {
        let f = array![[1.0, 0.0], [0.3, 0.4]];
        assert!((symmetry(&f, &f.t().to_owned()).unwrap() - 1.0).abs() < 1e-15);
        let b = array![[0.0, 0.4], [1.0, -0.3]];
        assert_eq!(symmetry(&f, &b).unwrap(), 0.0);
        let zero = Array2::zeros((2, 2));
        assert_eq!(symmetry_with_degenerate(&f, &zero).unwrap(), (0.0, 2));
    }

    #[test]
    fn psnr_examples() {
        let a = GrayImage::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = GrayImage::filled(4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &GrayImage::filled(2, 2, 0.5)).is_err());
    }

    #[test]
    fn atlas_of_single_atom() {
        let d = array![[0.0], [2.0], [1.0], [4.0]];
        let img = export_atlas(&d, (2, 2)).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0.0, 0.5, 0.25, 1.0]);
        assert!(export_atlas(&d, (3, 3)).is_err());
    }

    #[test]
    fn atlas_of_identity() {
        let d: Array2<f64> = Array2::eye(64);
        let img = export_atlas(&d, (8, 8)).unwrap();
        assert_eq!((img.width, img.height), (64, 64));
        assert_eq!(img.pixels.iter().filter(|v| **v == 1.0).count(), 64);
        // Atom 9 lights pixel (1,1) of tile (1,1).
        assert_eq!(img.get(8 + 1, 8 + 1), 1.0);
    }

    #[test]
    fn record_csv_leaves_missing_values_empty() {
        let r = MetricsRecord::sgd(5, None, 1.0);
        let f = r.csv_fields();
        assert_eq!(f.len(), MetricsRecord::COLUMNS.len());
        assert_eq!(f[2], "");
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"objective\":null"));
    }
}
