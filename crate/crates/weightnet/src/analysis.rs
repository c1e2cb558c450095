//! Post-hoc weight-space analysis: per-sample kernel extraction, filter
//! cosine-similarity matrices (with grayscale heatmap emission), and a 2-D
//! PCA projection of per-sample kernels for cluster inspection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::dynconv::GeneratedKernel;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{NDTensor, Scalar, Tape};

/// Pairwise cosine similarities between the output filters of one kernel.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub n: usize,
    /// Row-major n×n, symmetric, unit diagonal.
    pub values: Vec<f64>,
    pub layer: String,
    /// Sample index as text, or "static".
    pub sample: String,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Cosine similarities of a (C_out, C_in, kh, kw) kernel's filters, pair by
/// pair. Zero-norm filters take similarity 0 off-diagonal and 1 on the
/// diagonal by convention.
pub fn cosine_similarity_matrix<T: Scalar>(
    kernel: &NDTensor<T>,
    layer: impl Into<String>,
    sample: impl Into<String>,
) -> Result<SimilarityMatrix> {
    if kernel.shape().len() != 4 || kernel.shape()[0] < 2 {
        return Err(Error::Usage(format!(
            "similarity needs a (C_out>=2, C_in, kh, kw) kernel, got {:?}",
            kernel.shape()
        )));
    }
    let n = kernel.shape()[0];
    let d: usize = kernel.shape()[1..].iter().product();
    let k = kernel.data();
    let filters: Vec<&[T]> = (0..n).map(|i| &k[i * d..(i + 1) * d]).collect();
    let norms: Vec<f64> = filters
        .iter()
        .map(|f| f.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = filters[i]
                    .iter()
                    .zip(filters[j])
                    .map(|(a, b)| a.to_f64() * b.to_f64())
                    .sum();
                dot / (norms[i] * norms[j])
            };
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        n,
        values,
        layer: layer.into(),
        sample: sample.into(),
    })
}

/// Mean of |s_ij| over i ≠ j.
pub fn mean_offdiag(sim: &SimilarityMatrix) -> f64 {
    let n = sim.n;
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += sim.at(i, j).abs();
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// P5 PGM bytes: pixel = round(255·(s+1)/2), so −1 maps to black and +1 to
/// white.
pub fn heatmap_pgm(sim: &SimilarityMatrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", sim.n, sim.n).into_bytes();
    out.extend(sim.values.iter().map(|&s| {
        (255.0 * (s + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8
    }));
    out
}

pub fn heatmap_emit(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_pgm(sim)).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── PCA projection ──────────────────────────────────────────────────

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 1000;

/// Top principal direction of centered rows `x` (n×d) by power iteration on
/// the implicit covariance XᵀX. Returns a unit vector, or zeros when the
/// data has no variance along any direction.
fn top_component(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9d2c_5680);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    for _ in 0..POWER_MAX_ITERS {
        // w = X v (n), then u = Xᵀ w (d): one covariance application
        // without materializing the d×d matrix.
        let mut w = vec![0.0; n];
        for (i, wi) in w.iter_mut().enumerate() {
            let row = &x[i * d..(i + 1) * d];
            *wi = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut u = vec![0.0; d];
        for (i, &wi) in w.iter().enumerate() {
            let row = &x[i * d..(i + 1) * d];
            for (uj, &rj) in u.iter_mut().zip(row) {
                *uj += wi * rj;
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return vec![0.0; d];
        }
        for uj in u.iter_mut() {
            *uj /= norm;
        }
        // Covariance eigenvalues are nonnegative, so iterates never flip
        // sign; plain drift measures convergence.
        let drift = u
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = u;
        if drift < POWER_TOL {
            break;
        }
    }
    fix_sign(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        for a in v.iter_mut() {
            *a /= norm;
        }
    }
}

/// Deterministic sign convention: the first entry whose magnitude is a
/// meaningful fraction of the largest one is made positive. Anchoring on
/// the first significant entry (not the largest) keeps the choice stable
/// when two magnitudes nearly tie.
fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if max == 0.0 {
        return;
    }
    if let Some(anchor) = v.iter().find(|a| a.abs() > 1e-6 * max) {
        if *anchor < 0.0 {
            for a in v.iter_mut() {
                *a = -*a;
            }
        }
    }
}

/// Project flattened kernels onto their top-2 principal directions.
/// Input rows are the per-sample kernels; output is one (x, y) per row.
pub fn project_weights_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if rows.len() < 2 {
        return Err(Error::Usage(format!(
            "2-D projection needs at least 2 kernels, got {}",
            rows.len()
        )));
    }
    let n = rows.len();
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(Error::Usage("kernels must share a nonzero flattened size".into()));
    }
    // Center.
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut x = vec![0.0; n * d];
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            x[i * d + j] = v - mean[j];
        }
    }
    let v1 = top_component(&x, n, d);
    // Deflate: remove the v1 component from every row, then repeat.
    let mut x2 = x.clone();
    for i in 0..n {
        let row = &mut x2[i * d..(i + 1) * d];
        let proj: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
        for (r, &c) in row.iter_mut().zip(&v1) {
            *r -= proj * c;
        }
    }
    let v2 = top_component(&x2, n, d);
    Ok((0..n)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            let px: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
            let py: f64 = row.iter().zip(&v2).map(|(a, b)| a * b).sum();
            (px, py)
        })
        .collect())
}

// ── extraction ──────────────────────────────────────────────────────

/// Generated kernels of one layer for the first `samples` entries of a
/// dataset, one batch forward in inference mode.
pub fn extract_kernels<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    layer: &str,
    samples: usize,
) -> Result<(GeneratedKernel<T>, Vec<usize>)> {
    if samples == 0 || data.is_empty() {
        return Err(Error::Usage("kernel extraction needs at least one sample".into()));
    }
    let (x, labels) = data.head_batch::<T>(samples)?;
    let tape = Tape::new();
    let out = model.forward_capture(&tape, &x, false, Some(layer))?;
    let kernels = out
        .kernels
        .ok_or_else(|| Error::Usage(format!("layer '{layer}' produced no kernels")))?;
    Ok((kernels, labels))
}

/// Frobenius distance between two same-shape tensors.
pub fn frobenius_distance<T: Scalar>(a: &NDTensor<T>, b: &NDTensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}
