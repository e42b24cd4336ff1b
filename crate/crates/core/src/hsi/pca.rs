//! Band standardization and PCA over all pixels of a cube.

use ndarray::{Array1, Array2, Array3};

use super::{HyperspectralCube, PcaModel};
use crate::error::{Error, Result};

/// Per-band mean/standard deviation over all pixels.
#[derive(Debug, Clone)]
pub struct BandStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Standardizes every band to zero mean and unit variance over all pixels.
/// Constant bands keep their centered values (std treated as 1).
pub fn standardize_bands(cube: &HyperspectralCube) -> (HyperspectralCube, BandStats) {
    let (h, w, b) = cube.data.dim();
    let n = (h * w) as f64;
    let mut mean = Array1::<f64>::zeros(b);
    let mut std = Array1::<f64>::zeros(b);
    for bi in 0..b {
        let mut sum = 0.0;
        for r in 0..h {
            for c in 0..w {
                sum += cube.data[[r, c, bi]] as f64;
            }
        }
        mean[bi] = sum / n;
    }
    for bi in 0..b {
        let mut sq = 0.0;
        for r in 0..h {
            for c in 0..w {
                let d = cube.data[[r, c, bi]] as f64 - mean[bi];
                sq += d * d;
            }
        }
        let s = (sq / n).sqrt();
        std[bi] = if s > 0.0 { s } else { 1.0 };
    }
    let mut out = Array3::<f32>::zeros((h, w, b));
    for r in 0..h {
        for c in 0..w {
            for bi in 0..b {
                out[[r, c, bi]] = ((cube.data[[r, c, bi]] as f64 - mean[bi]) / std[bi]) as f32;
            }
        }
    }
    let standardized = HyperspectralCube { data: out, name: cube.name.clone() };
    (standardized, BandStats { mean, std })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues (unsorted) and eigenvectors as columns.
fn jacobi_eigh(sym: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = sym.dim().0;
    let mut a = sym.clone();
    let mut v = Array2::<f64>::eye(n);
    let norm: f64 = sym.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if (2.0 * off).sqrt() < 1e-14 * norm {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[[p, j]];
                    let aqj = a[[q, j]];
                    a[[p, j]] = c * apj - s * aqj;
                    a[[q, j]] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let values = Array1::from_iter((0..n).map(|i| a[[i, i]]));
    (values, v)
}

/// Fits a K-component PCA using every pixel of the cube as a sample.
pub fn fit_pca(cube: &HyperspectralCube, k: usize) -> Result<PcaModel> {
    let (h, w, b) = cube.data.dim();
    if k < 1 || k > b {
        return Err(Error::Validation(format!("pca k must be in 1..={b}, got {k}")));
    }
    let n = h * w;
    let mut mean = Array1::<f64>::zeros(b);
    for r in 0..h {
        for c in 0..w {
            for bi in 0..b {
                mean[bi] += cube.data[[r, c, bi]] as f64;
            }
        }
    }
    mean /= n as f64;

    // Covariance with the n-1 normalization.
    let mut cov = Array2::<f64>::zeros((b, b));
    let mut centered = Array1::<f64>::zeros(b);
    for r in 0..h {
        for c in 0..w {
            for bi in 0..b {
                centered[bi] = cube.data[[r, c, bi]] as f64 - mean[bi];
            }
            for i in 0..b {
                let ci = centered[i];
                for j in i..b {
                    cov[[i, j]] += ci * centered[j];
                }
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..b {
        for j in i..b {
            cov[[i, j]] /= denom;
            cov[[j, i]] = cov[[i, j]];
        }
    }

    let (values, vectors) = jacobi_eigh(&cov);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap());

    let mut components = Array2::<f64>::zeros((k, b));
    let mut explained = Array1::<f64>::zeros(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        explained[row] = values[idx].max(0.0);
        let mut comp: Vec<f64> = (0..b).map(|i| vectors[[i, idx]]).collect();
        // Deterministic sign: the largest-magnitude entry is positive.
        let mut arg = 0;
        for (i, c) in comp.iter().enumerate() {
            if c.abs() > comp[arg].abs() {
                arg = i;
            }
        }
        if comp[arg] < 0.0 {
            comp.iter_mut().for_each(|c| *c = -*c);
        }
        for (i, c) in comp.into_iter().enumerate() {
            components[[row, i]] = c;
        }
    }
    Ok(PcaModel { mean, components, explained_variance: explained })
}

/// Projects a cube onto the model's principal directions: `(H, W, K)`.
pub fn apply_pca(model: &PcaModel, cube: &HyperspectralCube) -> Result<HyperspectralCube> {
    let (h, w, b) = cube.data.dim();
    if b != model.input_bands() {
        return Err(Error::Shape(format!(
            "pca model expects {} bands, cube has {b}",
            model.input_bands()
        )));
    }
    let k = model.output_dims();
    let mut out = Array3::<f32>::zeros((h, w, k));
    let mut centered = Array1::<f64>::zeros(b);
    for r in 0..h {
        for c in 0..w {
            for bi in 0..b {
                centered[bi] = cube.data[[r, c, bi]] as f64 - model.mean[bi];
            }
            for ki in 0..k {
                let mut acc = 0.0;
                for bi in 0..b {
                    acc += model.components[[ki, bi]] * centered[bi];
                }
                out[[r, c, ki]] = acc as f32;
            }
        }
    }
    Ok(HyperspectralCube { data: out, name: cube.name.clone() })
}
