//! Fréchet distance between feature Gaussians (pluggable extractor in place
//! of the Inception network) and an energy-distance metric for toy point sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compute::{Scalar, Tensor};
use crate::error::{err_fmt, Result};

const JACOBI_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-8;

/// Gaussian moment summary of a feature set.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// d×d symmetric PSD covariance, row-major.
    pub sigma: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

/// Sample mean and unbiased covariance of an n×d feature matrix.
pub fn gaussian_stats(features: &Tensor<f64>) -> Result<FeatureStats> {
    let (n, d) = features.dims2()?;
    if n < 2 {
        return Err(err_fmt!(Contract, "need at least 2 samples, got {n}"));
    }
    let x = features.data();
    let mut mu = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut sigma = vec![0.0; d * d];
    for row in x.chunks_exact(d) {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                sigma[i * d + j] += di * (row[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / denom;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(FeatureStats { mu, sigma, n, dim: d })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns of a row-major d×d matrix).
fn jacobi_eigen(s: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = s.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut sum = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    sum += a[i * d + j] * a[i * d + j];
                }
            }
        }
        sum.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) < JACOBI_TOL {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - sn * akq;
                    a[k * d + q] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - sn * aqk;
                    a[q * d + k] = sn * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

/// Symmetric PSD square root: eigendecompose, clamp negative eigenvalues to
/// zero, recompose.
pub fn matrix_sqrt_psd(s: &[f64], d: usize) -> Result<Vec<f64>> {
    if s.len() != d * d {
        return Err(err_fmt!(Contract, "matrix buffer is not {d}x{d}"));
    }
    for i in 0..d {
        for j in i + 1..d {
            if (s[i * d + j] - s[j * d + i]).abs() > SYMMETRY_TOL {
                return Err(err_fmt!(
                    Contract,
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    s[i * d + j],
                    s[j * d + i]
                ));
            }
        }
    }
    let (eig, v) = jacobi_eigen(s, d);
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(roots) V^T
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut sum = 0.0;
            for (k, &r) in roots.iter().enumerate() {
                sum += v[i * d + k] * r * v[j * d + k];
            }
            out[i * d + j] = sum;
            out[j * d + i] = sum;
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

/// Closed-form Gaussian Fréchet distance:
/// ‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a Σ_b)^{1/2}), with the cross term
/// computed as sqrt(Σ_a^{1/2} Σ_b Σ_a^{1/2}) for symmetry. Small negatives
/// from rounding clamp to 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(err_fmt!(Contract, "dimension mismatch {} vs {}", a.dim, b.dim));
    }
    let d = a.dim;
    let mean_term: f64 =
        a.mu.iter().zip(b.mu.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let a_half = matrix_sqrt_psd(&a.sigma, d)?;
    let inner = matmul_sq(&a_half, &matmul_sq(&b.sigma, &a_half, d), d);
    // symmetrize rounding noise before the second square root
    let mut inner_sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            inner_sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let cross = matrix_sqrt_psd(&inner_sym, d)?;
    let fd = mean_term + trace(&a.sigma, d) + trace(&b.sigma, d) - 2.0 * trace(&cross, d);
    Ok(fd.max(0.0))
}

/// Deterministic seeded random orthogonal projection of flattened pixels to
/// `out_dim` features; the same (seed, shape) always yields the same
/// projection so scores are comparable across runs.
pub fn pixel_features(images: &[Tensor<f32>], out_dim: usize, seed: u64) -> Result<Tensor<f64>> {
    let first = images.first().ok_or_else(|| err_fmt!(Contract, "no images"))?;
    let p = first.len();
    if out_dim == 0 || out_dim > p {
        return Err(err_fmt!(Contract, "out_dim {out_dim} must be in [1, {p}]"));
    }
    let q = random_orthogonal_columns(p, out_dim, seed);
    let mut data = Vec::with_capacity(images.len() * out_dim);
    for img in images {
        if img.len() != p {
            return Err(err_fmt!(Contract, "ragged image shapes in feature extraction"));
        }
        for j in 0..out_dim {
            let mut acc = 0.0f64;
            for (i, &v) in img.data().iter().enumerate() {
                acc += v as f64 * q[i * out_dim + j];
            }
            data.push(acc);
        }
    }
    Tensor::new(vec![images.len(), out_dim], data)
}

/// p×k matrix with orthonormal columns from seeded Gaussian + modified
/// Gram-Schmidt.
fn random_orthogonal_columns(p: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> =
        (0..k).map(|_| (0..p).map(|_| f64::standard_normal(&mut rng)).collect()).collect();
    for j in 0..k {
        for i in 0..j {
            let dot: f64 = cols[j].iter().zip(cols[i].iter()).map(|(a, b)| a * b).sum();
            let (head, tail) = cols.split_at_mut(j);
            for (cj, ci) in tail[0].iter_mut().zip(head[i].iter()) {
                *cj -= dot * ci;
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut q = vec![0.0; p * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q[i * k + j] = v;
        }
    }
    q
}

/// Energy distance 2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖ over all pairs (exact double
/// sums, V-statistic convention).
pub fn energy_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (n, da) = a.dims2()?;
    let (m, db) = b.dims2()?;
    if da != db {
        return Err(err_fmt!(Contract, "point dimension mismatch {da} vs {db}"));
    }
    if n < 2 || m < 2 {
        return Err(err_fmt!(Contract, "need at least 2 points per set, got {n} and {m}"));
    }
    let d = da;
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        let mut s = 0.0;
        for (xi, yi) in x.iter().zip(y.iter()) {
            s += (xi - yi) * (xi - yi);
        }
        s.sqrt()
    };
    let ax = a.data();
    let bx = b.data();
    let mut e_ab = 0.0;
    for ra in ax.chunks_exact(d) {
        for rb in bx.chunks_exact(d) {
            e_ab += dist(ra, rb);
        }
    }
    e_ab /= (n * m) as f64;
    let self_term = |x: &[f64], len: usize| -> f64 {
        let mut sum = 0.0;
        for i in 0..len {
            for j in i + 1..len {
                sum += dist(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            }
        }
        2.0 * sum / (len * len) as f64
    };
    Ok(2.0 * e_ab - self_term(ax, n) - self_term(bx, m))
}
