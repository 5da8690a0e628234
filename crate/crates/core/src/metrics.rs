//! Quantitative evaluation: L1 error (8-bit units), PSNR, SSIM and a
//! Fréchet feature distance over a pluggable extractor.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Images are [-1,1]; metrics are reported on the 0..255 scale.
const TO_8BIT: f64 = 127.5;
/// PSNR sentinel for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean absolute difference over a region, in 8-bit units.
pub fn l1_error(a: &Array3<f64>, b: &Array3<f64>, region: Option<&Array2<u8>>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.map(|r| r[[y, x]] != 0).unwrap_or(true) {
                for ch in 0..c {
                    sum += (a[[ch, y, x]] - b[[ch, y, x]]).abs() * TO_8BIT;
                }
                count += c;
            }
        }
    }
    if count == 0 {
        return Err(Error::Precondition("l1_error region is empty".into()));
    }
    Ok(sum / count as f64)
}

/// 10·log10(255² / MSE) on the 8-bit scale; identical images report the
/// documented 100 dB cap.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, region: Option<&Array2<u8>>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.map(|r| r[[y, x]] != 0).unwrap_or(true) {
                for ch in 0..c {
                    let d = (a[[ch, y, x]] - b[[ch, y, x]]) * TO_8BIT;
                    sum += d * d;
                }
                count += c;
            }
        }
    }
    if count == 0 {
        return Err(Error::Precondition("psnr region is empty".into()));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over valid 11x11 Gaussian windows (σ = 1.5, K1 = 0.01,
/// K2 = 0.03, 8-bit dynamic range), averaged across channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = win[i * SSIM_WINDOW + j];
                        mu_a += wt * (a[[ch, y + i, x + j]] + 1.0) * TO_8BIT;
                        mu_b += wt * (b[[ch, y + i, x + j]] + 1.0) * TO_8BIT;
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = win[i * SSIM_WINDOW + j];
                        let da = (a[[ch, y + i, x + j]] + 1.0) * TO_8BIT - mu_a;
                        let db = (b[[ch, y + i, x + j]] + 1.0) * TO_8BIT - mu_b;
                        var_a += wt * da * da;
                        var_b += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fréchet distance between Gaussian fits of two feature sets (`N×D`).
/// Covariances are regularized by `1e-6·I`; the matrix square root uses an
/// eigen-decomposition of the symmetrized product.
pub fn frechet_distance(features_a: &Array2<f64>, features_b: &Array2<f64>) -> Result<f64> {
    if features_a
        .iter()
        .chain(features_b.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("non-finite feature values".into()));
    }
    let d = features_a.ncols();
    if features_b.ncols() != d {
        return Err(Error::shape(
            format!("D={d}"),
            format!("D={}", features_b.ncols()),
            "frechet_distance",
        ));
    }
    if features_a.nrows() < 2 || features_b.nrows() < 2 {
        return Err(Error::Precondition(
            "need at least 2 feature rows per set".into(),
        ));
    }
    let (mu_a, cov_a) = gaussian_stats(features_a);
    let (mu_b, cov_b) = gaussian_stats(features_b);

    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let sqrt_a = sym_sqrt(&cov_a);
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let sqrt_inner = sym_sqrt(&inner);
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * sqrt_inner.trace();
    Ok((mean_term + trace_term).max(0.0))
}

fn gaussian_stats(features: &Array2<f64>) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let (n, d) = features.dim();
    let mut mu = vec![0.0; d];
    for row in features.rows() {
        for (m, v) in mu.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for row in features.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mu, cov)
}

fn sym_sqrt(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    // symmetrize against round-off before the eigen-decomposition
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

// ---- report ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Entire,
    HoleOnly,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub l1_entire: Vec<f64>,
    pub l1_hole: Vec<f64>,
    pub psnr_entire: Vec<f64>,
    pub psnr_hole: Vec<f64>,
    pub ssim_entire: Vec<f64>,
    pub fid: Option<f64>,
}

impl EvalReport {
    pub fn aggregate(values: &[f64]) -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        values.iter().sum::<f64>() / values.len() as f64
    }

    /// Machine-parseable key=value lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples={}\n", self.sample_count));
        let mut emit = |key: &str, vals: &[f64]| {
            out.push_str(&format!("{key}={:.6}\n", Self::aggregate(vals)));
            for (i, v) in vals.iter().enumerate() {
                out.push_str(&format!("{key}[{i}]={v:.6}\n"));
            }
        };
        emit("l1_entire", &self.l1_entire);
        emit("l1_hole", &self.l1_hole);
        emit("psnr_entire", &self.psnr_entire);
        emit("psnr_hole", &self.psnr_hole);
        emit("ssim_entire", &self.ssim_entire);
        if let Some(fid) = self.fid {
            out.push_str(&format!("fid={fid:.6}\n"));
        }
        out
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
            "metric input",
        ));
    }
    Ok(())
}
