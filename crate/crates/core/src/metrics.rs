//! Image-quality metrics (PSNR, SSIM, spectral correlation) and the
//! Charbonnier training loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::physics::SpectralCube;
use crate::tensor::Tensor;

/// Per-scene metric row plus aggregate means.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub scene: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub spectral_corr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.scenes.iter().map(|s| s.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.scenes.iter().map(|s| s.ssim))
    }

    pub fn mean_spectral_corr(&self) -> f64 {
        mean(self.scenes.iter().map(|s| s.spectral_corr))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr_slices(reference: &[f64], test: &[f64], peak: f64) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "psnr: {} vs {} voxels",
            reference.len(),
            test.len()
        )));
    }
    if peak <= 0.0 {
        return Err(CoreError::InvalidArgument("psnr peak must be positive".into()));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / mse))
}

pub fn psnr(reference: &SpectralCube, test: &SpectralCube, peak: f64) -> Result<f64> {
    if !reference.same_extents(test) {
        return Err(CoreError::ShapeMismatch("psnr: cube extents differ".into()));
    }
    psnr_slices(reference.data(), test.data(), peak)
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
            let d2 = (i as f64 - c) * (i as f64 - c) + (j as f64 - c) * (j as f64 - c);
            let v = libm::exp(-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM of one 2-D band: 11x11 Gaussian window, sigma 1.5,
/// k1 = 0.01, k2 = 0.03, valid-window positions only.
pub fn ssim_2d(reference: &[f64], test: &[f64], height: usize, width: usize, peak: f64) -> Result<f64> {
    if reference.len() != height * width || test.len() != height * width {
        return Err(CoreError::ShapeMismatch("ssim: data does not match extents".into()));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(CoreError::InvalidArgument(format!(
            "ssim requires extents >= {SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=height - SSIM_WINDOW {
        for left in 0..=width - SSIM_WINDOW {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wv = win[i * SSIM_WINDOW + j];
                    let x = reference[(top + i) * width + left + j];
                    let y = test[(top + i) * width + left + j];
                    mx += wv * x;
                    my += wv * y;
                    mxx += wv * x * x;
                    myy += wv * y * y;
                    mxy += wv * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let v = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Cube SSIM: unweighted mean of per-band SSIM.
pub fn ssim_cube(reference: &SpectralCube, test: &SpectralCube, peak: f64) -> Result<f64> {
    if !reference.same_extents(test) {
        return Err(CoreError::ShapeMismatch("ssim: cube extents differ".into()));
    }
    let plane = reference.height * reference.width;
    let mut total = 0.0;
    for b in 0..reference.bands {
        total += ssim_2d(
            &reference.data()[b * plane..(b + 1) * plane],
            &test.data()[b * plane..(b + 1) * plane],
            reference.height,
            reference.width,
            peak,
        )?;
    }
    Ok(total / reference.bands as f64)
}

/// Pearson correlation of the region-averaged spectra of two cubes.
/// A zero-variance spectrum yields the NaN sentinel.
pub fn spectral_correlation(
    reference: &SpectralCube,
    test: &SpectralCube,
    region: &[(usize, usize)],
) -> Result<f64> {
    if !reference.same_extents(test) {
        return Err(CoreError::ShapeMismatch("spectral_correlation: cube extents differ".into()));
    }
    if region.is_empty() {
        return Err(CoreError::InvalidArgument("spectral_correlation: empty region".into()));
    }
    let bands = reference.bands;
    let mut sa = vec![0.0; bands];
    let mut sb = vec![0.0; bands];
    for &(h, w) in region {
        if h >= reference.height || w >= reference.width {
            return Err(CoreError::InvalidArgument(format!(
                "region pixel ({h}, {w}) outside {}x{}",
                reference.height, reference.width
            )));
        }
        for b in 0..bands {
            sa[b] += reference.at(h, w, b);
            sb[b] += test.at(h, w, b);
        }
    }
    let n = region.len() as f64;
    for v in sa.iter_mut().chain(sb.iter_mut()) {
        *v /= n;
    }
    Ok(pearson(&sa, &sb))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    cov / libm::sqrt(va * vb)
}

/// Differentiable Charbonnier loss: `mean(sqrt((pred - target)^2 + eps^2))`.
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "charbonnier: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let diff = pred.sub(target)?;
    let sq = diff.mul(&diff)?;
    Ok(sq.add_scalar(eps * eps).sqrt_elem().mean_all())
}

/// Charbonnier value on plain slices.
pub fn charbonnier_value(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&a, &b)| libm::sqrt((a - b) * (a - b) + eps * eps))
        .sum::<f64>()
        / n
}
