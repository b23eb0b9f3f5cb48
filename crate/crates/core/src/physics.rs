//! The CASSI degradation model: mask modulation, dispersive shift, band
//! integration and shot noise, as matrix-free forward/adjoint operators.
//!
//! A dense realization of the sensing matrix exists only as a test oracle
//! ([`SensingOperator::dense_oracle`]); at realistic sizes the matrix is far
//! too large to materialize.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::CounterRng;

/// 3-D hyperspectral cube, `height x width x bands`, stored band-major
/// (`(b, h, w)` row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Band center wavelengths in nm, strictly increasing.
    pub wavelengths: Vec<f64>,
    data: Vec<f64>,
}

impl SpectralCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        wavelengths: Vec<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if wavelengths.len() != bands {
            return Err(CoreError::ShapeMismatch(format!(
                "{} wavelengths for {bands} bands",
                wavelengths.len()
            )));
        }
        if !wavelengths.windows(2).all(|p| p[0] < p[1]) {
            return Err(CoreError::InvalidArgument(
                "wavelengths must be strictly increasing".into(),
            ));
        }
        if data.len() != height * width * bands {
            return Err(CoreError::ShapeMismatch(format!(
                "cube data length {} != {height}x{width}x{bands}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("cube data".into()));
        }
        Ok(SpectralCube { height, width, bands, wavelengths, data })
    }

    /// Evenly spaced wavelengths over [450, 650] nm (the usual CASSI range).
    pub fn default_wavelengths(bands: usize) -> Vec<f64> {
        if bands == 1 {
            return vec![550.0];
        }
        (0..bands)
            .map(|b| 450.0 + 200.0 * b as f64 / (bands - 1) as f64)
            .collect()
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        SpectralCube {
            height,
            width,
            bands,
            wavelengths: Self::default_wavelengths(bands),
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, b: usize) -> f64 {
        self.data[(b * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, b: usize, v: f64) {
        self.data[(b * self.height + h) * self.width + w] = v;
    }

    pub fn same_extents(&self, other: &SpectralCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands == other.bands
    }
}

/// Physical coded aperture, `height x width`, transmittances in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CodedMask {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl CodedMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        if !data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(CoreError::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(CodedMask { height, width, data })
    }

    /// Random binary mask (the usual lithographed aperture).
    pub fn random_binary(height: usize, width: usize, rng: &mut CounterRng) -> Self {
        let data = (0..height * width)
            .map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        CodedMask { height, width, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }
}

/// Integer-pixel dispersion along the width axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispersionSpec {
    /// Shift in pixels per band step.
    pub step: usize,
}

impl DispersionSpec {
    pub fn shifted_width(&self, width: usize, bands: usize) -> usize {
        width + self.step * (bands - 1)
    }
}

/// 2-D compressed measurement, `height x (width + d*(bands-1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "measurement data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Measurement { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Measurement { height, width, data: vec![0.0; height * width] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }
}

/// Per-band elementwise mask modulation (`G'(:,:,b) = G(:,:,b) .* M`).
pub fn modulate(cube: &SpectralCube, mask: &CodedMask) -> Result<SpectralCube> {
    if cube.height != mask.height || cube.width != mask.width {
        return Err(CoreError::ShapeMismatch(format!(
            "modulate: cube {}x{} vs mask {}x{}",
            cube.height, cube.width, mask.height, mask.width
        )));
    }
    let mut out = cube.clone();
    for b in 0..cube.bands {
        for h in 0..cube.height {
            for w in 0..cube.width {
                out.set(h, w, b, cube.at(h, w, b) * mask.at(h, w));
            }
        }
    }
    Ok(out)
}

/// Dispersive shift: band `b` moves `d*b` pixels along width; output width is
/// `W + d*(B-1)`, zero-filled outside each band's support.
pub fn disperse(cube: &SpectralCube, spec: &DispersionSpec) -> SpectralCube {
    let wp = spec.shifted_width(cube.width, cube.bands);
    let mut out = SpectralCube {
        height: cube.height,
        width: wp,
        bands: cube.bands,
        wavelengths: cube.wavelengths.clone(),
        data: vec![0.0; cube.height * wp * cube.bands],
    };
    for b in 0..cube.bands {
        for h in 0..cube.height {
            for w in 0..cube.width {
                out.set(h, w + spec.step * b, b, cube.at(h, w, b));
            }
        }
    }
    out
}

/// Adjoint of [`disperse`]: crop band `b` at width offset `d*b`.
pub fn disperse_adjoint(shifted: &SpectralCube, spec: &DispersionSpec) -> Result<SpectralCube> {
    let span = spec.step * (shifted.bands - 1);
    if shifted.width <= span {
        return Err(CoreError::ShapeMismatch(format!(
            "disperse_adjoint: width {} too small for {} bands at step {}",
            shifted.width, shifted.bands, spec.step
        )));
    }
    let w = shifted.width - span;
    let mut out = SpectralCube {
        height: shifted.height,
        width: w,
        bands: shifted.bands,
        wavelengths: shifted.wavelengths.clone(),
        data: vec![0.0; shifted.height * w * shifted.bands],
    };
    for b in 0..shifted.bands {
        for h in 0..shifted.height {
            for wi in 0..w {
                out.set(h, wi, b, shifted.at(h, wi + spec.step * b, b));
            }
        }
    }
    Ok(out)
}

/// Sum over bands per pixel.
pub fn integrate(shifted: &SpectralCube) -> Measurement {
    let mut out = Measurement::zeros(shifted.height, shifted.width);
    for b in 0..shifted.bands {
        for h in 0..shifted.height {
            for w in 0..shifted.width {
                out.data[h * shifted.width + w] += shifted.at(h, w, b);
            }
        }
    }
    out
}

/// Matrix-free sensing operator `A` (mask + dispersion) and its adjoint.
#[derive(Debug, Clone)]
pub struct SensingOperator {
    pub mask: CodedMask,
    pub dispersion: DispersionSpec,
}

/// Dense matrix used only by test oracles.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
        y
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (xc, &a) in x.iter_mut().zip(row) {
                *xc += a * y[r];
            }
        }
        x
    }
}

impl SensingOperator {
    pub fn new(mask: CodedMask, dispersion: DispersionSpec) -> Self {
        SensingOperator { mask, dispersion }
    }

    pub fn measurement_width(&self, bands: usize) -> usize {
        self.dispersion.shifted_width(self.mask.width, bands)
    }

    fn check_cube(&self, cube: &SpectralCube) -> Result<()> {
        if cube.height != self.mask.height || cube.width != self.mask.width {
            return Err(CoreError::ShapeMismatch(format!(
                "operator mask {}x{} vs cube {}x{}",
                self.mask.height, self.mask.width, cube.height, cube.width
            )));
        }
        Ok(())
    }

    /// `A g`: modulate, disperse, integrate.
    pub fn forward(&self, cube: &SpectralCube) -> Result<Measurement> {
        self.check_cube(cube)?;
        let modulated = modulate(cube, &self.mask)?;
        Ok(integrate(&disperse(&modulated, &self.dispersion)))
    }

    /// `A^T y`: shift-back per band, then mask modulation.
    pub fn adjoint(&self, y: &Measurement, bands: usize) -> Result<SpectralCube> {
        let wp = self.measurement_width(bands);
        if y.height != self.mask.height || y.width != wp {
            return Err(CoreError::ShapeMismatch(format!(
                "adjoint: measurement {}x{} vs expected {}x{wp}",
                y.height, y.width, self.mask.height
            )));
        }
        let (hh, ww, d) = (self.mask.height, self.mask.width, self.dispersion.step);
        let mut out = SpectralCube::zeros(hh, ww, bands);
        for b in 0..bands {
            for h in 0..hh {
                for w in 0..ww {
                    out.set(h, w, b, self.mask.at(h, w) * y.at(h, w + d * b));
                }
            }
        }
        Ok(out)
    }

    /// Explicit `H(W + d(B-1)) x HWB` matrix, column `j = A e_j`.
    /// Guarded to test scale.
    pub fn dense_oracle(&self, bands: usize) -> Result<DenseMatrix> {
        let (hh, ww) = (self.mask.height, self.mask.width);
        let unknowns = hh * ww * bands;
        if unknowns > 10_000 {
            return Err(CoreError::InvalidArgument(format!(
                "dense_oracle limited to 10^4 unknowns, got {unknowns}"
            )));
        }
        let wp = self.measurement_width(bands);
        let rows = hh * wp;
        let mut m = DenseMatrix { rows, cols: unknowns, data: vec![0.0; rows * unknowns] };
        // Column j corresponds to cube index (b, h, w): one nonzero per column.
        let d = self.dispersion.step;
        for b in 0..bands {
            for h in 0..hh {
                for w in 0..ww {
                    let col = (b * hh + h) * ww + w;
                    let row = h * wp + w + d * b;
                    m.data[row * unknowns + col] = self.mask.at(h, w);
                }
            }
        }
        Ok(m)
    }

    /// Flatten a cube in the dense oracle's column order.
    pub fn vectorize(cube: &SpectralCube) -> Vec<f64> {
        cube.data.clone()
    }

    /// Rebuild a cube from the dense oracle's column order.
    pub fn unvectorize(&self, v: &[f64], bands: usize) -> Result<SpectralCube> {
        SpectralCube::new(
            self.mask.height,
            self.mask.width,
            bands,
            SpectralCube::default_wavelengths(bands),
            v.to_vec(),
        )
    }

    /// Preconditioned back-projection used as the reconstruction start:
    /// `A^T y` with each voxel divided by the mask-energy sum over the bands
    /// feeding its measurement pixel, plus a small eps.
    pub fn initial_estimate(&self, y: &Measurement, bands: usize) -> Result<SpectralCube> {
        const EPS: f64 = 1e-6;
        let mut cube = self.adjoint(y, bands)?;
        let (hh, ww, d) = (self.mask.height, self.mask.width, self.dispersion.step);
        for b in 0..bands {
            for h in 0..hh {
                for w in 0..ww {
                    // Measurement pixel hit by (h, w, b) is (h, w + d*b); sum
                    // the squared mask weights of every band feeding it.
                    let col = w + d * b;
                    let mut energy = 0.0;
                    for b2 in 0..bands {
                        let w2 = col as isize - (d * b2) as isize;
                        if w2 >= 0 && (w2 as usize) < ww {
                            let mv = self.mask.at(h, w2 as usize);
                            energy += mv * mv;
                        }
                    }
                    let v = cube.at(h, w, b) / (energy + EPS);
                    cube.set(h, w, b, v);
                }
            }
        }
        Ok(cube)
    }
}

/// Poisson shot noise at the given bit depth: the measurement is scaled so
/// its max maps to `2^bit_depth - 1` photon counts, Poisson-sampled per
/// pixel, and scaled back. Deterministic under the provided stream.
pub fn shot_noise(y: &Measurement, bit_depth: u32, rng: &mut CounterRng) -> Result<Measurement> {
    if let Some(bad) = y.data.iter().find(|v| **v < 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "shot_noise requires a nonnegative measurement, found {bad}"
        )));
    }
    let peak = y.data.iter().cloned().fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Ok(y.clone());
    }
    let full_scale = (2u64.pow(bit_depth) - 1) as f64;
    let gain = full_scale / peak;
    let mut out = y.clone();
    for v in out.data.iter_mut() {
        *v = rng.poisson(*v * gain) as f64 / gain;
    }
    Ok(out)
}
