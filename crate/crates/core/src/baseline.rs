//! Classical reconstruction baseline: proximal gradient descent with an
//! anisotropic total-variation prox, plus a power-method spectral-norm
//! estimate used to pick a safe step size.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::physics::{Measurement, SensingOperator, SpectralCube};
use crate::rng::CounterRng;

/// Power-method estimate of the sensing operator's spectral norm ‖A‖₂.
/// The Rayleigh-quotient sequence is monotone nondecreasing; a zero operator
/// returns 0.
pub fn power_method_norm(op: &SensingOperator, bands: usize, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(CoreError::InvalidArgument("power method needs at least one iteration".into()));
    }
    let (h, w) = (op.mask.height, op.mask.width);
    let mut rng = CounterRng::new(0x504F5745, 0);
    let mut x = SpectralCube::zeros(h, w, bands);
    for v in x.data_mut() {
        *v = rng.uniform_in(-1.0, 1.0);
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = op.forward(&x)?;
        let z = op.adjoint(&y, bands)?; // z = AᵀA x
        let xx: f64 = x.data().iter().map(|v| v * v).sum();
        let xz: f64 = x.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
        if xx == 0.0 {
            return Ok(0.0);
        }
        lambda = xz / xx; // Rayleigh quotient for AᵀA
        let zn: f64 = libm::sqrt(z.data().iter().map(|v| v * v).sum());
        if zn == 0.0 {
            return Ok(0.0);
        }
        for (xv, zv) in x.data_mut().iter_mut().zip(z.data()) {
            *xv = zv / zn;
        }
    }
    Ok(libm::sqrt(lambda.max(0.0)))
}

/// Configuration of the TV-regularized proximal-gradient solver.
#[derive(Debug, Clone)]
pub struct TVSolverConfig {
    pub iterations: usize,
    /// Gradient step β_tv; must satisfy β_tv < 2/‖A‖².
    pub step: f64,
    /// TV weight λ.
    pub lambda: f64,
    /// Slack allowed on the objective's monotone decrease.
    pub tolerance: f64,
    /// Dual-projection iterations per prox evaluation.
    pub inner_iterations: usize,
}

impl Default for TVSolverConfig {
    fn default() -> Self {
        TVSolverConfig {
            iterations: 60,
            step: 0.5,
            lambda: 1e-3,
            tolerance: 1e-8,
            inner_iterations: 20,
        }
    }
}

impl TVSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.inner_iterations == 0
            || !(self.step > 0.0)
            || self.lambda < 0.0
            || !(self.tolerance > 0.0)
        {
            return Err(CoreError::InvalidArgument(
                "TV solver needs positive iterations, step, tolerance and nonnegative lambda".into(),
            ));
        }
        Ok(())
    }
}

/// Anisotropic total variation: sum of |horizontal| + |vertical| first
/// differences over every band.
pub fn total_variation(cube: &SpectralCube) -> f64 {
    let (h, w) = (cube.height, cube.width);
    let mut tv = 0.0;
    for b in 0..cube.bands {
        for i in 0..h {
            for j in 0..w {
                let v = cube.at(i, j, b);
                if j + 1 < w {
                    tv += (cube.at(i, j + 1, b) - v).abs();
                }
                if i + 1 < h {
                    tv += (cube.at(i + 1, j, b) - v).abs();
                }
            }
        }
    }
    tv
}

/// Dual state for one prox evaluation, kept across outer iterations so the
/// inexact inner solve warm-starts near its previous optimum.
struct DualField {
    ph: Vec<f64>,
    pv: Vec<f64>,
}

/// Prox of τ·TV (anisotropic) of each band plane via projected dual ascent:
/// x = v − div p with the dual clamped to [−τ, τ] componentwise.
fn tv_prox(v: &SpectralCube, tau: f64, inner: usize, dual: &mut DualField) -> SpectralCube {
    let (h, w, bands) = (v.height, v.width, v.bands);
    let plane = h * w;
    let mut out = v.clone();
    if tau <= 0.0 {
        dual.ph.iter_mut().for_each(|p| *p = 0.0);
        dual.pv.iter_mut().for_each(|p| *p = 0.0);
        return out;
    }
    let sigma = 0.125; // 1/‖∇‖² for the 2-D forward-difference stencil
    for b in 0..bands {
        let base = b * plane;
        let vb = &v.data()[base..base + plane];
        let ph = &mut dual.ph[base..base + plane];
        let pv = &mut dual.pv[base..base + plane];
        let mut x = vec![0.0; plane];
        for _ in 0..inner {
            // x = v − div p
            for i in 0..h {
                for j in 0..w {
                    let mut div = 0.0;
                    if j + 1 < w {
                        div += ph[i * w + j];
                    }
                    if j > 0 {
                        div -= ph[i * w + j - 1];
                    }
                    if i + 1 < h {
                        div += pv[i * w + j];
                    }
                    if i > 0 {
                        div -= pv[i * w + j - 1];
                    }
                    x[i * w + j] = vb[i * w + j] - div;
                }
            }
            // ascend the dual along ∇x and clamp to [−τ, τ]
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        let g = x[i * w + j + 1] - x[i * w + j];
                        ph[i * w + j] = (ph[i * w + j] - sigma * g).clamp(-tau, tau);
                    }
                    if i + 1 < h {
                        let g = x[(i + 1) * w + j] - x[i * w + j];
                        pv[i * w + j] = (pv[i * w + j] - sigma * g).clamp(-tau, tau);
                    }
                }
            }
        }
        // final primal from the updated dual
        for i in 0..h {
            for j in 0..w {
                let mut div = 0.0;
                if j + 1 < w {
                    div += ph[i * w + j];
                }
                if j > 0 {
                    div -= ph[i * w + j - 1];
                }
                if i + 1 < h {
                    div += pv[i * w + j];
                }
                if i > 0 {
                    div -= pv[i * w + j - 1];
                }
                out.data_mut()[base + i * w + j] = vb[i * w + j] - div;
            }
        }
    }
    out
}

fn objective(op: &SensingOperator, y: &Measurement, g: &SpectralCube, lambda: f64) -> Result<f64> {
    let pred = op.forward(g)?;
    let fid: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * fid + lambda * total_variation(g))
}

/// TV-regularized proximal gradient reconstruction.
///
/// Each outer iteration takes the gradient step g − β Aᵀ(Ag − y) and then an
/// approximate prox of βλ·TV. The objective ½‖Ag−y‖² + λ·TV(g) must be
/// non-increasing within the configured slack; a rise beyond it aborts with
/// the iteration index.
pub fn pgd_tv_reconstruct(
    y: &Measurement,
    op: &SensingOperator,
    bands: usize,
    cfg: &TVSolverConfig,
) -> Result<SpectralCube> {
    cfg.validate()?;
    let mut g = op.initial_estimate(y, bands)?;
    let plane = g.height * g.width;
    let mut dual = DualField {
        ph: vec![0.0; plane * bands],
        pv: vec![0.0; plane * bands],
    };
    let mut prev_obj = objective(op, y, &g, cfg.lambda)?;
    for it in 0..cfg.iterations {
        let pred = op.forward(&g)?;
        let mut resid = pred;
        for (r, m) in resid.data_mut().iter_mut().zip(y.data()) {
            *r -= m;
        }
        let grad = op.adjoint(&resid, bands)?;
        let mut v = g.clone();
        for (gv, dv) in v.data_mut().iter_mut().zip(grad.data()) {
            *gv -= cfg.step * dv;
        }
        g = tv_prox(&v, cfg.step * cfg.lambda, cfg.inner_iterations, &mut dual);
        let obj = objective(op, y, &g, cfg.lambda)?;
        if !obj.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "objective became non-finite at iteration {it}"
            )));
        }
        if obj > prev_obj + cfg.tolerance * prev_obj.abs().max(1.0) {
            return Err(CoreError::Divergence {
                iteration: it,
                message: format!("objective rose from {prev_obj} to {obj}"),
            });
        }
        prev_obj = obj;
    }
    Ok(g)
}

/// A step size safely inside the monotone regime: 0.9/‖A‖².
pub fn safe_tv_step(op: &SensingOperator, bands: usize) -> Result<f64> {
    let norm = power_method_norm(op, bands, 50)?;
    if norm == 0.0 {
        return Err(CoreError::InvalidArgument("zero operator has no useful step size".into()));
    }
    Ok(0.9 / (norm * norm))
}
