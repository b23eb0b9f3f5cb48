//! K-stage proximal-gradient unfolding: learned-degradation gradient step,
//! DST proximal denoiser, and cross-stage feature modulation.
//!
//! Each stage computes υᵏ = ĝ^{k−1} − βᵏ Âᵀ(Â ĝ^{k−1} − y), where Â applies
//! the shifted mask plus a learned per-band residual, then denoises υᵏ in the
//! dispersed domain with the stage's DST. Feature maps from the previous
//! stage modulate the current one at all three U-net scales.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dst::{Builder, ConvP, DSTConfig, DstFeats, DstP};
use crate::error::{CoreError, Result};
use crate::physics::{disperse, Measurement, SensingOperator, SpectralCube};
use crate::rng::CounterRng;
use crate::tensor::{Ctx, ParamId, ParamSet, Tensor};

/// One degradation-learning conv block: Conv3x3 -> GELU -> Conv3x3, with a
/// residual connection when input and output widths match.
#[derive(Debug, Clone)]
pub struct DlcbP {
    c1: ConvP,
    c2: ConvP,
    residual: bool,
}

impl DlcbP {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> DlcbP {
        DlcbP {
            c1: ConvP::new(b, &format!("{name}.c1"), cin, cout, 3, 1),
            c2: ConvP::new(b, &format!("{name}.c2"), cout, cout, 3, 1),
            residual: cin == cout,
        }
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.c2.apply(ctx, &self.c1.apply(ctx, x)?.gelu())?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// Per-scale stage-interaction parameters: two conv pairs off the previous
/// stage's encoder/decoder features produce a multiplicative and an additive
/// modulation map.
#[derive(Debug, Clone)]
pub struct SpanScaleP {
    e1: ConvP,
    d1: ConvP,
    dw1: ConvP,
    e2: ConvP,
    d2: ConvP,
    dw2: ConvP,
}

impl SpanScaleP {
    fn new(b: &mut Builder, name: &str, c: usize) -> SpanScaleP {
        SpanScaleP {
            e1: ConvP::new(b, &format!("{name}.e1"), c, c, 1, 1),
            d1: ConvP::new(b, &format!("{name}.d1"), c, c, 1, 1),
            dw1: ConvP::depthwise(b, &format!("{name}.dw1"), c, 3),
            e2: ConvP::new(b, &format!("{name}.e2"), c, c, 1, 1),
            d2: ConvP::new(b, &format!("{name}.d2"), c, c, 1, 1),
            dw2: ConvP::depthwise(b, &format!("{name}.dw2"), c, 3),
        }
    }

    /// `scale ⊙ feat + shift` with scale = Sigmoid(DWConv(GELU(Conv(enc) +
    /// Conv(dec)))) and shift = DWConv(GELU(Conv(enc) + Conv(dec))).
    pub fn apply(
        &self,
        ctx: &Ctx,
        feat: &Tensor,
        enc_prev: &Tensor,
        dec_prev: &Tensor,
    ) -> Result<Tensor> {
        let s1 = self.e1.apply(ctx, enc_prev)?.add(&self.d1.apply(ctx, dec_prev)?)?;
        let pam1 = self.dw1.apply(ctx, &s1.gelu())?.sigmoid();
        let s2 = self.e2.apply(ctx, enc_prev)?.add(&self.d2.apply(ctx, dec_prev)?)?;
        let pam2 = self.dw2.apply(ctx, &s2.gelu())?;
        pam1.mul(feat)?.add(&pam2)
    }
}

/// All learnables of one unfolding stage.
#[derive(Debug, Clone)]
pub struct StageP {
    pub beta: ParamId,
    pub dlcb1: DlcbP,
    pub dlcb2: DlcbP,
    pub span: Vec<SpanScaleP>,
    pub dst: DstP,
}

/// Weight initialization for a fresh model.
#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    /// All conv weights zero: ΔΦ = 0 and the denoiser is the identity, so
    /// the model computes plain proximal gradient descent with β = 1.
    Zeros,
    /// Every weight random (fan-in scaled) — used by gradient-flow checks.
    FullyRandom(u64),
    /// Random body with the degradation, modulation, and head output layers
    /// zeroed, so training starts from the plain-PGD fixed point.
    Training(u64),
}

/// K unfolding stages sharing one configuration (weights are per stage).
pub struct UnfoldingModel {
    pub params: ParamSet,
    pub stages: Vec<StageP>,
    pub config: DSTConfig,
}

impl UnfoldingModel {
    pub fn new(k: usize, config: &DSTConfig, scheme: InitScheme) -> Result<UnfoldingModel> {
        if k == 0 {
            return Err(CoreError::InvalidArgument("at least one stage required".into()));
        }
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = match scheme {
            InitScheme::Zeros => Builder::zeros(&mut params),
            InitScheme::FullyRandom(seed) | InitScheme::Training(seed) => {
                Builder::random(&mut params, CounterRng::new(seed, 0x494E4954))
            }
        };
        let bands = config.bands;
        let mut stages = Vec::with_capacity(k);
        for s in 0..k {
            let name = format!("stage{s}");
            let beta = b.constant(&format!("{name}.beta"), &[1], 1.0);
            let dlcb1 = DlcbP::new(&mut b, &format!("{name}.dlcb1"), 2 * bands, bands);
            let dlcb2 = DlcbP::new(&mut b, &format!("{name}.dlcb2"), bands, bands);
            // the first stage has no predecessor to take features from
            let span = if s == 0 {
                Vec::new()
            } else {
                (0..3)
                    .map(|g| SpanScaleP::new(&mut b, &format!("{name}.span{g}"), config.level_channels(g)))
                    .collect()
            };
            let dst = DstP::new(&mut b, &format!("{name}.dst"), config)?;
            stages.push(StageP { beta, dlcb1, dlcb2, span, dst });
        }
        let mut model = UnfoldingModel { params, stages, config: config.clone() };
        if let InitScheme::Training(_) = scheme {
            model.zero_output_layers();
        }
        Ok(model)
    }

    /// Zero the last layer of each stage's degradation blocks, modulation
    /// convs, and denoiser head, leaving the rest of the weights random.
    fn zero_output_layers(&mut self) {
        let k = self.stages.len();
        let mut names = Vec::new();
        for s in 0..k {
            // dlcb2 is residual, so dlcb1's output layer must go to zero too
            for blk in ["dlcb1", "dlcb2"] {
                names.push(format!("stage{s}.{blk}.c2.weight"));
                names.push(format!("stage{s}.{blk}.c2.bias"));
            }
            if s > 0 {
                for g in 0..3 {
                    for conv in ["dw1", "dw2"] {
                        names.push(format!("stage{s}.span{g}.{conv}.weight"));
                        names.push(format!("stage{s}.span{g}.{conv}.bias"));
                    }
                }
            }
            names.push(format!("stage{s}.dst.head.weight"));
            names.push(format!("stage{s}.dst.head.bias"));
        }
        for name in names {
            let id = self.params.id_of(&name).expect("known parameter name");
            for v in self.params.get_mut(id).value.iter_mut() {
                *v = 0.0;
            }
        }
    }

    /// Learned residual ΔΦ over the shifted mask, from the channel stack of
    /// the replicated measurement and the per-band shifted mask.
    pub fn learn_degradation(
        &self,
        ctx: &Ctx,
        stage: &StageP,
        y_t: &Tensor,
        phi: &Tensor,
    ) -> Result<Tensor> {
        let bands = self.config.bands;
        let ones = Tensor::constant(vec![1.0; bands], &[1, bands, 1, 1]);
        let y_rep = y_t.mul(&ones)?;
        let stacked = Tensor::concat(1, &[&y_rep, phi])?;
        stage.dlcb2.apply(ctx, &stage.dlcb1.apply(ctx, &stacked)?)
    }

    /// One gradient step υᵏ = ĝ^{k−1} − βᵏ Âᵀ(Â ĝ^{k−1} − y) with the
    /// effective shifted mask Φ + ΔΦ.
    pub fn gd_step(
        &self,
        ctx: &Ctx,
        stage: &StageP,
        g_prev: &Tensor,
        y_t: &Tensor,
        phi_eff: &Tensor,
        step: usize,
    ) -> Result<Tensor> {
        let d = step;
        let y_hat = g_prev.disperse(d)?.mul(phi_eff)?.sum_axis(1)?;
        let resid = y_hat.sub(y_t)?;
        let back = resid.mul(phi_eff)?.undisperse(d)?;
        g_prev.sub(&back.scale_by(&ctx.p(stage.beta))?)
    }

    /// Full reconstruction pass on one measurement; returns ĝ^K as an
    /// `[1,B,H,W]` tensor on the context's tape.
    pub fn forward(&self, ctx: &Ctx, y: &Measurement, op: &SensingOperator) -> Result<Tensor> {
        let bands = self.config.bands;
        let d = op.dispersion.step;
        let shift_span = d * (bands - 1);
        if y.width <= shift_span {
            return Err(CoreError::ShapeMismatch(format!(
                "measurement width {} too small for {bands} bands at dispersion step {d}",
                y.width
            )));
        }
        let (h, wp) = (y.height, y.width);
        let w = wp - shift_span;

        let y_t = Tensor::constant(y.data().to_vec(), &[1, 1, h, wp]);
        let phi = shifted_mask_tensor(op, bands)?;
        let g0 = op.initial_estimate(y, bands)?;
        let mut g = Tensor::constant(g0.data().to_vec(), &[1, bands, h, w]);

        let mut prev_feats: Option<DstFeats> = None;
        for stage in &self.stages {
            let delta = self.learn_degradation(ctx, stage, &y_t, &phi)?;
            let phi_eff = phi.add(&delta)?;
            let v = self.gd_step(ctx, stage, &g, &y_t, &phi_eff, d)?;
            let v_shifted = v.disperse(d)?;
            let feats_in = prev_feats.take();
            let (denoised, feats) = stage.dst.forward(ctx, &v_shifted, |ctx, scale, feat| {
                match &feats_in {
                    Some(prev) => stage.span[scale].apply(ctx, &feat, &prev.enc[scale], &prev.dec[scale]),
                    None => Ok(feat),
                }
            })?;
            g = denoised.undisperse(d)?;
            prev_feats = Some(feats);
        }
        Ok(g)
    }

    /// Inference convenience: run [`UnfoldingModel::forward`] on a fresh tape
    /// and return the reconstruction as a cube.
    pub fn reconstruct(&self, y: &Measurement, op: &SensingOperator) -> Result<SpectralCube> {
        let ctx = Ctx::new(&self.params);
        let g = self.forward(&ctx, y, op)?;
        let (bands, h, w) = (g.shape()[1], g.shape()[2], g.shape()[3]);
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("reconstruction produced non-finite values".into()));
        }
        SpectralCube::new(h, w, bands, SpectralCube::default_wavelengths(bands), g.data().to_vec())
    }
}

impl SpanScaleP {
    /// Standalone construction for the gradient-check suite.
    pub(crate) fn new_for_check(b: &mut Builder, name: &str, c: usize) -> SpanScaleP {
        SpanScaleP::new(b, name, c)
    }
}

/// Standalone degradation-block pair for the gradient-check suite.
pub(crate) fn dlcb_pair_for_check(b: &mut Builder, name: &str, bands: usize) -> (DlcbP, DlcbP) {
    (
        DlcbP::new(b, &format!("{name}1"), 2 * bands, bands),
        DlcbP::new(b, &format!("{name}2"), bands, bands),
    )
}

/// The per-band shifted mask as an `[1,B,H,Ŵ]` constant tensor.
pub fn shifted_mask_tensor(op: &SensingOperator, bands: usize) -> Result<Tensor> {
    let (h, w) = (op.mask.height, op.mask.width);
    let mut tiled = SpectralCube::zeros(h, w, bands);
    for b in 0..bands {
        for i in 0..h {
            for j in 0..w {
                tiled.set(i, j, b, op.mask.at(i, j));
            }
        }
    }
    let shifted = disperse(&tiled, &op.dispersion);
    let wp = op.dispersion.shifted_width(w, bands);
    Ok(Tensor::constant(shifted.data().to_vec(), &[1, bands, h, wp]))
}
