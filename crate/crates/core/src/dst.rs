//! Dense-spatial Spectral-attention Transformer: the learned denoiser used
//! as the proximal mapping of each unfolding stage.
//!
//! A three-level U-net of DSB blocks. Each block runs a dense spatial branch
//! (lightweight inception + dense concat-conv steps) in parallel with a
//! spectral channel-attention branch, couples them in both directions, and
//! finishes with a gated-depthwise feed-forward network. Block-interaction
//! modules re-mix the three scales to limit resampling losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::CounterRng;
use crate::tensor::{Ctx, ParamId, ParamSet, Tensor};

/// Shape of one DST instance.
#[derive(Debug, Clone)]
pub struct DSTConfig {
    /// Spectral band count B (input/output channels).
    pub bands: usize,
    /// Feature width C at the finest level; levels use C, 2C, 4C.
    pub base_channels: usize,
    pub blocks_per_level: [usize; 3],
    pub heads_per_level: [usize; 3],
    pub gdfn_expansion: f64,
    /// Add the input back onto the head output.
    pub global_residual: bool,
}

impl DSTConfig {
    /// Desk-scale defaults: C = 8, one block per level, single-head attention.
    pub fn toy(bands: usize) -> DSTConfig {
        DSTConfig {
            bands,
            base_channels: 8,
            blocks_per_level: [1, 1, 1],
            heads_per_level: [1, 1, 1],
            gdfn_expansion: 2.66,
            global_residual: true,
        }
    }

    /// Full-scale defaults (C = 28, heads 1/2/4) for reference runs.
    pub fn full_scale(bands: usize) -> DSTConfig {
        DSTConfig {
            bands,
            base_channels: 28,
            blocks_per_level: [1, 1, 1],
            heads_per_level: [1, 2, 4],
            gdfn_expansion: 2.66,
            global_residual: true,
        }
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if self.bands == 0 {
            return Err(CoreError::InvalidArgument("bands must be positive".into()));
        }
        if c % 4 != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "base_channels {c} must be divisible by 4 (inception branches, dense growth)"
            )));
        }
        for l in 0..3 {
            let lc = self.level_channels(l);
            let h = self.heads_per_level[l];
            if h == 0 || lc % h != 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "level {l}: {lc} channels not divisible by {h} heads"
                )));
            }
            if self.blocks_per_level[l] == 0 {
                return Err(CoreError::InvalidArgument(format!("level {l}: zero blocks")));
            }
        }
        if !(self.gdfn_expansion > 0.0) {
            return Err(CoreError::InvalidArgument("gdfn_expansion must be positive".into()));
        }
        Ok(())
    }
}

/// Registers parameters into a [`ParamSet`] under hierarchical names, with
/// either zero or uniform fan-in-scaled random initialization.
pub struct Builder<'a> {
    pub ps: &'a mut ParamSet,
    rng: Option<CounterRng>,
}

impl<'a> Builder<'a> {
    pub fn zeros(ps: &'a mut ParamSet) -> Self {
        Builder { ps, rng: None }
    }

    pub fn random(ps: &'a mut ParamSet, rng: CounterRng) -> Self {
        Builder { ps, rng: Some(rng) }
    }

    pub(crate) fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let n: usize = shape.iter().product();
        let value = match &mut self.rng {
            Some(rng) => {
                let s = libm::sqrt(1.0 / fan_in.max(1) as f64);
                (0..n).map(|_| rng.uniform_in(-s, s)).collect()
            }
            None => vec![0.0; n],
        };
        self.ps.add(name, shape, value)
    }

    pub(crate) fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.ps.add(name, shape, vec![v; n])
    }
}

/// One convolution layer: weight, optional bias, and fixed geometry.
#[derive(Debug, Clone)]
pub struct ConvP {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
}

impl ConvP {
    /// Square-kernel conv with "same" padding at stride 1.
    pub(crate) fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, groups: usize) -> ConvP {
        ConvP::geom(b, name, cin, cout, k, groups, 1, (k - 1) / 2, true)
    }

    pub(crate) fn geom(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> ConvP {
        let cin_g = cin / groups;
        let weight = b.weight(&format!("{name}.weight"), &[cout, cin_g, k, k], cin_g * k * k);
        let bias = bias.then(|| b.constant(&format!("{name}.bias"), &[cout], 0.0));
        ConvP { weight, bias, stride: (stride, stride), padding: (padding, padding), groups }
    }

    pub(crate) fn depthwise(b: &mut Builder, name: &str, c: usize, k: usize) -> ConvP {
        ConvP::new(b, name, c, c, k, c)
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let w = ctx.p(self.weight);
        let bias = self.bias.map(|id| ctx.p(id));
        x.conv2d(&w, bias.as_ref(), self.stride, self.padding, self.groups)
    }
}

/// Channel-axis layer norm for NCHW maps (gamma starts at 1, beta at 0).
#[derive(Debug, Clone)]
pub struct LnP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize) -> LnP {
        LnP {
            gamma: b.constant(&format!("{name}.gamma"), &[c], 1.0),
            beta: b.constant(&format!("{name}.beta"), &[c], 0.0),
        }
    }

    fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(1, &ctx.p(self.gamma), &ctx.p(self.beta), 1e-6)
    }
}

/// Four parallel C/4-channel branches concatenated back to C channels.
#[derive(Debug, Clone)]
pub struct InceptionP {
    b1: ConvP,
    b2a: ConvP,
    b2b: ConvP,
    b3a: ConvP,
    b3b: ConvP,
    b3c: ConvP,
    b4: ConvP,
}

impl InceptionP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize) -> InceptionP {
        let q = c / 4;
        InceptionP {
            b1: ConvP::new(b, &format!("{name}.b1"), c, q, 1, 1),
            b2a: ConvP::new(b, &format!("{name}.b2a"), c, q, 1, 1),
            b2b: ConvP::depthwise(b, &format!("{name}.b2b"), q, 3),
            b3a: ConvP::new(b, &format!("{name}.b3a"), c, q, 1, 1),
            b3b: ConvP::depthwise(b, &format!("{name}.b3b"), q, 3),
            b3c: ConvP::depthwise(b, &format!("{name}.b3c"), q, 3),
            b4: ConvP::new(b, &format!("{name}.b4"), c, q, 1, 1),
        }
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let p1 = self.b1.apply(ctx, x)?;
        let p2 = self.b2b.apply(ctx, &self.b2a.apply(ctx, x)?)?;
        let p3 = self.b3c.apply(ctx, &self.b3b.apply(ctx, &self.b3a.apply(ctx, x)?)?)?;
        let p4 = self.b4.apply(ctx, &x.avg_pool3x3()?)?;
        Tensor::concat(1, &[&p1, &p2, &p3, &p4])
    }
}

/// Three concat-conv steps (growth C/2 each), then Conv1x1 back to C and a
/// depthwise 1x1.
#[derive(Debug, Clone)]
pub struct DenseP {
    steps: Vec<ConvP>,
    proj: ConvP,
    dw: ConvP,
}

impl DenseP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize) -> DenseP {
        let growth = c / 2;
        let steps = (0..3)
            .map(|i| ConvP::new(b, &format!("{name}.step{i}"), c + i * growth, growth, 1, 1))
            .collect();
        DenseP {
            steps,
            proj: ConvP::new(b, &format!("{name}.proj"), c + 3 * growth, c, 1, 1),
            dw: ConvP::depthwise(b, &format!("{name}.dw"), c, 1),
        }
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for step in &self.steps {
            let fresh = step.apply(ctx, &cur)?;
            cur = Tensor::concat(1, &[&cur, &fresh])?;
        }
        self.dw.apply(ctx, &self.proj.apply(ctx, &cur)?)
    }
}

/// Spectral multi-head self-attention over the channel axis, gated by the
/// one-channel spatial map from the dense branch.
#[derive(Debug, Clone)]
pub struct SmsaP {
    ln: LnP,
    q_p: ConvP,
    q_d: ConvP,
    k_p: ConvP,
    k_d: ConvP,
    v_p: ConvP,
    v_d: ConvP,
    out: ConvP,
    heads: usize,
}

impl SmsaP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize, heads: usize) -> SmsaP {
        SmsaP {
            ln: LnP::new(b, &format!("{name}.ln"), c),
            q_p: ConvP::new(b, &format!("{name}.q_proj"), c, c, 1, 1),
            q_d: ConvP::depthwise(b, &format!("{name}.q_dw"), c, 3),
            k_p: ConvP::new(b, &format!("{name}.k_proj"), c, c, 1, 1),
            k_d: ConvP::depthwise(b, &format!("{name}.k_dw"), c, 3),
            v_p: ConvP::new(b, &format!("{name}.v_proj"), c, c, 1, 1),
            v_d: ConvP::depthwise(b, &format!("{name}.v_dw"), c, 3),
            out: ConvP::new(b, &format!("{name}.out"), c, c, 1, 1),
            heads,
        }
    }

    /// Returns the branch output and the per-(sample, head) attention maps
    /// (each `heads x [C_h, C_h]`, rows summing to 1).
    pub fn apply_with_attention(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        x_spa: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let [n, c, h, w] = match *x.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(CoreError::ShapeMismatch(format!(
                    "attention expects NCHW, got {:?}",
                    x.shape()
                )))
            }
        };
        let xin = self.ln.apply(ctx, x)?;
        let q = self.q_d.apply(ctx, &self.q_p.apply(ctx, &xin)?)?.mul(x_spa)?;
        let k = self.k_d.apply(ctx, &self.k_p.apply(ctx, &xin)?)?.mul(x_spa)?;
        let v = self.v_d.apply(ctx, &self.v_p.apply(ctx, &xin)?)?.mul(x_spa)?;

        let ch = c / self.heads;
        let hw = h * w;
        let mut attns = Vec::new();
        let mut samples = Vec::new();
        for ni in 0..n {
            let mut head_outs = Vec::new();
            for hd in 0..self.heads {
                let slice = |t: &Tensor| -> Result<Tensor> {
                    t.narrow(0, ni, 1)?.narrow(1, hd * ch, ch)?.reshape(&[ch, hw])
                };
                // Channels as rows, L2-normalized over spatial positions; the
                // C_h x C_h similarity is row-softmaxed and mixes value rows.
                let qn = slice(&q)?.l2_normalize(1)?;
                let kn = slice(&k)?.l2_normalize(1)?;
                let a = qn.matmul(&kn.permute(&[1, 0])?)?.softmax(1)?;
                head_outs.push(a.matmul(&slice(&v)?)?);
                attns.push(a);
            }
            let refs: Vec<&Tensor> = head_outs.iter().collect();
            samples.push(Tensor::concat(0, &refs)?.reshape(&[1, c, h, w])?);
        }
        let refs: Vec<&Tensor> = samples.iter().collect();
        let merged = Tensor::concat(0, &refs)?;
        Ok((self.out.apply(ctx, &merged)?, attns))
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor, x_spa: &Tensor) -> Result<Tensor> {
        Ok(self.apply_with_attention(ctx, x, x_spa)?.0)
    }
}

/// Squeeze-style channel gate: pooled spectrum -> bottleneck -> sigmoid,
/// applied to the GELU of the dense branch.
#[derive(Debug, Clone)]
pub struct SpectralGateP {
    reduce: ConvP,
    ln: LnP,
    expand: ConvP,
}

impl SpectralGateP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize) -> SpectralGateP {
        // A width-1 bottleneck would make the layer norm degenerate (a
        // single-channel norm is constant), so keep at least two channels.
        let hidden = (c / 4).max(2);
        SpectralGateP {
            reduce: ConvP::new(b, &format!("{name}.reduce"), c, hidden, 1, 1),
            ln: LnP::new(b, &format!("{name}.ln"), hidden),
            expand: ConvP::new(b, &format!("{name}.expand"), hidden, c, 1, 1),
        }
    }

    pub fn apply(&self, ctx: &Ctx, x_sab: &Tensor, x_dsb: &Tensor) -> Result<Tensor> {
        let pooled = x_sab.adaptive_avg_pool_1x1()?;
        let z = self.ln.apply(ctx, &self.reduce.apply(ctx, &pooled)?)?.gelu();
        let x_spe = self.expand.apply(ctx, &z)?.sigmoid();
        x_spe.mul(&x_dsb.gelu())
    }
}

/// Gated feed-forward: expand to two halves, depthwise-mix, gate, project.
#[derive(Debug, Clone)]
pub struct GdfnP {
    ln: LnP,
    expand: ConvP,
    dw: ConvP,
    proj: ConvP,
    hidden: usize,
}

impl GdfnP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize, expansion: f64) -> GdfnP {
        let hidden = libm::floor(expansion * c as f64) as usize;
        GdfnP {
            ln: LnP::new(b, &format!("{name}.ln"), c),
            expand: ConvP::new(b, &format!("{name}.expand"), c, 2 * hidden, 1, 1),
            dw: ConvP::depthwise(b, &format!("{name}.dw"), 2 * hidden, 3),
            proj: ConvP::new(b, &format!("{name}.proj"), hidden, c, 1, 1),
            hidden,
        }
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.apply(ctx, &self.expand.apply(ctx, &self.ln.apply(ctx, x)?)?)?;
        let a = y.narrow(1, 0, self.hidden)?;
        let g = y.narrow(1, self.hidden, self.hidden)?;
        self.proj.apply(ctx, &a.gelu().mul(&g)?)
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }
}

/// One DSB block: dense branch and attention branch with bidirectional
/// coupling, then the gated feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct DsbP {
    pub incep: InceptionP,
    pub dense: DenseP,
    pub smsa: SmsaP,
    pub spa: ConvP,
    pub gate: SpectralGateP,
    pub gdfn: GdfnP,
}

impl DsbP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize, heads: usize, expansion: f64) -> DsbP {
        DsbP {
            incep: InceptionP::new(b, &format!("{name}.incep"), c),
            dense: DenseP::new(b, &format!("{name}.dense"), c),
            smsa: SmsaP::new(b, &format!("{name}.smsa"), c, heads),
            spa: ConvP::new(b, &format!("{name}.spa"), c, 1, 1, 1),
            gate: SpectralGateP::new(b, &format!("{name}.gate"), c),
            gdfn: GdfnP::new(b, &format!("{name}.gdfn"), c, expansion),
        }
    }

    pub fn apply(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let x_dsb = self.dense.apply(ctx, &self.incep.apply(ctx, x)?)?;
        let x_spa = self.spa.apply(ctx, &x_dsb)?;
        let x_sab = self.smsa.apply(ctx, x, &x_spa)?;
        let x_spae = self.gate.apply(ctx, &x_sab, &x_dsb)?;
        let z = x.add(&x_sab)?.add(&x_spae)?;
        z.add(&self.gdfn.apply(ctx, &z)?)
    }
}

/// Re-mixes one scale with the other two (bilinearly resampled and
/// channel-projected), conv-gelu-conv.
#[derive(Debug, Clone)]
pub struct BlockInteractionP {
    proj1: ConvP,
    proj2: ConvP,
    inner: ConvP,
    outer: ConvP,
}

impl BlockInteractionP {
    pub(crate) fn new(b: &mut Builder, name: &str, c: usize, c_aux1: usize, c_aux2: usize) -> BlockInteractionP {
        BlockInteractionP {
            proj1: ConvP::new(b, &format!("{name}.proj1"), c_aux1, c, 1, 1),
            proj2: ConvP::new(b, &format!("{name}.proj2"), c_aux2, c, 1, 1),
            inner: ConvP::new(b, &format!("{name}.inner"), 3 * c, c, 1, 1),
            outer: ConvP::new(b, &format!("{name}.outer"), c, c, 1, 1),
        }
    }

    pub fn apply(&self, ctx: &Ctx, b_i: &Tensor, aux1: &Tensor, aux2: &Tensor) -> Result<Tensor> {
        let (h, w) = (b_i.shape()[2], b_i.shape()[3]);
        let a1 = self.proj1.apply(ctx, &aux1.resize_bilinear(h, w)?)?;
        let a2 = self.proj2.apply(ctx, &aux2.resize_bilinear(h, w)?)?;
        let cat = Tensor::concat(1, &[b_i, &a1, &a2])?;
        self.outer.apply(ctx, &self.inner.apply(ctx, &cat)?.gelu())
    }
}

/// Per-scale encoder/decoder features of one DST pass, indexed by scale
/// (0 = finest). Fed to the next stage's interaction module.
#[derive(Debug, Clone)]
pub struct DstFeats {
    pub enc: Vec<Tensor>,
    pub dec: Vec<Tensor>,
}

/// Full DST parameter tree for one stage.
#[derive(Debug, Clone)]
pub struct DstP {
    pub config: DSTConfig,
    embed: ConvP,
    enc1: Vec<DsbP>,
    down1: ConvP,
    enc2: Vec<DsbP>,
    down2: ConvP,
    bott: Vec<DsbP>,
    bi3: BlockInteractionP,
    bi2: BlockInteractionP,
    bi1: BlockInteractionP,
    up2: ConvP,
    fuse2: ConvP,
    dec2: Vec<DsbP>,
    up1: ConvP,
    fuse1: ConvP,
    dec1: Vec<DsbP>,
    head: ConvP,
}

impl DstP {
    pub fn new(b: &mut Builder, name: &str, config: &DSTConfig) -> Result<DstP> {
        config.validate()?;
        let (bands, e) = (config.bands, config.gdfn_expansion);
        let (c1, c2, c3) = (
            config.level_channels(0),
            config.level_channels(1),
            config.level_channels(2),
        );
        let blocks = |b: &mut Builder, prefix: &str, count: usize, c: usize, heads: usize| {
            (0..count)
                .map(|i| DsbP::new(b, &format!("{prefix}.{i}"), c, heads, e))
                .collect::<Vec<_>>()
        };
        let [n1, n2, n3] = config.blocks_per_level;
        let [h1, h2, h3] = config.heads_per_level;
        Ok(DstP {
            config: config.clone(),
            embed: ConvP::new(b, &format!("{name}.embed"), bands, c1, 1, 1),
            enc1: blocks(b, &format!("{name}.enc1"), n1, c1, h1),
            down1: ConvP::geom(b, &format!("{name}.down1"), c1, c2, 4, 1, 2, 1, true),
            enc2: blocks(b, &format!("{name}.enc2"), n2, c2, h2),
            down2: ConvP::geom(b, &format!("{name}.down2"), c2, c3, 4, 1, 2, 1, true),
            bott: blocks(b, &format!("{name}.bott"), n3, c3, h3),
            bi3: BlockInteractionP::new(b, &format!("{name}.bi3"), c3, c1, c2),
            bi2: BlockInteractionP::new(b, &format!("{name}.bi2"), c2, c1, c3),
            bi1: BlockInteractionP::new(b, &format!("{name}.bi1"), c1, c2, c3),
            up2: ConvP::new(b, &format!("{name}.up2"), c3, c2, 1, 1),
            fuse2: ConvP::new(b, &format!("{name}.fuse2"), 2 * c2, c2, 1, 1),
            dec2: blocks(b, &format!("{name}.dec2"), n2, c2, h2),
            up1: ConvP::new(b, &format!("{name}.up1"), c2, c1, 1, 1),
            fuse1: ConvP::new(b, &format!("{name}.fuse1"), 2 * c1, c1, 1, 1),
            dec1: blocks(b, &format!("{name}.dec1"), n1, c1, h1),
            head: ConvP::new(b, &format!("{name}.head"), c1, bands, 1, 1),
        })
    }

    /// Run the denoiser on an `[N,B,H,W]` map. `modulate(ctx, scale, feat)`
    /// hooks in after each encoder level and the bottleneck (scale 0, 1, 2)
    /// — the stage-interaction seam; pass an identity closure otherwise.
    ///
    /// Spatial extents are zero-padded up to multiples of 4 internally and
    /// cropped back, so the global residual sees the original input.
    pub fn forward<F>(&self, ctx: &Ctx, v: &Tensor, mut modulate: F) -> Result<(Tensor, DstFeats)>
    where
        F: FnMut(&Ctx, usize, Tensor) -> Result<Tensor>,
    {
        let [_, c, h, w] = match *v.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(CoreError::ShapeMismatch(format!(
                    "denoiser expects NCHW input, got {:?}",
                    v.shape()
                )))
            }
        };
        if c != self.config.bands {
            return Err(CoreError::ShapeMismatch(format!(
                "denoiser built for {} bands, input has {c}",
                self.config.bands
            )));
        }
        let pad_h = (4 - h % 4) % 4;
        let pad_w = (4 - w % 4) % 4;
        let x = v.pad_spatial(pad_h, pad_w)?;

        let mut e1 = self.embed.apply(ctx, &x)?;
        for blk in &self.enc1 {
            e1 = blk.apply(ctx, &e1)?;
        }
        e1 = modulate(ctx, 0, e1)?;

        let mut e2 = self.down1.apply(ctx, &e1)?;
        for blk in &self.enc2 {
            e2 = blk.apply(ctx, &e2)?;
        }
        e2 = modulate(ctx, 1, e2)?;

        let mut b3 = self.down2.apply(ctx, &e2)?;
        for blk in &self.bott {
            b3 = blk.apply(ctx, &b3)?;
        }
        b3 = modulate(ctx, 2, b3)?;
        let enc = vec![e1.clone(), e2.clone(), b3.clone()];

        let b3 = self.bi3.apply(ctx, &b3, &e1, &e2)?;

        let (h2, w2) = (e2.shape()[2], e2.shape()[3]);
        let up = self.up2.apply(ctx, &b3.resize_bilinear(h2, w2)?)?;
        let mut d2 = self.fuse2.apply(ctx, &Tensor::concat(1, &[&up, &e2])?)?;
        for blk in &self.dec2 {
            d2 = blk.apply(ctx, &d2)?;
        }
        let d2 = self.bi2.apply(ctx, &d2, &e1, &b3)?;

        let (h1, w1) = (e1.shape()[2], e1.shape()[3]);
        let up = self.up1.apply(ctx, &d2.resize_bilinear(h1, w1)?)?;
        let mut d1 = self.fuse1.apply(ctx, &Tensor::concat(1, &[&up, &e1])?)?;
        for blk in &self.dec1 {
            d1 = blk.apply(ctx, &d1)?;
        }
        let d1 = self.bi1.apply(ctx, &d1, &d2, &b3)?;

        let out = self.head.apply(ctx, &d1)?.crop_spatial(h, w)?;
        let out = if self.config.global_residual { v.add(&out)? } else { out };
        let feats = DstFeats { enc, dec: vec![d1, d2, b3] };
        Ok((out, feats))
    }
}

/// Convenience: a standalone DST with its own parameter set.
pub struct DstModel {
    pub params: ParamSet,
    pub net: DstP,
}

impl DstModel {
    pub fn new(config: &DSTConfig, rng: Option<CounterRng>) -> Result<DstModel> {
        let mut params = ParamSet::new();
        let mut b = match rng {
            Some(rng) => Builder::random(&mut params, rng),
            None => Builder::zeros(&mut params),
        };
        let net = DstP::new(&mut b, "dst", config)?;
        Ok(DstModel { params, net })
    }
}

/// Identity modulation hook for [`DstP::forward`].
pub fn no_modulation(_: &Ctx, _: usize, feat: Tensor) -> Result<Tensor> {
    Ok(feat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rng: &mut CounterRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::constant((0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), shape)
    }

    #[test]
    fn zero_initialized_network_is_the_identity() {
        let cfg = DSTConfig::toy(4);
        let model = DstModel::new(&cfg, None).unwrap();
        let mut rng = CounterRng::new(0, 0);
        // 39 wide: exercises the internal pad/crop path
        let v = random_input(&mut rng, &[1, 4, 8, 39]);
        let ctx = Ctx::new(&model.params);
        let (out, _) = model.net.forward(&ctx, &v, no_modulation).unwrap();
        assert_eq!(out.shape(), v.shape());
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn forward_preserves_shape_for_random_weights() {
        let mut cfg = DSTConfig::toy(3);
        cfg.base_channels = 4;
        let model = DstModel::new(&cfg, Some(CounterRng::new(1, 0))).unwrap();
        let mut rng = CounterRng::new(2, 0);
        for (h, w) in [(8, 8), (8, 10), (12, 9)] {
            let v = random_input(&mut rng, &[1, 3, h, w]);
            let ctx = Ctx::new(&model.params);
            let (out, feats) = model.net.forward(&ctx, &v, no_modulation).unwrap();
            assert_eq!(out.shape(), v.shape());
            assert!(out.data().iter().all(|x| x.is_finite()));
            assert_eq!(feats.enc.len(), 3);
            assert_eq!(feats.dec.len(), 3);
            for s in 0..3 {
                assert_eq!(feats.enc[s].shape()[1], cfg.level_channels(s));
                assert_eq!(feats.dec[s].shape()[1], cfg.level_channels(s));
            }
        }
    }

    #[test]
    fn dense_branch_channel_bookkeeping() {
        let c = 8;
        let mut ps = ParamSet::new();
        let mut b = Builder::random(&mut ps, CounterRng::new(3, 0));
        let incep = InceptionP::new(&mut b, "incep", c);
        let dense = DenseP::new(&mut b, "dense", c);
        let mut rng = CounterRng::new(4, 0);
        let x = random_input(&mut rng, &[1, c, 6, 6]);
        let ctx = Ctx::new(&ps);
        let li = incep.apply(&ctx, &x).unwrap();
        assert_eq!(li.shape(), &[1, c, 6, 6]);
        // growth C/2 per step: C -> 1.5C -> 2C -> 2.5C, projected back to C
        let mut cur = li.clone();
        for (i, step) in dense.steps.iter().enumerate() {
            let fresh = step.apply(&ctx, &cur).unwrap();
            assert_eq!(fresh.shape()[1], c / 2);
            cur = Tensor::concat(1, &[&cur, &fresh]).unwrap();
            assert_eq!(cur.shape()[1], c + (i + 1) * (c / 2));
        }
        let out = dense.apply(&ctx, &li).unwrap();
        assert_eq!(out.shape(), &[1, c, 6, 6]);
    }

    #[test]
    fn zero_weight_branches_give_zero_outputs() {
        let c = 4;
        let mut ps = ParamSet::new();
        let mut b = Builder::zeros(&mut ps);
        let incep = InceptionP::new(&mut b, "incep", c);
        let gdfn = GdfnP::new(&mut b, "gdfn", c, 2.66);
        let mut rng = CounterRng::new(5, 0);
        let x = random_input(&mut rng, &[1, c, 5, 5]);
        let ctx = Ctx::new(&ps);
        assert!(incep.apply(&ctx, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gdfn.apply(&ctx, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(gdfn.hidden_width(), (2.66 * c as f64) as usize);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (c, heads) = (8, 2);
        let mut ps = ParamSet::new();
        let mut b = Builder::random(&mut ps, CounterRng::new(6, 0));
        let smsa = SmsaP::new(&mut b, "smsa", c, heads);
        let mut rng = CounterRng::new(7, 0);
        let x = random_input(&mut rng, &[1, c, 4, 4]);
        let spa = random_input(&mut rng, &[1, 1, 4, 4]);
        let ctx = Ctx::new(&ps);
        let (out, attns) = smsa.apply_with_attention(&ctx, &x, &spa).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert_eq!(attns.len(), heads);
        for a in &attns {
            let ch = c / heads;
            assert_eq!(a.shape(), &[ch, ch]);
            for r in 0..ch {
                let s: f64 = a.data()[r * ch..(r + 1) * ch].iter().sum();
                assert!((s - 1.0).abs() < 1e-10, "row sum {s}");
            }
        }
    }

    #[test]
    fn single_channel_single_head_attention_is_trivial() {
        let mut ps = ParamSet::new();
        let mut b = Builder::random(&mut ps, CounterRng::new(8, 0));
        let smsa = SmsaP::new(&mut b, "smsa", 1, 1);
        let mut rng = CounterRng::new(9, 0);
        let x = random_input(&mut rng, &[1, 1, 3, 3]);
        let spa = random_input(&mut rng, &[1, 1, 3, 3]);
        let ctx = Ctx::new(&ps);
        let (_, attns) = smsa.apply_with_attention(&ctx, &x, &spa).unwrap();
        assert_eq!(attns.len(), 1);
        assert_eq!(attns[0].data(), &[1.0]);
    }

    #[test]
    fn zero_spectral_gate_halves_the_gelu() {
        let c = 4;
        let mut ps = ParamSet::new();
        let mut b = Builder::zeros(&mut ps);
        let gate = SpectralGateP::new(&mut b, "gate", c);
        let mut rng = CounterRng::new(10, 0);
        let sab = random_input(&mut rng, &[1, c, 5, 5]);
        let dsb = random_input(&mut rng, &[1, c, 5, 5]);
        let ctx = Ctx::new(&ps);
        let out = gate.apply(&ctx, &sab, &dsb).unwrap();
        let expect = dsb.gelu().scale(0.5);
        for (a, e) in out.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_gate_values_lie_in_unit_interval() {
        let c = 8;
        let mut ps = ParamSet::new();
        let mut b = Builder::random(&mut ps, CounterRng::new(11, 0));
        let gate = SpectralGateP::new(&mut b, "gate", c);
        let mut rng = CounterRng::new(12, 0);
        let sab = random_input(&mut rng, &[1, c, 4, 4]);
        let ones = Tensor::constant(vec![1.0; c * 16], &[1, c, 4, 4]);
        let ctx = Ctx::new(&ps);
        // with x_dsb == 1, the output is gate * gelu(1), so recover the gate
        let out = gate.apply(&ctx, &sab, &ones).unwrap();
        let g1 = 1.0f64 * 0.8413447460685429;
        for &v in out.data() {
            let gate_v = v / g1;
            assert!(gate_v > 0.0 && gate_v < 1.0, "gate {gate_v}");
        }
    }

    #[test]
    fn block_interaction_preserves_the_target_shape() {
        let mut ps = ParamSet::new();
        let mut b = Builder::random(&mut ps, CounterRng::new(13, 0));
        let bi = BlockInteractionP::new(&mut b, "bi", 4, 8, 16);
        let mut rng = CounterRng::new(14, 0);
        let b_i = random_input(&mut rng, &[1, 4, 8, 8]);
        let a1 = random_input(&mut rng, &[1, 8, 4, 4]);
        let a2 = random_input(&mut rng, &[1, 16, 2, 2]);
        let ctx = Ctx::new(&ps);
        let out = bi.apply(&ctx, &b_i, &a1, &a2).unwrap();
        assert_eq!(out.shape(), b_i.shape());
    }

    #[test]
    fn every_parameter_receives_gradient_somewhere() {
        let mut cfg = DSTConfig::toy(4);
        cfg.base_channels = 4;
        let model = DstModel::new(&cfg, Some(CounterRng::new(15, 0))).unwrap();
        let mut reached = vec![false; model.params.len()];
        for seed in 0..3u64 {
            let mut rng = CounterRng::new(16 + seed, 0);
            let v = random_input(&mut rng, &[1, 4, 8, 8]);
            let ctx = Ctx::new(&model.params);
            let (out, _) = model.net.forward(&ctx, &v, no_modulation).unwrap();
            // mix the outputs so no gradient cancels structurally
            let probe = random_input(&mut rng, out.shape());
            let loss = out.mul(&probe).unwrap().sum_all();
            let grads = ctx.collect_grads(&loss.backward().unwrap());
            for (i, g) in grads.iter().enumerate() {
                if g.iter().any(|&x| x != 0.0) {
                    reached[i] = true;
                }
            }
        }
        let dead: Vec<&str> = reached
            .iter()
            .enumerate()
            .filter(|(_, r)| !**r)
            .map(|(i, _)| model.params.get(crate::tensor::ParamId(i)).name.as_str())
            .collect();
        assert!(dead.is_empty(), "parameters with no gradient: {dead:?}");
    }

    #[test]
    fn attention_is_equivariant_to_spatial_permutation_with_1x1_projections() {
        // Swap the depthwise 3x3s for 1x1s so every op is position-wise; then
        // permuting the HW positions of (x, x_spa) must permute the output.
        let c = 2;
        let mut ps = ParamSet::new();
        let mut b = Builder::random(&mut ps, CounterRng::new(20, 0));
        let mut smsa = SmsaP::new(&mut b, "smsa", c, 1);
        smsa.q_d = ConvP::depthwise(&mut b, "alt.q_d", c, 1);
        smsa.k_d = ConvP::depthwise(&mut b, "alt.k_d", c, 1);
        smsa.v_d = ConvP::depthwise(&mut b, "alt.v_d", c, 1);
        let mut rng = CounterRng::new(21, 0);
        let x = random_input(&mut rng, &[1, c, 2, 2]);
        let spa = random_input(&mut rng, &[1, 1, 2, 2]);

        // cyclic shift of the 4 spatial positions
        let perm = [1usize, 2, 3, 0];
        let shuffle = |t: &Tensor| {
            let ch = t.shape()[1];
            let mut d = vec![0.0; t.len()];
            for cc in 0..ch {
                for (dst, &src) in perm.iter().enumerate() {
                    d[cc * 4 + dst] = t.data()[cc * 4 + src];
                }
            }
            Tensor::constant(d, t.shape())
        };

        let ctx = Ctx::new(&ps);
        let base = smsa.apply(&ctx, &x, &spa).unwrap();
        let ctx2 = Ctx::new(&ps);
        let moved = smsa.apply(&ctx2, &shuffle(&x), &shuffle(&spa)).unwrap();
        let expect = shuffle(&base);
        for (a, e) in moved.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_divisibility() {
        let mut cfg = DSTConfig::toy(4);
        cfg.base_channels = 6; // not divisible by 4
        assert!(cfg.validate().is_err());
        let mut cfg = DSTConfig::toy(4);
        cfg.heads_per_level = [3, 1, 1]; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        assert!(DSTConfig::toy(4).validate().is_ok());
        assert!(DSTConfig::full_scale(28).validate().is_ok());
    }
}
