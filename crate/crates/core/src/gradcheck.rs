//! Central finite-difference verification of reverse-mode gradients, plus a
//! named standard suite covering every primitive and every composed block of
//! the reconstructor.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dst::{
    BlockInteractionP, Builder, DSTConfig, DsbP, DstModel, GdfnP, InceptionP, SmsaP, no_modulation,
};
use crate::error::Result;
use crate::metrics::charbonnier;
use crate::physics::{CodedMask, DispersionSpec, SensingOperator, SpectralCube};
use crate::rng::CounterRng;
use crate::tensor::{Ctx, ParamId, ParamSet, Tensor};
use crate::unfold::{InitScheme, UnfoldingModel};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One verifiable loss: a parameter set plus a scalar-valued forward pass.
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    params: ParamSet,
    forward: Box<dyn Fn(&Ctx) -> Result<Tensor>>,
}

/// Outcome of running one [`Check`].
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

impl Check {
    pub fn new(
        name: String,
        tolerance: f64,
        params: ParamSet,
        forward: Box<dyn Fn(&Ctx) -> Result<Tensor>>,
    ) -> Check {
        Check { name, tolerance, params, forward }
    }

    /// Compare reverse-mode gradients against central differences on up to
    /// `samples_per_param` coordinates of each parameter tensor. The relative
    /// error uses a 1e-2 magnitude floor so finite-difference roundoff on
    /// near-zero gradients does not dominate.
    pub fn run(&mut self, samples_per_param: usize, step: f64, seed: u64) -> Result<CheckReport> {
        let grads = {
            let ctx = Ctx::new(&self.params);
            let loss = (self.forward)(&ctx)?;
            ctx.collect_grads(&loss.backward()?)
        };
        let mut rng = CounterRng::new(seed, 0xFD5EED);
        let mut max_rel: f64 = 0.0;
        let mut coords = 0usize;
        for i in 0..self.params.len() {
            let n = self.params.get(ParamId(i)).value.len();
            let picks: Vec<usize> = if n <= samples_per_param {
                (0..n).collect()
            } else {
                (0..samples_per_param).map(|_| rng.below(n as u64) as usize).collect()
            };
            for j in picks {
                let orig = self.params.get(ParamId(i)).value[j];
                self.params.get_mut(ParamId(i)).value[j] = orig + step;
                let lp = self.eval()?;
                self.params.get_mut(ParamId(i)).value[j] = orig - step;
                let lm = self.eval()?;
                self.params.get_mut(ParamId(i)).value[j] = orig;
                let fd = (lp - lm) / (2.0 * step);
                let a = grads[i][j];
                let denom = fd.abs().max(a.abs()).max(1e-2);
                max_rel = max_rel.max((fd - a).abs() / denom);
                coords += 1;
            }
        }
        Ok(CheckReport {
            name: self.name.clone(),
            tolerance: self.tolerance,
            max_rel_err: max_rel,
            coords_checked: coords,
        })
    }

    fn eval(&self) -> Result<f64> {
        let ctx = Ctx::new(&self.params);
        Ok((self.forward)(&ctx)?.item())
    }

    /// Deep compositions have large third derivatives, so their central
    /// differences need a smaller step before truncation error drops below
    /// the tolerance; roundoff stays negligible at 64-bit.
    pub fn preferred_step(&self) -> f64 {
        if self.tolerance >= 1e-3 {
            1e-6
        } else {
            FD_STEP
        }
    }
}

fn rand_vec(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
}

/// Random probe contraction: sum(out ⊙ probe), turning any output into a
/// scalar loss without structural cancellation.
fn probed(out: &Tensor, probe: &Tensor) -> Result<Tensor> {
    Ok(out.mul(probe)?.sum_all())
}

fn leaf_check<F>(
    name: String,
    tolerance: f64,
    shapes: &[&[usize]],
    seed: u64,
    f: F,
) -> Check
where
    F: Fn(&Ctx, &[Tensor]) -> Result<Tensor> + 'static,
{
    let mut rng = CounterRng::new(seed, 0x10EAF);
    let mut params = ParamSet::new();
    let mut ids = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        ids.push(params.add(&format!("x{i}"), shape, rand_vec(&mut rng, n)));
    }
    let forward = move |ctx: &Ctx| {
        let leaves: Vec<Tensor> = ids.iter().map(|&id| ctx.p(id)).collect();
        f(ctx, &leaves)
    };
    Check::new(name, tolerance, params, Box::new(forward))
}

/// Per-primitive checks for one seed.
fn primitive_checks(seed: u64) -> Vec<Check> {
    let tol = 1e-4;
    let mut rng = CounterRng::new(seed, 0x505249);
    let mut out = Vec::new();
    let tag = |op: &str| format!("{op}[seed{seed}]");

    let probe = Tensor::constant(rand_vec(&mut rng, 12), &[3, 4]);
    out.push(leaf_check(tag("add-mul-broadcast"), tol, &[&[3, 4], &[1, 4], &[3, 1]], seed, move |_, xs| {
        probed(&xs[0].add(&xs[1])?.mul(&xs[2])?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 10), &[10]);
    out.push(leaf_check(tag("gelu"), tol, &[&[10]], seed, move |_, xs| {
        probed(&xs[0].gelu(), &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 10), &[10]);
    out.push(leaf_check(tag("sigmoid"), tol, &[&[10]], seed, move |_, xs| {
        probed(&xs[0].sigmoid(), &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 10), &[10]);
    out.push(leaf_check(tag("sqrt-shifted"), tol, &[&[10]], seed, move |_, xs| {
        // keep the argument strictly positive: sqrt(x^2 + 1)
        probed(&xs[0].mul(&xs[0])?.add_scalar(1.0).sqrt_elem(), &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 8), &[8]);
    out.push(leaf_check(tag("scale-by"), tol, &[&[8], &[1]], seed, move |_, xs| {
        probed(&xs[0].scale_by(&xs[1])?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 12), &[3, 4]);
    out.push(leaf_check(tag("softmax"), tol, &[&[3, 4]], seed, move |_, xs| {
        probed(&xs[0].softmax(1)?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 12), &[3, 4]);
    out.push(leaf_check(tag("l2-normalize"), tol, &[&[3, 4]], seed, move |_, xs| {
        probed(&xs[0].l2_normalize(1)?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 2 * 5 * 6), &[2, 5, 6]);
    out.push(leaf_check(tag("layer-norm"), tol, &[&[2, 5, 6], &[5], &[5]], seed, move |_, xs| {
        probed(&xs[0].layer_norm(1, &xs[1], &xs[2], 1e-6)?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 3 * 2), &[3, 2]);
    out.push(leaf_check(tag("matmul"), tol, &[&[3, 4], &[4, 2]], seed, move |_, xs| {
        probed(&xs[0].matmul(&xs[1])?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 3 * 4 * 4), &[1, 3, 4, 4]);
    out.push(leaf_check(
        tag("conv2d-grouped-strided"),
        tol,
        &[&[1, 4, 7, 7], &[6, 2, 3, 3], &[6]],
        seed,
        move |_, xs| {
            let y = xs[0].conv2d(&xs[1], Some(&xs[2]), (2, 2), (1, 1), 2)?;
            probed(&y.narrow(1, 0, 3)?, &probe)
        },
    ));

    let probe = Tensor::constant(rand_vec(&mut rng, 2 * 6 * 7), &[1, 2, 6, 7]);
    out.push(leaf_check(tag("resize-bilinear"), tol, &[&[1, 2, 3, 4]], seed, move |_, xs| {
        probed(&xs[0].resize_bilinear(6, 7)?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 3), &[1, 3, 1, 1]);
    out.push(leaf_check(tag("adaptive-avg-pool"), tol, &[&[1, 3, 4, 5]], seed, move |_, xs| {
        probed(&xs[0].adaptive_avg_pool_1x1()?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 5 * 4), &[1, 5, 2, 2]);
    out.push(leaf_check(tag("concat-narrow"), tol, &[&[1, 2, 2, 2], &[1, 4, 2, 2]], seed, move |_, xs| {
        let cat = Tensor::concat(1, &[&xs[0], &xs[1]])?;
        probed(&cat.narrow(1, 1, 5)?, &probe)
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 3 * 2 * 8), &[1, 3, 2, 8]);
    out.push(leaf_check(tag("disperse-undisperse"), tol, &[&[1, 3, 2, 4]], seed, move |_, xs| {
        let s = xs[0].disperse(2)?;
        probed(&s, &probe)?.add(&s.undisperse(2)?.sum_all())
    }));

    let probe = Tensor::constant(rand_vec(&mut rng, 3 * 5), &[3, 1, 5]);
    out.push(leaf_check(tag("sum-axis-permute-reshape"), tol, &[&[3, 4, 5]], seed, move |_, xs| {
        let y = xs[0].permute(&[0, 2, 1])?.reshape(&[3, 5, 4])?.sum_axis(2)?.permute(&[0, 2, 1])?;
        probed(&y, &probe)
    }));

    let target = Tensor::constant(rand_vec(&mut rng, 16), &[16]);
    out.push(leaf_check(tag("charbonnier"), tol, &[&[16]], seed, move |_, xs| {
        charbonnier(&xs[0], &target, 1e-3)
    }));

    out
}

fn composed_checks(seed: u64) -> Vec<Check> {
    let tol = 1e-4;
    let mut out = Vec::new();
    let tag = |op: &str| format!("{op}[seed{seed}]");
    let mut rng = CounterRng::new(seed, 0xB10C5);

    // lightweight inception, C = 4
    {
        let mut params = ParamSet::new();
        let mut b = Builder::random(&mut params, CounterRng::new(seed, 1));
        let block = InceptionP::new(&mut b, "incep", 4);
        let x = Tensor::constant(rand_vec(&mut rng, 4 * 36), &[1, 4, 6, 6]);
        let probe = Tensor::constant(rand_vec(&mut rng, 4 * 36), &[1, 4, 6, 6]);
        out.push(Check::new(
            tag("inception"),
            tol,
            params,
            Box::new(move |ctx| probed(&block.apply(ctx, &x)?, &probe)),
        ));
    }

    // spectral attention with spatial gating, C = 4, 2 heads
    {
        let mut params = ParamSet::new();
        let mut b = Builder::random(&mut params, CounterRng::new(seed, 2));
        let block = SmsaP::new(&mut b, "smsa", 4, 2);
        let x = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        let spa = Tensor::constant(rand_vec(&mut rng, 16), &[1, 1, 4, 4]);
        let probe = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        out.push(Check::new(
            tag("spectral-attention"),
            tol,
            params,
            Box::new(move |ctx| probed(&block.apply(ctx, &x, &spa)?, &probe)),
        ));
    }

    // gated feed-forward, C = 4
    {
        let mut params = ParamSet::new();
        let mut b = Builder::random(&mut params, CounterRng::new(seed, 3));
        let block = GdfnP::new(&mut b, "gdfn", 4, 2.66);
        let x = Tensor::constant(rand_vec(&mut rng, 4 * 25), &[1, 4, 5, 5]);
        let probe = Tensor::constant(rand_vec(&mut rng, 4 * 25), &[1, 4, 5, 5]);
        out.push(Check::new(
            tag("gdfn"),
            tol,
            params,
            Box::new(move |ctx| probed(&block.apply(ctx, &x)?, &probe)),
        ));
    }

    // full DSB block, C = 4, 1×4×4×4
    {
        let mut params = ParamSet::new();
        let mut b = Builder::random(&mut params, CounterRng::new(seed, 4));
        let block = DsbP::new(&mut b, "dsb", 4, 1, 2.66);
        let x = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        let probe = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        out.push(Check::new(
            tag("dsb-block"),
            tol,
            params,
            Box::new(move |ctx| probed(&block.apply(ctx, &x)?, &probe)),
        ));
    }

    // block interaction across three scales
    {
        let mut params = ParamSet::new();
        let mut b = Builder::random(&mut params, CounterRng::new(seed, 5));
        let block = BlockInteractionP::new(&mut b, "bi", 4, 8, 16);
        let b_i = Tensor::constant(rand_vec(&mut rng, 4 * 64), &[1, 4, 8, 8]);
        let a1 = Tensor::constant(rand_vec(&mut rng, 8 * 16), &[1, 8, 4, 4]);
        let a2 = Tensor::constant(rand_vec(&mut rng, 16 * 4), &[1, 16, 2, 2]);
        let probe = Tensor::constant(rand_vec(&mut rng, 4 * 64), &[1, 4, 8, 8]);
        out.push(Check::new(
            tag("block-interaction"),
            tol,
            params,
            Box::new(move |ctx| probed(&block.apply(ctx, &b_i, &a1, &a2)?, &probe)),
        ));
    }

    // cross-stage modulation (SPAN), C = 4
    {
        let mut params = ParamSet::new();
        let model = {
            let mut b = Builder::random(&mut params, CounterRng::new(seed, 6));
            crate::unfold::SpanScaleP::new_for_check(&mut b, "span", 4)
        };
        let feat = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        let enc = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        let dec = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        let probe = Tensor::constant(rand_vec(&mut rng, 4 * 16), &[1, 4, 4, 4]);
        out.push(Check::new(
            tag("stage-modulation"),
            tol,
            params,
            Box::new(move |ctx| probed(&model.apply(ctx, &feat, &enc, &dec)?, &probe)),
        ));
    }

    // degradation-learning conv pair, B = 3
    {
        let mut params = ParamSet::new();
        let (d1, d2) = {
            let mut b = Builder::random(&mut params, CounterRng::new(seed, 7));
            crate::unfold::dlcb_pair_for_check(&mut b, "dlcb", 3)
        };
        let x = Tensor::constant(rand_vec(&mut rng, 6 * 20), &[1, 6, 4, 5]);
        let probe = Tensor::constant(rand_vec(&mut rng, 3 * 20), &[1, 3, 4, 5]);
        out.push(Check::new(
            tag("degradation-blocks"),
            tol,
            params,
            Box::new(move |ctx| probed(&d2.apply(ctx, &d1.apply(ctx, &x)?)?, &probe)),
        ));
    }

    out
}

/// Full DST forward at C = 4, 8×8 spatial, B = 4 (depth-accumulated
/// tolerance 1e-3).
fn dst_check(seed: u64) -> Check {
    let mut cfg = DSTConfig::toy(4);
    cfg.base_channels = 4;
    let mut model = DstModel::new(&cfg, Some(CounterRng::new(seed, 8))).unwrap();
    let params = core::mem::take(&mut model.params);
    let mut rng = CounterRng::new(seed, 0xD57);
    let x = Tensor::constant(rand_vec(&mut rng, 4 * 64), &[1, 4, 8, 8]);
    let probe = Tensor::constant(rand_vec(&mut rng, 4 * 64), &[1, 4, 8, 8]);
    Check::new(
        format!("dst-full[seed{seed}]"),
        1e-3,
        params,
        Box::new(move |ctx| {
            let (out, _) = model.net.forward(ctx, &x, no_modulation)?;
            probed(&out, &probe)
        }),
    )
}

/// End-to-end two-stage unfolding at toy scale (tolerance 1e-3).
fn unfold_check(seed: u64) -> Check {
    let cfg = DSTConfig { base_channels: 4, ..DSTConfig::toy(4) };
    let mut model = UnfoldingModel::new(2, &cfg, InitScheme::FullyRandom(seed)).unwrap();
    let params = core::mem::take(&mut model.params);
    let mut rng = CounterRng::new(seed, 0xE2E);
    let mask = CodedMask::random_binary(8, 8, &mut rng);
    let op = SensingOperator::new(mask, DispersionSpec { step: 1 });
    let mut cube = SpectralCube::zeros(8, 8, 4);
    for v in cube.data_mut() {
        *v = rng.uniform();
    }
    let y = op.forward(&cube).unwrap();
    let probe = Tensor::constant(rand_vec(&mut rng, 4 * 64), &[1, 4, 8, 8]);
    Check::new(
        format!("unfold-k2[seed{seed}]"),
        1e-3,
        params,
        Box::new(move |ctx| probed(&model.forward(ctx, &y, &op)?, &probe)),
    )
}

/// The standard verification suite. Primitives and small composed blocks run
/// on `seeds` random seeds; the expensive full-model checks run on one seed
/// (or every seed when `exhaustive`).
pub fn standard_suite(seeds: u64, exhaustive: bool) -> Vec<Check> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        out.extend(primitive_checks(seed));
        out.extend(composed_checks(seed));
    }
    let model_seeds = if exhaustive { seeds } else { 1 };
    for seed in 0..model_seeds {
        out.push(dst_check(seed));
        out.push(unfold_check(seed));
    }
    out
}

/// Run every check with suite defaults; full-model checks sample fewer
/// coordinates per tensor to bound runtime.
pub fn run_suite(checks: Vec<Check>, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for mut check in checks {
        let samples = if check.tolerance >= 1e-3 { 2 } else { 6 };
        let step = check.preferred_step();
        reports.push(check.run(samples, step, seed)?);
    }
    Ok(reports)
}
