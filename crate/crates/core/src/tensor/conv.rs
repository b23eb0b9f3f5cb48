//! 2-D convolution and bilinear resampling, with backward rules.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::nchw;
use super::Tensor;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for ni in 0..g.n {
        for gi in 0..g.groups {
            for ocg in 0..cout_g {
                let oc = gi * cout_g + ocg;
                let b = bias.map(|b| b[oc]).unwrap_or(0.0);
                for oh in 0..g.oh {
                    let out_row = ((ni * g.cout + oc) * g.oh + oh) * g.ow;
                    if b != 0.0 {
                        for ow in 0..g.ow {
                            out[out_row + ow] = b;
                        }
                    }
                    for kh in 0..g.kh {
                        let ih = (oh * g.sh + kh) as isize - g.ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for icg in 0..cin_g {
                            let ic = gi * cin_g + icg;
                            let in_row = ((ni * g.cin + ic) * g.h + ih) * g.w;
                            let w_row = ((oc * cin_g + icg) * g.kh + kh) * g.kw;
                            for kw in 0..g.kw {
                                let wv = w[w_row + kw];
                                if wv == 0.0 {
                                    continue;
                                }
                                for ow in 0..g.ow {
                                    let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                                    if iw < 0 || iw >= g.w as isize {
                                        continue;
                                    }
                                    out[out_row + ow] += wv * x[in_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Tensor {
    /// 2-D convolution over `[N,Cin,H,W]` with weight `[Cout,Cin/groups,kh,kw]`.
    ///
    /// `groups == Cin == Cout` gives a depthwise convolution; `groups == 1`
    /// with a 1x1 kernel is a pointwise channel mix.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Tensor> {
        let [n, cin, h, w] = nchw(self.shape())?;
        let [cout, wcin, kh, kw] = nchw(weight.shape())?;
        if groups == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(CoreError::InvalidArgument("conv2d: zero stride or group count".into()));
        }
        if cin % groups != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d: Cin {cin} not divisible by groups {groups}"
            )));
        }
        if cout % groups != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d: Cout {cout} not divisible by groups {groups}"
            )));
        }
        if wcin != cin / groups {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d: weight channel extent {wcin} != Cin/groups = {}",
                cin / groups
            )));
        }
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding.0,
                w + 2 * padding.1
            )));
        }
        if let Some(b) = bias {
            if b.len() != cout {
                return Err(CoreError::ShapeMismatch(format!(
                    "conv2d: bias extent {} != Cout {cout}",
                    b.len()
                )));
            }
        }
        let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            groups,
            oh,
            ow,
        };
        let data = conv_forward(&self.data(), &weight.data(), bias.map(|b| b.data()), geom);
        let out_shape = vec![n, cout, oh, ow];

        let mut operands = vec![self, weight];
        if let Some(b) = bias {
            operands.push(b);
        }
        let Some(tape) = Tensor::join_tape(&operands) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let x_id = self.node_id();
        let w_id = weight.node_id();
        let b_id = bias.and_then(|b| b.node_id());
        let mut inputs = Vec::new();
        for id in [x_id, w_id, b_id].into_iter().flatten() {
            inputs.push(id);
        }
        let x = Rc::clone(&self.data);
        let wv = Rc::clone(&weight.data);
        let back = move |go: &[f64]| {
            let (cin_g, cout_g) = (geom.cin_g(), geom.cout_g());
            let mut grads = Vec::new();
            if x_id.is_some() {
                let mut gx = vec![0.0; geom.n * geom.cin * geom.h * geom.w];
                for ni in 0..geom.n {
                    for gi in 0..geom.groups {
                        for ocg in 0..cout_g {
                            let oc = gi * cout_g + ocg;
                            for oh in 0..geom.oh {
                                let go_row = ((ni * geom.cout + oc) * geom.oh + oh) * geom.ow;
                                for kh in 0..geom.kh {
                                    let ih = (oh * geom.sh + kh) as isize - geom.ph as isize;
                                    if ih < 0 || ih >= geom.h as isize {
                                        continue;
                                    }
                                    let ih = ih as usize;
                                    for icg in 0..cin_g {
                                        let ic = gi * cin_g + icg;
                                        let gx_row = ((ni * geom.cin + ic) * geom.h + ih) * geom.w;
                                        let w_row = ((oc * cin_g + icg) * geom.kh + kh) * geom.kw;
                                        for kw in 0..geom.kw {
                                            let wval = wv[w_row + kw];
                                            if wval == 0.0 {
                                                continue;
                                            }
                                            for ow in 0..geom.ow {
                                                let iw = (ow * geom.sw + kw) as isize
                                                    - geom.pw as isize;
                                                if iw < 0 || iw >= geom.w as isize {
                                                    continue;
                                                }
                                                gx[gx_row + iw as usize] += wval * go[go_row + ow];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grads.push(gx);
            }
            if w_id.is_some() {
                let mut gw = vec![0.0; geom.cout * cin_g * geom.kh * geom.kw];
                for ni in 0..geom.n {
                    for gi in 0..geom.groups {
                        for ocg in 0..cout_g {
                            let oc = gi * cout_g + ocg;
                            for oh in 0..geom.oh {
                                let go_row = ((ni * geom.cout + oc) * geom.oh + oh) * geom.ow;
                                for kh in 0..geom.kh {
                                    let ih = (oh * geom.sh + kh) as isize - geom.ph as isize;
                                    if ih < 0 || ih >= geom.h as isize {
                                        continue;
                                    }
                                    let ih = ih as usize;
                                    for icg in 0..cin_g {
                                        let ic = gi * cin_g + icg;
                                        let in_row = ((ni * geom.cin + ic) * geom.h + ih) * geom.w;
                                        let w_row = ((oc * cin_g + icg) * geom.kh + kh) * geom.kw;
                                        for kw in 0..geom.kw {
                                            let mut acc = 0.0;
                                            for ow in 0..geom.ow {
                                                let iw = (ow * geom.sw + kw) as isize
                                                    - geom.pw as isize;
                                                if iw < 0 || iw >= geom.w as isize {
                                                    continue;
                                                }
                                                acc += go[go_row + ow] * x[in_row + iw as usize];
                                            }
                                            gw[w_row + kw] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grads.push(gw);
            }
            if b_id.is_some() {
                let mut gb = vec![0.0; geom.cout];
                for ni in 0..geom.n {
                    for oc in 0..geom.cout {
                        let base = ((ni * geom.cout + oc) * geom.oh) * geom.ow;
                        for i in 0..geom.oh * geom.ow {
                            gb[oc] += go[base + i];
                        }
                    }
                }
                grads.push(gb);
            }
            grads
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Bilinear resampling to `(h2, w2)` with align-corners semantics
    /// (source coordinate `i*(H-1)/(H2-1)`; a singleton target axis samples
    /// the center `(H-1)/2`).
    pub fn resize_bilinear(&self, h2: usize, w2: usize) -> Result<Tensor> {
        let [n, c, h, w] = nchw(self.shape())?;
        if h2 == 0 || w2 == 0 {
            return Err(CoreError::InvalidArgument("resize_bilinear: zero target extent".into()));
        }
        let taps_h = axis_taps(h, h2);
        let taps_w = axis_taps(w, w2);
        let mut data = vec![0.0; n * c * h2 * w2];
        for ni in 0..n {
            for ci in 0..c {
                let in_plane = (ni * c + ci) * h * w;
                let out_plane = (ni * c + ci) * h2 * w2;
                for (oh, &(h0, h1, fh)) in taps_h.iter().enumerate() {
                    for (ow, &(w0, w1, fw)) in taps_w.iter().enumerate() {
                        let v00 = self.data[in_plane + h0 * w + w0];
                        let v01 = self.data[in_plane + h0 * w + w1];
                        let v10 = self.data[in_plane + h1 * w + w0];
                        let v11 = self.data[in_plane + h1 * w + w1];
                        let top = v00 * (1.0 - fw) + v01 * fw;
                        let bot = v10 * (1.0 - fw) + v11 * fw;
                        data[out_plane + oh * w2 + ow] = top * (1.0 - fh) + bot * fh;
                    }
                }
            }
        }
        let out_shape = vec![n, c, h2, w2];
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let in_plane = (ni * c + ci) * h * w;
                    let out_plane = (ni * c + ci) * h2 * w2;
                    for (oh, &(h0, h1, fh)) in taps_h.iter().enumerate() {
                        for (ow, &(w0, w1, fw)) in taps_w.iter().enumerate() {
                            let gv = go[out_plane + oh * w2 + ow];
                            g[in_plane + h0 * w + w0] += gv * (1.0 - fh) * (1.0 - fw);
                            g[in_plane + h0 * w + w1] += gv * (1.0 - fh) * fw;
                            g[in_plane + h1 * w + w0] += gv * fh * (1.0 - fw);
                            g[in_plane + h1 * w + w1] += gv * fh * fw;
                        }
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Global average pool to `[N,C,1,1]`.
    pub fn adaptive_avg_pool_1x1(&self) -> Result<Tensor> {
        let [_, _, h, w] = nchw(self.shape())?;
        let s = self.sum_axis(2)?.sum_axis(3)?;
        Ok(s.scale(1.0 / (h * w) as f64))
    }

    /// 3x3 average pool, stride 1, pad 1 (fixed-weight depthwise conv).
    pub fn avg_pool3x3(&self) -> Result<Tensor> {
        let [_, c, _, _] = nchw(self.shape())?;
        let weight = Tensor::constant(vec![1.0 / 9.0; c * 9], &[c, 1, 3, 3]);
        self.conv2d(&weight, None, (1, 1), (1, 1), c)
    }

    /// Zero-pad the bottom/right of the spatial axes.
    pub fn pad_spatial(&self, pad_h: usize, pad_w: usize) -> Result<Tensor> {
        let [n, c, h, w] = nchw(self.shape())?;
        if pad_h == 0 && pad_w == 0 {
            return self.reshape(&[n, c, h, w]);
        }
        let (h2, w2) = (h + pad_h, w + pad_w);
        let mut data = vec![0.0; n * c * h2 * w2];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let src = ((ni * c + ci) * h + hi) * w;
                    let dst = ((ni * c + ci) * h2 + hi) * w2;
                    data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        let out_shape = vec![n, c, h2, w2];
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        let dst = ((ni * c + ci) * h + hi) * w;
                        let src = ((ni * c + ci) * h2 + hi) * w2;
                        g[dst..dst + w].copy_from_slice(&go[src..src + w]);
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Crop the spatial axes to `(h2, w2)` from the top-left corner.
    pub fn crop_spatial(&self, h2: usize, w2: usize) -> Result<Tensor> {
        let t = self.narrow(2, 0, h2)?;
        t.narrow(3, 0, w2)
    }
}

/// Per-output-index source taps `(i0, i1, frac)` for one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let coord = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = libm::floor(coord) as usize;
            let i0 = i0.min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, coord - i0 as f64)
        })
        .collect()
}
