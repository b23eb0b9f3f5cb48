//! Elementwise, reduction, normalization and shape-moving primitives.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{numel, strides_of, Tensor};
use crate::error::{CoreError, Result};

const GELU_INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2))
}

fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

/// Lane decomposition for per-axis operations: element `j` of lane
/// `(o, i)` lives at `o * lane_len * inner + j * inner + i`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let lane_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer = numel(shape) / (lane_len * inner);
    (outer, inner, lane_len)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(CoreError::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "rank mismatch {a:?} vs {b:?} (broadcast only over extent-1 axes of equal rank)"
        )));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(CoreError::ShapeMismatch(format!(
                    "axis {i}: extent {x} vs {y} in shapes {a:?} vs {b:?}"
                )))
            }
        })
        .collect()
}

/// Expand `data` of `from` shape to `to` shape (equal rank, extent-1 axes).
fn broadcast_data(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let out_n = numel(to);
    let from_strides = strides_of(from);
    let to_strides = strides_of(to);
    let mut out = vec![0.0; out_n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..to.len() {
            let idx = (i / to_strides[d]) % to[d];
            if from[d] != 1 {
                src += idx * from_strides[d];
            }
        }
        *o = data[src];
    }
    out
}

/// Sum `grad` of `from` shape down to `to` shape (the broadcast adjoint).
fn reduce_data(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let from_strides = strides_of(from);
    let to_strides = strides_of(to);
    let mut out = vec![0.0; numel(to)];
    for (i, g) in grad.iter().enumerate() {
        let mut dst = 0usize;
        for d in 0..from.len() {
            let idx = (i / from_strides[d]) % from[d];
            if to[d] != 1 {
                dst += idx * to_strides[d];
            }
        }
        out[dst] += g;
    }
    out
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        // d(out)/d(lhs) and d(out)/d(rhs) as functions of the operand values
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let a = broadcast_data(&self.data, &self.shape, &out_shape);
        let b = broadcast_data(&other.data, &other.shape, &out_shape);
        let data: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect();

        let tape = Tensor::join_tape(&[self, other]);
        let Some(tape) = tape else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let mut inputs = Vec::new();
        let a_id = self.node_id();
        let b_id = other.node_id();
        if let Some(id) = a_id {
            inputs.push(id);
        }
        if let Some(id) = b_id {
            inputs.push(id);
        }
        let (ash, bsh, osh) = (self.shape.clone(), other.shape.clone(), out_shape.clone());
        let back = move |go: &[f64]| {
            let mut grads = Vec::new();
            if a_id.is_some() {
                let full: Vec<f64> =
                    go.iter().zip(a.iter().zip(&b)).map(|(&g, (&x, &y))| g * dfa(x, y)).collect();
                grads.push(reduce_data(&full, &osh, &ash));
            }
            if b_id.is_some() {
                let full: Vec<f64> =
                    go.iter().zip(a.iter().zip(&b)).map(|(&g, (&x, &y))| g * dfb(x, y)).collect();
                grads.push(reduce_data(&full, &osh, &bsh));
            }
            grads
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Tensor::constant(data, &self.shape);
        };
        let x = Rc::clone(&self.data);
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            vec![go.iter().zip(x.iter()).map(|(&g, &v)| g * df(v)).collect()]
        };
        Tensor::from_op(data, self.shape.clone(), Some(tape), inputs, alloc::boxed::Box::new(back))
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Exact GELU: `x * Phi(x)` with the standard normal CDF.
    pub fn gelu(&self) -> Tensor {
        self.unary(
            |x| x * normal_cdf(x),
            |x| normal_cdf(x) + x * normal_pdf(x),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |x| 1.0 / (1.0 + libm::exp(-x)),
            |x| {
                let s = 1.0 / (1.0 + libm::exp(-x));
                s * (1.0 - s)
            },
        )
    }

    /// Elementwise square root. Inputs must stay strictly positive for the
    /// derivative to be finite (Charbonnier guarantees this via its eps).
    pub fn sqrt_elem(&self) -> Tensor {
        self.unary(libm::sqrt, |x| 0.5 / libm::sqrt(x))
    }

    /// Multiply the whole tensor by a one-element tracked tensor (a learnable
    /// scalar such as the PGD step size).
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "scale_by expects a 1-element tensor, got shape {:?}",
                s.shape
            )));
        }
        let sv = s.data[0];
        let data: Vec<f64> = self.data.iter().map(|&x| sv * x).collect();
        let Some(tape) = Tensor::join_tape(&[self, s]) else {
            return Ok(Tensor::constant(data, &self.shape));
        };
        let x_id = self.node_id();
        let s_id = s.node_id();
        let mut inputs = Vec::new();
        if let Some(id) = x_id {
            inputs.push(id);
        }
        if let Some(id) = s_id {
            inputs.push(id);
        }
        let x = Rc::clone(&self.data);
        let back = move |go: &[f64]| {
            let mut grads = Vec::new();
            if x_id.is_some() {
                grads.push(go.iter().map(|&g| g * sv).collect());
            }
            if s_id.is_some() {
                grads.push(vec![go.iter().zip(x.iter()).map(|(&g, &v)| g * v).sum()]);
            }
            grads
        };
        Ok(Tensor::from_op(data, self.shape.clone(), Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data.iter().sum();
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Tensor::scalar(s);
        };
        let n = self.data.len();
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| vec![vec![go[0]; n]];
        Tensor::from_op(vec![s], vec![1], Some(tape), inputs, alloc::boxed::Box::new(back))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(&self.shape, axis)?;
        let (outer, inner, lane) = lanes(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..lane {
                let base = (o * lane + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data[base + i];
                }
            }
        }
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; outer * lane * inner];
            for o in 0..outer {
                for j in 0..lane {
                    let base = (o * lane + j) * inner;
                    for i in 0..inner {
                        g[base + i] = go[o * inner + i];
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(&self.shape, axis)?;
        let (outer, inner, lane) = lanes(&self.shape, axis);
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * lane + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..lane {
                    m = m.max(self.data[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..lane {
                    let e = libm::exp(self.data[at(j)] - m);
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..lane {
                    data[at(j)] /= z;
                }
            }
        }
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &self.shape));
        };
        let y = Rc::new(data);
        let y_back = Rc::clone(&y);
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; go.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * lane + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..lane {
                        dot += go[at(j)] * y_back[at(j)];
                    }
                    for j in 0..lane {
                        g[at(j)] = y_back[at(j)] * (go[at(j)] - dot);
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op_shared(y, self.shape.clone(), Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// L2 normalization along `axis` (norms clamped below at 1e-12).
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor> {
        check_axis(&self.shape, axis)?;
        const FLOOR: f64 = 1e-12;
        let (outer, inner, lane) = lanes(&self.shape, axis);
        let mut data = vec![0.0; self.data.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * lane + j) * inner + i;
                let mut ss = 0.0;
                for j in 0..lane {
                    ss += self.data[at(j)] * self.data[at(j)];
                }
                let n = libm::sqrt(ss).max(FLOOR);
                norms[o * inner + i] = n;
                for j in 0..lane {
                    data[at(j)] = self.data[at(j)] / n;
                }
            }
        }
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &self.shape));
        };
        let y = Rc::new(data);
        let y_back = Rc::clone(&y);
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; go.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * lane + j) * inner + i;
                    let n = norms[o * inner + i];
                    let mut dot = 0.0;
                    for j in 0..lane {
                        dot += go[at(j)] * y_back[at(j)];
                    }
                    for j in 0..lane {
                        g[at(j)] = (go[at(j)] - y_back[at(j)] * dot) / n;
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op_shared(y, self.shape.clone(), Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Layer normalization along `axis` with affine parameters of extent
    /// `shape[axis]`. Population variance; `eps` under the square root.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        check_axis(&self.shape, axis)?;
        let c = self.shape[axis];
        if gamma.len() != c || beta.len() != c {
            return Err(CoreError::ShapeMismatch(format!(
                "layer_norm affine extent {} (gamma) / {} (beta) != axis extent {c}",
                gamma.len(),
                beta.len()
            )));
        }
        let (outer, inner, lane) = lanes(&self.shape, axis);
        let mut xhat = vec![0.0; self.data.len()];
        let mut data = vec![0.0; self.data.len()];
        let mut invstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * lane + j) * inner + i;
                let mut m = 0.0;
                for j in 0..lane {
                    m += self.data[at(j)];
                }
                m /= lane as f64;
                let mut v = 0.0;
                for j in 0..lane {
                    let d = self.data[at(j)] - m;
                    v += d * d;
                }
                v /= lane as f64;
                let is = 1.0 / libm::sqrt(v + eps);
                invstd[o * inner + i] = is;
                for j in 0..lane {
                    let h = (self.data[at(j)] - m) * is;
                    xhat[at(j)] = h;
                    data[at(j)] = gamma.data[j] * h + beta.data[j];
                }
            }
        }
        let Some(tape) = Tensor::join_tape(&[self, gamma, beta]) else {
            return Ok(Tensor::constant(data, &self.shape));
        };
        let x_id = self.node_id();
        let g_id = gamma.node_id();
        let b_id = beta.node_id();
        let mut inputs = Vec::new();
        for id in [x_id, g_id, b_id].into_iter().flatten() {
            inputs.push(id);
        }
        let gamma_v = Rc::clone(&gamma.data);
        let xhat = Rc::new(xhat);
        let back = move |go: &[f64]| {
            let mut grads = Vec::new();
            if x_id.is_some() {
                let mut g = vec![0.0; go.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * lane + j) * inner + i;
                        let is = invstd[o * inner + i];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..lane {
                            let dh = go[at(j)] * gamma_v[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[at(j)];
                        }
                        let n = lane as f64;
                        for j in 0..lane {
                            let dh = go[at(j)] * gamma_v[j];
                            g[at(j)] = is * (dh - sum_dh / n - xhat[at(j)] * sum_dh_h / n);
                        }
                    }
                }
                grads.push(g);
            }
            if g_id.is_some() {
                let mut g = vec![0.0; lane];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * lane + j) * inner + i;
                        for (j, gj) in g.iter_mut().enumerate() {
                            *gj += go[at(j)] * xhat[at(j)];
                        }
                    }
                }
                grads.push(g);
            }
            if b_id.is_some() {
                let mut g = vec![0.0; lane];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * lane + j) * inner + i;
                        for (j, gj) in g.iter_mut().enumerate() {
                            *gj += go[at(j)];
                        }
                    }
                }
                grads.push(g);
            }
            grads
        };
        Ok(Tensor::from_op(data, self.shape.clone(), Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul inner extents differ: {k} vs {k2}"
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * other.data[l * n + j];
                }
            }
        }
        let Some(tape) = Tensor::join_tape(&[self, other]) else {
            return Ok(Tensor::constant(data, &[m, n]));
        };
        let a_id = self.node_id();
        let b_id = other.node_id();
        let mut inputs = Vec::new();
        if let Some(id) = a_id {
            inputs.push(id);
        }
        if let Some(id) = b_id {
            inputs.push(id);
        }
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&other.data);
        let back = move |go: &[f64]| {
            let mut grads = Vec::new();
            if a_id.is_some() {
                // dA = GO B^T
                let mut g = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = go[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            g[i * k + l] += gv * b[l * n + j];
                        }
                    }
                }
                grads.push(g);
            }
            if b_id.is_some() {
                // dB = A^T GO
                let mut g = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = a[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            g[l * n + j] += av * go[i * n + j];
                        }
                    }
                }
                grads.push(g);
            }
            grads
        };
        Ok(Tensor::from_op(data, vec![m, n], Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Reorder axes, materializing the result.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        if axes.len() != self.shape.len() {
            return Err(CoreError::InvalidArgument(format!(
                "permute axes {axes:?} do not match rank {}",
                self.shape.len()
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            check_axis(&self.shape, a)?;
            if seen[a] {
                return Err(CoreError::InvalidArgument(format!("permute axis {a} repeated")));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let data = permute_data(&self.data, &self.shape, axes);
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let inputs = vec![self.node_id().expect("tracked")];
        // Backward permutes by the inverse ordering.
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let osh = out_shape.clone();
        let back = move |go: &[f64]| vec![permute_data(go, &osh, &inv)];
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape
            )));
        }
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor {
                data: Rc::clone(&self.data),
                shape: shape.to_vec(),
                node: None,
            });
        };
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| vec![go.to_vec()];
        Ok(Tensor::from_op_shared(
            Rc::clone(&self.data),
            shape.to_vec(),
            Some(tape),
            inputs,
            alloc::boxed::Box::new(back),
        ))
    }

    /// Concatenate along `axis`; backward splits the gradient by extents.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            CoreError::InvalidArgument("concat of zero tensors".into())
        })?;
        check_axis(&first.shape, axis)?;
        let rank = first.shape.len();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape.len() != rank {
                return Err(CoreError::ShapeMismatch("concat rank mismatch".into()));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != first.shape[d] {
                    return Err(CoreError::ShapeMismatch(format!(
                        "concat axis {d}: extent {} vs {}",
                        p.shape[d], first.shape[d]
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first.shape[axis + 1..].iter().product();
        let outer: usize = first.shape[..axis].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        for p in parts {
            let lane = p.shape[axis];
            for o in 0..outer {
                let src = o * lane * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + lane * inner].copy_from_slice(&p.data[src..src + lane * inner]);
            }
            offset += lane;
        }
        let refs: Vec<&Tensor> = parts.to_vec();
        let Some(tape) = Tensor::join_tape(&refs) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        // (tape input index, axis offset, axis extent) per tracked part
        let mut inputs = Vec::new();
        let mut tracked: Vec<(usize, usize)> = Vec::new();
        let mut off = 0usize;
        for p in parts {
            if let Some(id) = p.node_id() {
                inputs.push(id);
                tracked.push((off, p.shape[axis]));
            }
            off += p.shape[axis];
        }
        let back = move |go: &[f64]| {
            tracked
                .iter()
                .map(|&(off, lane)| {
                    let mut g = vec![0.0; outer * lane * inner];
                    for o in 0..outer {
                        let src = (o * axis_total + off) * inner;
                        let dst = o * lane * inner;
                        g[dst..dst + lane * inner].copy_from_slice(&go[src..src + lane * inner]);
                    }
                    g
                })
                .collect()
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(&self.shape, axis)?;
        let extent = self.shape[axis];
        if start + len > extent {
            return Err(CoreError::InvalidArgument(format!(
                "narrow [{start}, {}) exceeds axis {axis} extent {extent}",
                start + len
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; outer * extent * inner];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&go[src..src + len * inner]);
            }
            vec![g]
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Dispersive shift of an `[N,C,H,W]` map: channel `c` moves `d*c` pixels
    /// along width, zero-filled, giving width `W + d*(C-1)`.
    pub fn disperse(&self, d: usize) -> Result<Tensor> {
        let [n, c, h, w] = nchw(&self.shape)?;
        let wp = w + d * (c - 1);
        let mut data = vec![0.0; n * c * h * wp];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let src = ((ni * c + ci) * h + hi) * w;
                    let dst = ((ni * c + ci) * h + hi) * wp + d * ci;
                    data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        let out_shape = vec![n, c, h, wp];
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
                        let src = ((ni * c + ci) * h + hi) * wp + d * ci;
                        g[dst..dst + w].copy_from_slice(&go[src..src + w]);
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }

    /// Adjoint of [`Tensor::disperse`]: crop channel `c` at width offset `d*c`.
    pub fn undisperse(&self, d: usize) -> Result<Tensor> {
        let [n, c, h, wp] = nchw(&self.shape)?;
        let shift_span = d * (c - 1);
        if wp <= shift_span {
            return Err(CoreError::ShapeMismatch(format!(
                "undisperse: width {wp} too small for {c} channels at step {d}"
            )));
        }
        let w = wp - shift_span;
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let dst = ((ni * c + ci) * h + hi) * w;
                    let src = ((ni * c + ci) * h + hi) * wp + d * ci;
                    data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        let out_shape = vec![n, c, h, w];
        let Some(tape) = Tensor::join_tape(&[self]) else {
            return Ok(Tensor::constant(data, &out_shape));
        };
        let inputs = vec![self.node_id().expect("tracked")];
        let back = move |go: &[f64]| {
            let mut g = vec![0.0; n * c * h * wp];
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        let src = ((ni * c + ci) * h + hi) * w;
                        let dst = ((ni * c + ci) * h + hi) * wp + d * ci;
                        g[dst..dst + w].copy_from_slice(&go[src..src + w]);
                    }
                }
            }
            vec![g]
        };
        Ok(Tensor::from_op(data, out_shape, Some(tape), inputs, alloc::boxed::Box::new(back)))
    }
}

pub(crate) fn nchw(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        other => Err(CoreError::ShapeMismatch(format!(
            "expected rank-4 NCHW tensor, got {other:?}"
        ))),
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for (d, &a) in axes.iter().enumerate() {
            let idx = (i / out_strides[d]) % out_shape[d];
            src += idx * in_strides[a];
        }
        *o = data[src];
    }
    out
}
