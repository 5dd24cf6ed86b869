//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks them in reverse once,
//! accumulating adjoints, and adds the results into the gradient buffers of
//! leaves created with `requires_grad`.

use crate::error::{invalid, shape_err, Error, Result};
use crate::kalman::{Orientation, ARM_TAPS, KERNEL_TAPS};
use crate::kernels::{self, ConvGeom, Stencil};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    BiasAdd { x: Var, b: Var, axis: usize },
    ScaleAxis { x: Var, s: Var, axis: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Pooling whose adjoint routes each output gradient to one input index.
    Select { x: Var, src: Vec<usize> },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Bilinear {
        feat: Var,
        coords: Var,
        stencils: Vec<Stencil>,
    },
    KalmanTaps {
        deltas: Var,
        gains: [f64; ARM_TAPS],
        orientation: Orientation,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded; build one per sample and combine leaf gradients
/// afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears leaf gradient buffers to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Allows another backward pass; leaf gradients keep accumulating.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, what: &str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data)?;
        self.push(t, op, &[a, b], what)
    }

    fn unary(&mut self, a: Var, op: Op, what: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(t, op, &[a], what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), "scale", |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), "add_scalar", |v| v + s)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("scale_by needs a scalar, got {:?}", self.shape(s)));
        }
        let k = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * k);
        self.push(t, Op::ScaleBy(x, s), &[x, s], "scale_by")
    }

    fn axis_vector(&self, x: Var, v: Var, axis: usize, what: &str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return invalid(format!("{what}: axis {axis} out of range for {shape:?}"));
        }
        if self.value(v).numel() != shape[axis] {
            return shape_err(format!(
                "{what}: vector of {} values for axis {axis} of {shape:?}",
                self.value(v).numel()
            ));
        }
        Ok(axis_split(shape, axis))
    }

    /// Adds `b[k]` to every element whose index along `axis` is `k`.
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_vector(x, b, axis, "bias_add")?;
        let bv = self.value(b).data();
        let mut t = self.value(x).clone();
        t.set_requires_grad(false);
        let d = t.data_mut();
        for o in 0..outer {
            for k in 0..n {
                let off = (o * n + k) * inner;
                d[off..off + inner].iter_mut().for_each(|v| *v += bv[k]);
            }
        }
        self.push(t, Op::BiasAdd { x, b, axis }, &[x, b], "bias_add")
    }

    /// Multiplies every element whose index along `axis` is `k` by `s[k]`.
    pub fn scale_axis(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_vector(x, s, axis, "scale_axis")?;
        let sv = self.value(s).data();
        let mut t = self.value(x).clone();
        t.set_requires_grad(false);
        let d = t.data_mut();
        for o in 0..outer {
            for k in 0..n {
                let off = (o * n + k) * inner;
                d[off..off + inner].iter_mut().for_each(|v| *v *= sv[k]);
            }
        }
        self.push(t, Op::ScaleAxis { x, s, axis }, &[x, s], "scale_axis")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return shape_err(format!("transpose needs a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        self.push(t, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let mut t = self.value(a).reshape(shape)?;
        t.set_requires_grad(false);
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return invalid(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Softmax { x, axis }, &[x], "softmax")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), "silu", |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return invalid(format!("clamp bounds {lo} > {hi}"));
        }
        self.unary(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    /// Group normalisation over `[c, ...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return invalid(format!("{groups} groups do not divide {c} channels"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("group_norm affine parameters must have {c} values"));
        }
        let xs = self.value(x).data();
        let (mean, rstd) = kernels::group_stats(xs, groups, GROUP_NORM_EPS);
        let spatial = xs.len() / c;
        let per_group = c / groups;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xs.len()];
        for ch in 0..c {
            let gi = ch / per_group;
            for i in ch * spatial..(ch + 1) * spatial {
                out[i] = g[ch] * (xs[i] - mean[gi]) * rstd[gi] + b[ch];
            }
        }
        let t = Tensor::new(&shape, out)?;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        };
        self.push(t, op, &[x, gamma, beta], "group_norm")
    }

    fn chw(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => shape_err(format!("{what} expects [c,h,w], got {s:?}")),
        }
    }

    fn select(&mut self, x: Var, shape: &[usize], src: Vec<usize>, what: &str) -> Result<Var> {
        let xs = self.value(x).data();
        let data = src.iter().map(|&i| xs[i]).collect();
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Select { x, src }, &[x], what)
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even extents, got {h}x{w}"));
        }
        let xs = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut src = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let best = cand.into_iter().fold(cand[0], |b, k| if xs[k] > xs[b] { k } else { b });
                    src.push(best);
                }
            }
        }
        self.select(x, &[c, oh, ow], src, "max_pool2")
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even extents, got {h}x{w}"));
        }
        let xs = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    out.push(0.25 * (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]));
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        self.push(t, Op::AvgPool2(x), &[x], "avg_pool2")
    }

    /// Per-channel maximum, `[c,h,w] -> [c,1,1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "global_max_pool")?;
        let xs = self.value(x).data();
        let src = (0..c)
            .map(|ch| {
                let base = ch * h * w;
                (base..base + h * w).fold(base, |b, k| if xs[k] > xs[b] { k } else { b })
            })
            .collect();
        self.select(x, &[c, 1, 1], src, "global_max_pool")
    }

    /// Per-channel mean, `[c,h,w] -> [c,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "global_avg_pool")?;
        let xs = self.value(x).data();
        let n = (h * w) as f64;
        let out = xs.chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        let t = Tensor::new(&[c, 1, 1], out)?;
        self.push(t, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    fn pool3(&mut self, x: Var, take_max: bool, what: &str) -> Result<Var> {
        let (c, h, w) = self.chw(x, what)?;
        let xs = self.value(x).data();
        let mut src = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for j in 0..w {
                    let mut best = base + i * w + j;
                    for ii in i.saturating_sub(1)..(i + 2).min(h) {
                        for jj in j.saturating_sub(1)..(j + 2).min(w) {
                            let k = base + ii * w + jj;
                            let better = if take_max { xs[k] > xs[best] } else { xs[k] < xs[best] };
                            if better {
                                best = k;
                            }
                        }
                    }
                    src.push(best);
                }
            }
        }
        self.select(x, &[c, h, w], src, what)
    }

    /// 3×3 stride-1 max filter; out-of-range neighbours are ignored.
    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        self.pool3(x, true, "max_pool3")
    }

    /// 3×3 stride-1 min filter; out-of-range neighbours are ignored.
    pub fn min_pool3(&mut self, x: Var) -> Result<Var> {
        self.pool3(x, false, "min_pool3")
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "upsample2")?;
        let xs = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[ch * oh * ow + i * ow + j] = xs[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        self.push(t, Op::Upsample2(x), &[x], "upsample2")
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return shape_err(format!("concat of {:?} with trailing extents {tail:?}", s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// Cross-correlation of `x[c_in,h,w]` with `w[c_out,c_in,kh,kw]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.chw(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in {
            return shape_err(format!("conv2d weight {ws:?} for input with {c_in} channels"));
        }
        if self.value(b).numel() != ws[0] {
            return shape_err(format!("conv2d bias needs {} values", ws[0]));
        }
        let Some(geom) = ConvGeom::new(c_in, h, wd, ws[2], ws[3], stride, pad) else {
            return invalid(format!(
                "kernel {}x{} stride {stride} pad {pad} does not fit {h}x{wd}",
                ws[2], ws[3]
            ));
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            ws[0],
            &geom,
        );
        let t = Tensor::new(&[ws[0], geom.oh, geom.ow], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// Samples `feat[c,h,w]` at `coords[n,2]` (row, col), giving `[c,n]`.
    ///
    /// Coordinates are clamped into the image before interpolation.
    pub fn bilinear_sample(&mut self, feat: Var, coords: Var) -> Result<Var> {
        let (c, h, w) = self.chw(feat, "bilinear_sample")?;
        let cs = self.shape(coords);
        if cs.len() != 2 || cs[1] != 2 {
            return shape_err(format!("bilinear_sample coords must be [n,2], got {cs:?}"));
        }
        let cv = self.value(coords).data();
        if cv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bilinear_sample coordinates".into()));
        }
        let stencils = kernels::stencils(h, w, cv);
        let out = kernels::bilinear_forward(self.value(feat).data(), c, h * w, &stencils);
        let t = Tensor::new(&[c, stencils.len()], out)?;
        let op = Op::Bilinear {
            feat,
            coords,
            stencils,
        };
        self.push(t, op, &[feat, coords], "bilinear_sample")
    }

    /// Deformed 9-tap sampling grid from per-pixel arm offsets.
    ///
    /// `deltas` is `[8,h,w]`: channels 0..4 drive the arm at taps −1..−4 and
    /// channels 4..8 the arm at +1..+4. Arm positions are `Σ_{i≤m} K_i δ_i`.
    /// Output is `[9·h·w, 2]`, tap-major (row `t·h·w + p` is tap `t` at pixel
    /// `p`), with taps ordered −4..+4.
    pub fn kalman_taps(
        &mut self,
        deltas: Var,
        gains: [f64; ARM_TAPS],
        orientation: Orientation,
    ) -> Result<Var> {
        let (c, h, w) = self.chw(deltas, "kalman_taps")?;
        if c != 2 * ARM_TAPS {
            return shape_err(format!("kalman_taps needs {} offset channels, got {c}", 2 * ARM_TAPS));
        }
        let hw = h * w;
        let d = self.value(deltas).data();
        let mut out = vec![0.0; KERNEL_TAPS * hw * 2];
        for p in 0..hw {
            let (r, col) = ((p / w) as f64, (p % w) as f64);
            for (side, sign) in [(0usize, -1isize), (1, 1)] {
                let mut x = 0.0;
                for m in 0..=ARM_TAPS {
                    if m > 0 {
                        x += gains[m - 1] * d[(side * ARM_TAPS + m - 1) * hw + p];
                    }
                    let t = (ARM_TAPS as isize + sign * m as isize) as usize;
                    let along = sign as f64 * m as f64;
                    let (rr, cc) = match orientation {
                        Orientation::Horizontal => (r + x, col + along),
                        Orientation::Vertical => (r + along, col + x),
                    };
                    out[2 * (t * hw + p)] = rr;
                    out[2 * (t * hw + p) + 1] = cc;
                }
            }
        }
        let t = Tensor::new(&[KERNEL_TAPS * hw, 2], out)?;
        let op = Op::KalmanTaps {
            deltas,
            gains,
            orientation,
        };
        self.push(t, op, &[deltas], "kalman_taps")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(x), &[x], "mean")
    }

    /// Propagates adjoints from the scalar `loss` to every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Returns the adjoint buffer for `v`, or None when `v` needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(d) = slot!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = slot!(*b) {
                    add_into(d, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = slot!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = slot!(*a) {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = slot!(*a) {
                    for k in 0..d.len() {
                        d[k] += g[k] / bv[k];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for k in 0..d.len() {
                        d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = slot!(*a) {
                    add_into(d, g);
                }
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s)[0];
                let xv = val(*x);
                if let Some(d) = slot!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
                }
                if let Some(d) = slot!(*s) {
                    d[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                }
            }
            Op::BiasAdd { x, b, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(d) = slot!(*x) {
                    add_into(d, g);
                }
                if let Some(d) = slot!(*b) {
                    for o in 0..outer {
                        for k in 0..n {
                            let off = (o * n + k) * inner;
                            d[k] += g[off..off + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::ScaleAxis { x, s, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let (xv, sv) = (val(*x), val(*s));
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        for k in 0..n {
                            let off = (o * n + k) * inner;
                            for q in off..off + inner {
                                d[q] += g[q] * sv[k];
                            }
                        }
                    }
                }
                if let Some(d) = slot!(*s) {
                    for o in 0..outer {
                        for k in 0..n {
                            let off = (o * n + k) * inner;
                            d[k] += (off..off + inner).map(|q| g[q] * xv[q]).sum::<f64>();
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = slot!(*a) {
                    kernels::gemm(m, n, k, g, false, bv, true, d, true);
                }
                if let Some(d) = slot!(*b) {
                    kernels::gemm(k, m, n, av, true, g, false, d, true);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                if let Some(d) = slot!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..n {
                                d[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                if let Some(d) = slot!(*x) {
                    for k in 0..d.len() {
                        let s = sigmoid(xv[k]);
                        d[k] += g[k] * s * (1.0 + xv[k] * (1.0 - s));
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = slot!(*x) {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = slot!(*x) {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(d) = slot!(*x) {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                if let Some(d) = slot!(*x) {
                    for k in 0..d.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            d[k] += g[k];
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gm = val(*gamma);
                let c = gm.len();
                let spatial = xv.len() / c;
                let per_group = c / groups;
                let xhat = |ch: usize, q: usize| (xv[q] - mean[ch / per_group]) * rstd[ch / per_group];
                if let Some(d) = slot!(*gamma) {
                    for ch in 0..c {
                        d[ch] += (ch * spatial..(ch + 1) * spatial)
                            .map(|q| g[q] * xhat(ch, q))
                            .sum::<f64>();
                    }
                }
                if let Some(d) = slot!(*beta) {
                    for ch in 0..c {
                        d[ch] += g[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>();
                    }
                }
                if let Some(d) = slot!(*x) {
                    let count = (per_group * spatial) as f64;
                    for gi in 0..*groups {
                        let chans = gi * per_group..(gi + 1) * per_group;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for ch in chans.clone() {
                            for q in ch * spatial..(ch + 1) * spatial {
                                let dxh = g[q] * gm[ch];
                                s1 += dxh;
                                s2 += dxh * xhat(ch, q);
                            }
                        }
                        let (m1, m2) = (s1 / count, s2 / count);
                        for ch in chans {
                            for q in ch * spatial..(ch + 1) * spatial {
                                let dxh = g[q] * gm[ch];
                                d[q] += rstd[gi] * (dxh - m1 - xhat(ch, q) * m2);
                            }
                        }
                    }
                }
            }
            Op::Select { x, src } => {
                if let Some(d) = slot!(*x) {
                    for (k, &s) in src.iter().enumerate() {
                        d[s] += g[k];
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(d) = slot!(*x) {
                    let (oh, ow) = (h / 2, w / 2);
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = 0.25 * g[ch * oh * ow + i * ow + j];
                                let base = ch * h * w + 2 * i * w + 2 * j;
                                for q in [base, base + 1, base + w, base + w + 1] {
                                    d[q] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                if let Some(d) = slot!(*x) {
                    for (ch, plane) in d.chunks_mut(hw).enumerate() {
                        let gv = g[ch] / hw as f64;
                        plane.iter_mut().for_each(|v| *v += gv);
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(d) = slot!(*x) {
                    let (oh, ow) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                d[ch * h * w + (i / 2) * w + j / 2] += g[ch * oh * ow + i * ow + j];
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if let Some(d) = slot!(p) {
                        add_into(d, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = self.shape(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                // The three adjoints live in distinct nodes, so take them one
                // at a time to satisfy the borrow checker.
                if let Some(d) = slot!(*w) {
                    kernels::conv2d_backward(xv, wv, g, c_out, geom, None, Some(d), None);
                }
                if let Some(d) = slot!(*b) {
                    kernels::conv2d_backward(xv, wv, g, c_out, geom, None, None, Some(d));
                }
                if let Some(d) = slot!(*x) {
                    kernels::conv2d_backward(xv, wv, g, c_out, geom, Some(d), None, None);
                }
            }
            Op::Bilinear {
                feat,
                coords,
                stencils,
            } => {
                let s = self.shape(*feat);
                let (c, hw) = (s[0], s[1] * s[2]);
                let fv = val(*feat);
                if let Some(d) = slot!(*feat) {
                    kernels::bilinear_backward(fv, c, hw, stencils, g, Some(d), None);
                }
                if let Some(d) = slot!(*coords) {
                    kernels::bilinear_backward(fv, c, hw, stencils, g, None, Some(d));
                }
            }
            Op::KalmanTaps {
                deltas,
                gains,
                orientation,
            } => {
                let s = self.shape(*deltas);
                let hw = s[1] * s[2];
                let cross = match orientation {
                    Orientation::Horizontal => 0,
                    Orientation::Vertical => 1,
                };
                if let Some(d) = slot!(*deltas) {
                    for p in 0..hw {
                        for (side, sign) in [(0usize, -1isize), (1, 1)] {
                            // Suffix sum of cross-axis adjoints from the arm tip inward.
                            let mut acc = 0.0;
                            for m in (1..=ARM_TAPS).rev() {
                                let t = (ARM_TAPS as isize + sign * m as isize) as usize;
                                acc += g[2 * (t * hw + p) + cross];
                                d[(side * ARM_TAPS + m - 1) * hw + p] += gains[m - 1] * acc;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot!(*x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = slot!(*x) {
                    let gv = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
