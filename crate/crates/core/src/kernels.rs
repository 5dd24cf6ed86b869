//! Raw numeric kernels shared by the tape operations.
//!
//! Everything here works on flat row-major slices. Reductions inside one
//! output element always run in the same order, so results never depend on
//! how callers split work across threads.

/// `C[m,n] = op(A)[m,k] · op(B)[k,n]`, or `+=` when `accumulate` is set.
///
/// With `ta` the buffer `a` holds A transposed (stored `[k,m]`); likewise `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence the assert checks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self { c_in, h, w, kh, kw, stride, pad, oh, ow })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds zero-padded input patches into a `[c_in*kh*kw, oh*ow]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    cols.clear();
    cols.resize(g.rows() * g.cols(), 0.0);
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let out = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    for (oj, o) in out.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            *o = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let p = g.cols();
    let mut out = vec![0.0; c_out * p];
    if g.is_pointwise() {
        gemm(c_out, g.rows(), p, weight, false, x, false, &mut out, false);
    } else {
        let mut cols = Vec::new();
        im2col(x, g, &mut cols);
        gemm(c_out, g.rows(), p, weight, false, &cols, false, &mut out, false);
    }
    for (o, row) in out.chunks_mut(p).enumerate() {
        let b = bias[o];
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    c_out: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let p = g.cols();
    let r = g.rows();
    let pointwise = g.is_pointwise();
    if let Some(dw) = dw {
        if pointwise {
            gemm(c_out, p, r, dy, false, x, true, dw, true);
        } else {
            let mut cols = Vec::new();
            im2col(x, g, &mut cols);
            gemm(c_out, p, r, dy, false, &cols, true, dw, true);
        }
    }
    if let Some(db) = db {
        for (o, row) in dy.chunks(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        if pointwise {
            gemm(r, c_out, p, weight, true, dy, false, dx, true);
        } else {
            let mut dcols = vec![0.0; r * p];
            gemm(r, c_out, p, weight, true, dy, false, &mut dcols, false);
            col2im_add(&dcols, g, dx);
        }
    }
}

/// Bilinear interpolation stencil for one (clamped) sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
    pub fr: f64,
    pub fc: f64,
    pub live_r: bool,
    pub live_c: bool,
}

impl Stencil {
    /// Corner order: (r0,c0), (r0,c1), (r1,c0), (r1,c1).
    pub fn new(h: usize, w: usize, row: f64, col: f64) -> Self {
        let (rmax, cmax) = ((h - 1) as f64, (w - 1) as f64);
        let live_r = (0.0..=rmax).contains(&row);
        let live_c = (0.0..=cmax).contains(&col);
        let r = row.clamp(0.0, rmax);
        let c = col.clamp(0.0, cmax);
        let r0 = (r.floor() as usize).min(h - 1);
        let c0 = (c.floor() as usize).min(w - 1);
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        Self {
            idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
            wt: [
                (1.0 - fr) * (1.0 - fc),
                (1.0 - fr) * fc,
                fr * (1.0 - fc),
                fr * fc,
            ],
            fr,
            fc,
            live_r,
            live_c,
        }
    }
}

pub(crate) fn stencils(h: usize, w: usize, coords: &[f64]) -> Vec<Stencil> {
    coords
        .chunks_exact(2)
        .map(|rc| Stencil::new(h, w, rc[0], rc[1]))
        .collect()
}

/// Samples `feat[c,h,w]` at every stencil, producing `[c, n]`.
pub(crate) fn bilinear_forward(feat: &[f64], c: usize, hw: usize, st: &[Stencil]) -> Vec<f64> {
    let n = st.len();
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let plane = &feat[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * n..(ch + 1) * n];
        for (o, s) in dst.iter_mut().zip(st) {
            *o = s.wt[0] * plane[s.idx[0]]
                + s.wt[1] * plane[s.idx[1]]
                + s.wt[2] * plane[s.idx[2]]
                + s.wt[3] * plane[s.idx[3]];
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    feat: &[f64],
    c: usize,
    hw: usize,
    st: &[Stencil],
    dy: &[f64],
    dfeat: Option<&mut [f64]>,
    dcoords: Option<&mut [f64]>,
) {
    let n = st.len();
    if let Some(df) = dfeat {
        for ch in 0..c {
            let plane = &mut df[ch * hw..(ch + 1) * hw];
            let g = &dy[ch * n..(ch + 1) * n];
            for (gv, s) in g.iter().zip(st) {
                for q in 0..4 {
                    plane[s.idx[q]] += gv * s.wt[q];
                }
            }
        }
    }
    if let Some(dc) = dcoords {
        for ch in 0..c {
            let plane = &feat[ch * hw..(ch + 1) * hw];
            let g = &dy[ch * n..(ch + 1) * n];
            for (k, (gv, s)) in g.iter().zip(st).enumerate() {
                let f = [
                    plane[s.idx[0]],
                    plane[s.idx[1]],
                    plane[s.idx[2]],
                    plane[s.idx[3]],
                ];
                if s.live_r {
                    dc[2 * k] += gv * ((1.0 - s.fc) * (f[2] - f[0]) + s.fc * (f[3] - f[1]));
                }
                if s.live_c {
                    dc[2 * k + 1] += gv * ((1.0 - s.fr) * (f[1] - f[0]) + s.fr * (f[3] - f[2]));
                }
            }
        }
    }
}

/// Group normalisation statistics: per-group mean and reciprocal std.
pub(crate) fn group_stats(x: &[f64], groups: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let per = x.len() / groups;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    for chunk in x.chunks(per) {
        let m = chunk.iter().sum::<f64>() / per as f64;
        let v = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per as f64;
        mean.push(m);
        rstd.push(1.0 / (v + eps).sqrt());
    }
    (mean, rstd)
}
