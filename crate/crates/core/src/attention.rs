//! Fusion of condition features into the denoiser.
//!
//! [`CaamBlock`] is spatial cross-attention: both `[c,h,w]` streams are
//! flattened to `(h·w) × c` token matrices, the denoiser tokens query the
//! condition tokens, and the attended result is added back to the denoiser
//! stream through a zero-initialised residual scale.
//!
//! [`CsamBlock`] works on channel descriptors: the condition stream is
//! max-pooled and the denoiser stream average-pooled to `c`-vectors, a
//! channel-token cross-attention turns them into per-channel gates in (0, 1),
//! and the gated streams are mixed with two learned scalars.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{normal_init, Graph, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Token width of the channel attention inside [`CsamBlock`].
pub const CSAM_TOKEN_WIDTH: usize = 8;

fn check_pair(g: &Graph, a: Var, b: Var, channels: usize, what: &str) -> Result<(usize, usize)> {
    let (sa, sb) = (g.tape.shape(a), g.tape.shape(b));
    if sa != sb || sa.len() != 3 || sa[0] != channels {
        return shape_err(format!(
            "{what} expects two [{channels},h,w] maps, got {sa:?} and {sb:?}"
        ));
    }
    Ok((sa[1], sa[2]))
}

#[derive(Clone, Debug)]
pub struct CaamBlock {
    pub channels: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    /// Residual scale, initialised to zero.
    pub gamma: ParamId,
}

/// Output of a CAAM pass together with its `(h·w) × (h·w)` attention map.
pub struct CaamOutput {
    pub output: Var,
    pub attention: Var,
}

impl CaamBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        let std = 1.0 / (c as f64).sqrt();
        let mat = |name: &str, store: &mut ParamStore, rng: &mut _| {
            store.add(format!("{prefix}.{name}"), normal_init(&[c, c], std, rng))
        };
        let wq = mat("wq", store, rng)?;
        let wk = mat("wk", store, rng)?;
        let wv = mat("wv", store, rng)?;
        let wo = mat("wo", store, rng)?;
        Ok(Self {
            channels,
            wq,
            bq: store.add(format!("{prefix}.bq"), Tensor::zeros(&[c]))?,
            wk,
            bk: store.add(format!("{prefix}.bk"), Tensor::zeros(&[c]))?,
            wv,
            bv: store.add(format!("{prefix}.bv"), Tensor::zeros(&[c]))?,
            wo,
            bo: store.add(format!("{prefix}.bo"), Tensor::zeros(&[c]))?,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::zeros(&[1]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, feat_cond: Var, feat_denoise: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, feat_cond, feat_denoise)?.output)
    }

    pub fn forward_with_attention(&self, g: &mut Graph, feat_cond: Var, feat_denoise: Var) -> Result<CaamOutput> {
        let c = self.channels;
        let (h, w) = check_pair(g, feat_cond, feat_denoise, c, "caam")?;
        let tokens = |g: &mut Graph, x: Var| -> Result<Var> {
            let flat = g.tape.reshape(x, &[c, h * w])?;
            g.tape.transpose(flat)
        };
        let xd = tokens(g, feat_denoise)?;
        let xc = tokens(g, feat_cond)?;
        let project = |g: &mut Graph, x: Var, wid: ParamId, bid: ParamId| -> Result<Var> {
            let (wv, bv) = (g.param(wid), g.param(bid));
            let y = g.tape.matmul(x, wv)?;
            g.tape.bias_add(y, bv, 1)
        };
        let q = project(g, xd, self.wq, self.bq)?;
        let k = project(g, xc, self.wk, self.bk)?;
        let v = project(g, xc, self.wv, self.bv)?;
        let kt = g.tape.transpose(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let scores = g.tape.scale(scores, 1.0 / (c as f64).sqrt())?;
        let attention = g.tape.softmax(scores, 1)?;
        let mixed = g.tape.matmul(attention, v)?;
        let projected = project(g, mixed, self.wo, self.bo)?;
        let back = g.tape.transpose(projected)?;
        let back = g.tape.reshape(back, &[c, h, w])?;
        let gamma = g.param(self.gamma);
        let scaled = g.tape.scale_by(back, gamma)?;
        let output = g.tape.add(feat_denoise, scaled)?;
        Ok(CaamOutput { output, attention })
    }
}

#[derive(Clone, Debug)]
pub struct CsamBlock {
    pub channels: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    /// Mixing weight of the gated condition stream, initialised to 0.
    pub w_cond: ParamId,
    /// Mixing weight of the gated denoiser stream, initialised to 1.
    pub w_denoise: ParamId,
}

impl CsamBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let k = CSAM_TOKEN_WIDTH;
        let row = |name: &str, store: &mut ParamStore, rng: &mut _| {
            store.add(format!("{prefix}.{name}"), normal_init(&[1, k], 1.0, rng))
        };
        let wq = row("wq", store, rng)?;
        let wk = row("wk", store, rng)?;
        let wv = row("wv", store, rng)?;
        let wo = store.add(
            format!("{prefix}.wo"),
            normal_init(&[k, 1], 1.0 / (k as f64).sqrt(), rng),
        )?;
        Ok(Self {
            channels,
            wq,
            bq: store.add(format!("{prefix}.bq"), Tensor::zeros(&[k]))?,
            wk,
            bk: store.add(format!("{prefix}.bk"), Tensor::zeros(&[k]))?,
            wv,
            bv: store.add(format!("{prefix}.bv"), Tensor::zeros(&[k]))?,
            wo,
            bo: store.add(format!("{prefix}.bo"), Tensor::zeros(&[1]))?,
            w_cond: store.add(format!("{prefix}.w_cond"), Tensor::zeros(&[1]))?,
            w_denoise: store.add(format!("{prefix}.w_denoise"), Tensor::ones(&[1]))?,
        })
    }

    /// Channel gates `[c]` in (0, 1) from the two pooled descriptors.
    pub fn gates(&self, g: &mut Graph, feat_cond: Var, feat_denoise: Var) -> Result<Var> {
        let c = self.channels;
        check_pair(g, feat_cond, feat_denoise, c, "csam")?;
        let m = g.tape.global_max_pool(feat_cond)?;
        let m = g.tape.reshape(m, &[c, 1])?;
        let a = g.tape.global_avg_pool(feat_denoise)?;
        let a = g.tape.reshape(a, &[c, 1])?;
        let project = |g: &mut Graph, x: Var, wid: ParamId, bid: ParamId| -> Result<Var> {
            let (wv, bv) = (g.param(wid), g.param(bid));
            let y = g.tape.matmul(x, wv)?;
            g.tape.bias_add(y, bv, 1)
        };
        let q = project(g, a, self.wq, self.bq)?;
        let k = project(g, m, self.wk, self.bk)?;
        let v = project(g, m, self.wv, self.bv)?;
        let kt = g.tape.transpose(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let scores = g.tape.scale(scores, 1.0 / (CSAM_TOKEN_WIDTH as f64).sqrt())?;
        let attn = g.tape.softmax(scores, 1)?;
        let mixed = g.tape.matmul(attn, v)?;
        let z = project(g, mixed, self.wo, self.bo)?;
        let gates = g.tape.sigmoid(z)?;
        g.tape.reshape(gates, &[c])
    }

    pub fn forward(&self, g: &mut Graph, feat_cond: Var, feat_denoise: Var) -> Result<Var> {
        let gates = self.gates(g, feat_cond, feat_denoise)?;
        self.fuse(g, feat_cond, feat_denoise, gates)
    }

    /// `w_cond·(cond ⊙ gates) + w_denoise·(denoise ⊙ gates)`.
    pub fn fuse(&self, g: &mut Graph, feat_cond: Var, feat_denoise: Var, gates: Var) -> Result<Var> {
        check_pair(g, feat_cond, feat_denoise, self.channels, "csam")?;
        let mc = g.tape.scale_axis(feat_cond, gates, 0)?;
        let md = g.tape.scale_axis(feat_denoise, gates, 0)?;
        let (w1, w2) = (g.param(self.w_cond), g.param(self.w_denoise));
        let a = g.tape.scale_by(mc, w1)?;
        let b = g.tape.scale_by(md, w2)?;
        g.tape.add(a, b)
    }
}
