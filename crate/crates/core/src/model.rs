//! Condition extractor and denoiser U-Net.
//!
//! The extractor is a U-Net encoder over the condition image: two blocks per
//! level (paired linear deformable convolutions when enabled, 3×3 convolutions
//! otherwise), group norm and SiLU, with a feature map kept before each 2×
//! downsample plus a bottleneck map. The denoiser is a U-Net over `x_t` whose
//! levels receive a time embedding; condition features enter at the
//! bottleneck (cross-attention) and at every decoder level (channel soft
//! attention), or by plain addition when fusion is disabled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{CaamBlock, CsamBlock};
use crate::deform::{PairedDeformable, DEFAULT_MAX_OFFSET};
use crate::diffusion::NoisePredictor;
use crate::error::{invalid, shape_err, Result};
use crate::kalman::{ChainMode, KalmanConfig};
use crate::params::{normal_init, Graph, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const MAX_NORM_GROUPS: usize = 8;

/// Ablation rows: which of the method's components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Conditional diffusion with a plain convolutional extractor.
    Baseline,
    /// Linear deformable extractor with cumulative offsets.
    Deformable,
    /// Linear deformable extractor with Kalman-smoothed offsets.
    DeformableKalman,
    /// Everything, including cross-attention and channel attention fusion.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub ld_enabled: bool,
    pub kalman_enabled: bool,
    pub fusion_enabled: bool,
    /// When false the denoiser ignores condition features entirely.
    pub condition_enabled: bool,
    pub max_offset: f64,
    pub kalman: KalmanConfig,
    /// Number of diffusion steps; valid timesteps are `1..=steps`.
    pub steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 64,
            ld_enabled: true,
            kalman_enabled: true,
            fusion_enabled: true,
            condition_enabled: true,
            max_offset: DEFAULT_MAX_OFFSET,
            kalman: KalmanConfig::default(),
            steps: 100,
        }
    }
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn chain_mode(&self) -> ChainMode {
        if self.kalman_enabled {
            ChainMode::Kalman
        } else {
            ChainMode::Cumulative
        }
    }

    pub fn ablation(&self) -> Option<Ablation> {
        match (self.ld_enabled, self.kalman_enabled, self.fusion_enabled) {
            (false, false, false) => Some(Ablation::Baseline),
            (true, false, false) => Some(Ablation::Deformable),
            (true, true, false) => Some(Ablation::DeformableKalman),
            (true, true, true) => Some(Ablation::Full),
            _ => None,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        let (ld, kf, fu) = match a {
            Ablation::Baseline => (false, false, false),
            Ablation::Deformable => (true, false, false),
            Ablation::DeformableKalman => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        self.ld_enabled = ld;
        self.kalman_enabled = kf;
        self.fusion_enabled = fu;
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return invalid("channel configuration must be positive and non-empty");
        }
        if self.ld_enabled && !self.base_channels.is_multiple_of(2) {
            return invalid("deformable extractor needs an even base channel count");
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return invalid(format!("time embedding width must be even, got {}", self.time_embed_dim));
        }
        if !(self.max_offset > 0.0 && self.max_offset.is_finite()) {
            return invalid(format!("max_offset must be positive, got {}", self.max_offset));
        }
        if self.steps == 0 {
            return invalid("diffusion steps must be positive");
        }
        self.kalman.validate()
    }

    /// Spatial extents must be divisible by `2^depth`.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return shape_err(format!("spatial size {h}x{w} is not divisible by {f}"));
        }
        Ok(())
    }
}

/// Group count for a channel width: the largest divisor not above 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_NORM_GROUPS.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Raw sinusoidal embedding of a timestep: `[sin(t·f_i)…, cos(t·f_i)…]` with
/// `f_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return invalid(format!("time embedding width must be even, got {dim}"));
    }
    if t == 0 {
        return invalid("timesteps start at 1");
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(&[dim], out)
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Ok(Self {
            w: store.add(format!("{name}.weight"), normal_init(&[c_out, c_in, k, k], std, rng))?,
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let k = g.params().get(self.w).dim(2);
        g.tape.conv2d(x, w, b, 1, k / 2)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.weight"), normal_init(&[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng))?,
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
        })
    }

    /// `x` is `[1, d_in]`.
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.tape.matmul(x, w)?;
        g.tape.bias_add(y, b, 1)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
            groups: norm_groups(c),
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.tape.group_norm(x, ga, be, self.groups)
    }
}

#[derive(Clone, Debug)]
enum ExtractorConv {
    Standard(Conv),
    Deformable(PairedDeformable),
}

impl ExtractorConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(if cfg.ld_enabled {
            ExtractorConv::Deformable(PairedDeformable::new(
                store,
                &format!("{name}.ld"),
                c_in,
                c_out,
                cfg.chain_mode(),
                cfg.kalman,
                cfg.max_offset,
                rng,
            )?)
        } else {
            ExtractorConv::Standard(Conv::new(store, &format!("{name}.conv"), c_in, c_out, 3, rng)?)
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            ExtractorConv::Standard(c) => c.forward(g, x),
            ExtractorConv::Deformable(d) => d.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
struct ExtractorBlock {
    conv: ExtractorConv,
    norm: Norm,
}

impl ExtractorBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: ExtractorConv::new(store, name, c_in, c_out, cfg, rng)?,
            norm: Norm::new(store, &format!("{name}.norm"), c_out)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        g.tape.silu(h)
    }
}

/// conv → group norm → (+ time bias) → SiLU.
#[derive(Clone, Debug)]
struct DenoiserBlock {
    conv: Conv,
    norm: Norm,
    time: Option<Linear>,
}

impl DenoiserBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, 3, rng)?,
            norm: Norm::new(store, &format!("{name}.norm"), c_out)?,
            time: match time_dim {
                Some(d) => Some(Linear::new(store, &format!("{name}.time"), d, c_out, rng)?),
                None => None,
            },
        })
    }

    fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let mut h = self.norm.forward(g, h)?;
        // after the norm, so narrow groups cannot cancel the time signal
        if let Some(lin) = &self.time {
            let c = g.tape.shape(h)[0];
            let tb = lin.forward(g, temb)?;
            let tb = g.tape.reshape(tb, &[c])?;
            h = g.tape.bias_add(h, tb, 0)?;
        }
        g.tape.silu(h)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: DenoiserBlock,
    csam: Option<CsamBlock>,
    merge: DenoiserBlock,
    refine: DenoiserBlock,
}

/// Condition features on a graph: one map per level plus the bottleneck.
#[derive(Clone, Debug)]
pub struct ConditionFeatures {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Condition features as plain tensors, reusable across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTensors {
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

impl ConditionTensors {
    pub fn bind(&self, g: &mut Graph) -> ConditionFeatures {
        ConditionFeatures {
            skips: self.skips.iter().map(|t| g.input(t.clone())).collect(),
            bottleneck: g.input(self.bottleneck.clone()),
        }
    }
}

/// All learnable parameters of the extractor, denoiser and fusion blocks.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    extractor: Vec<[ExtractorBlock; 2]>,
    extractor_mid: ExtractorBlock,
    time_mlp: [Linear; 2],
    enc: Vec<[DenoiserBlock; 2]>,
    mid: DenoiserBlock,
    caam: Option<CaamBlock>,
    dec: Vec<DecoderLevel>,
    head: Conv,
}

impl ModelBundle {
    /// Builds and initialises every parameter deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let chans = config.level_channels();
        let td = config.time_embed_dim;
        let last = *chans.last().expect("validated non-empty");

        let mut extractor = Vec::new();
        for (l, &c) in chans.iter().enumerate() {
            let c_in = if l == 0 { 1 } else { chans[l - 1] };
            let p = format!("extractor.l{l}");
            extractor.push([
                ExtractorBlock::new(&mut store, &format!("{p}.a"), c_in, c, &config, &mut rng)?,
                ExtractorBlock::new(&mut store, &format!("{p}.b"), c, c, &config, &mut rng)?,
            ]);
        }
        let extractor_mid = ExtractorBlock::new(&mut store, "extractor.mid", last, last, &config, &mut rng)?;

        let time_mlp = [
            Linear::new(&mut store, "denoiser.time.l0", td, td, &mut rng)?,
            Linear::new(&mut store, "denoiser.time.l1", td, td, &mut rng)?,
        ];
        let mut enc = Vec::new();
        for (l, &c) in chans.iter().enumerate() {
            let c_in = if l == 0 { 1 } else { chans[l - 1] };
            let p = format!("denoiser.enc{l}");
            enc.push([
                DenoiserBlock::new(&mut store, &format!("{p}.a"), c_in, c, Some(td), &mut rng)?,
                DenoiserBlock::new(&mut store, &format!("{p}.b"), c, c, None, &mut rng)?,
            ]);
        }
        let mid = DenoiserBlock::new(&mut store, "denoiser.mid", last, last, Some(td), &mut rng)?;
        let caam = if config.fusion_enabled && config.condition_enabled {
            Some(CaamBlock::new(&mut store, "fusion.caam", last, &mut rng)?)
        } else {
            None
        };
        let mut dec = Vec::new();
        for l in (0..chans.len()).rev() {
            let c = chans[l];
            let c_prev = if l + 1 == chans.len() { last } else { chans[l + 1] };
            let p = format!("denoiser.dec{l}");
            dec.push(DecoderLevel {
                up: DenoiserBlock::new(&mut store, &format!("{p}.up"), c_prev, c, None, &mut rng)?,
                csam: if config.fusion_enabled && config.condition_enabled {
                    Some(CsamBlock::new(&mut store, &format!("fusion.csam{l}"), c, &mut rng)?)
                } else {
                    None
                },
                merge: DenoiserBlock::new(&mut store, &format!("{p}.merge"), 2 * c, c, Some(td), &mut rng)?,
                refine: DenoiserBlock::new(&mut store, &format!("{p}.refine"), c, c, None, &mut rng)?,
            });
        }
        let head = Conv::new(&mut store, "denoiser.head", chans[0], 1, 3, &mut rng)?;
        Ok(Self {
            config,
            params: store,
            extractor,
            extractor_mid,
            time_mlp,
            enc,
            mid,
            caam,
            dec,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Switches every deformable layer between cumulative and Kalman chains.
    /// Parameter shapes are unaffected.
    pub fn set_kalman_enabled(&mut self, on: bool) {
        self.config.kalman_enabled = on;
        let mode = self.config.chain_mode();
        for blocks in &mut self.extractor {
            for b in blocks.iter_mut() {
                if let ExtractorConv::Deformable(d) = &mut b.conv {
                    d.set_chain_mode(mode);
                }
            }
        }
        if let ExtractorConv::Deformable(d) = &mut self.extractor_mid.conv {
            d.set_chain_mode(mode);
        }
    }

    /// Paired deformable layers of the first extractor block, which see the
    /// condition image directly. `None` without deformable convolutions.
    pub fn first_deformable(&self) -> Option<&PairedDeformable> {
        match &self.extractor.first()?[0].conv {
            ExtractorConv::Deformable(d) => Some(d),
            ExtractorConv::Standard(_) => None,
        }
    }

    fn check_image(&self, g: &Graph, x: Var, what: &str) -> Result<()> {
        match *g.tape.shape(x) {
            [1, h, w] => self.config.check_extent(h, w),
            ref s => shape_err(format!("{what} must be [1,h,w], got {s:?}")),
        }
    }

    /// Learned time embedding: raw sinusoid through a two-layer MLP, `[1, dim]`.
    pub fn time_embedding(&self, g: &mut Graph, t: usize) -> Result<Var> {
        if t == 0 || t > self.config.steps {
            return invalid(format!("timestep {t} outside 1..={}", self.config.steps));
        }
        let raw = sinusoidal_embedding(t, self.config.time_embed_dim)?;
        let raw = g.input(raw.reshape(&[1, self.config.time_embed_dim])?);
        let h = self.time_mlp[0].forward(g, raw)?;
        let h = g.tape.silu(h)?;
        self.time_mlp[1].forward(g, h)
    }

    pub fn extractor_forward(&self, g: &mut Graph, image: Var) -> Result<ConditionFeatures> {
        self.check_image(g, image, "condition image")?;
        let mut x = image;
        let mut skips = Vec::with_capacity(self.extractor.len());
        for [a, b] in &self.extractor {
            let h = a.forward(g, x)?;
            let h = b.forward(g, h)?;
            skips.push(h);
            x = g.tape.max_pool2(h)?;
        }
        let bottleneck = self.extractor_mid.forward(g, x)?;
        Ok(ConditionFeatures { skips, bottleneck })
    }

    /// Extracts condition features outside any training graph.
    pub fn extract(&self, image: &Tensor) -> Result<ConditionTensors> {
        let mut g = Graph::new(&self.params, false);
        let x = g.input(image.clone());
        let f = self.extractor_forward(&mut g, x)?;
        Ok(ConditionTensors {
            skips: f.skips.iter().map(|&v| g.value(v).clone()).collect(),
            bottleneck: g.value(f.bottleneck).clone(),
        })
    }

    pub fn denoiser_forward(&self, g: &mut Graph, x_t: Var, t: usize, cond: &ConditionFeatures) -> Result<Var> {
        self.check_image(g, x_t, "x_t")?;
        let depth = self.config.depth();
        if cond.skips.len() != depth {
            return shape_err(format!("expected {depth} condition maps, got {}", cond.skips.len()));
        }
        let temb = self.time_embedding(g, t)?;
        let temb = g.tape.silu(temb)?;
        let mut x = x_t;
        let mut skips = Vec::with_capacity(depth);
        for [a, b] in &self.enc {
            let h = a.forward(g, x, temb)?;
            let h = b.forward(g, h, temb)?;
            skips.push(h);
            x = g.tape.max_pool2(h)?;
        }
        let mut h = self.mid.forward(g, x, temb)?;
        if self.config.condition_enabled {
            self.expect_same(g, cond.bottleneck, h, "bottleneck")?;
            h = match &self.caam {
                Some(caam) => caam.forward(g, cond.bottleneck, h)?,
                None => g.tape.add(h, cond.bottleneck)?,
            };
        }
        for (i, level) in self.dec.iter().enumerate() {
            let l = depth - 1 - i;
            let up = g.tape.upsample2(h)?;
            let d = level.up.forward(g, up, temb)?;
            let fused = if self.config.condition_enabled {
                self.expect_same(g, cond.skips[l], d, "decoder skip")?;
                match &level.csam {
                    Some(csam) => csam.forward(g, cond.skips[l], d)?,
                    None => g.tape.add(d, cond.skips[l])?,
                }
            } else {
                d
            };
            let cat = g.tape.concat(&[fused, skips[l]])?;
            let m = level.merge.forward(g, cat, temb)?;
            h = level.refine.forward(g, m, temb)?;
        }
        self.head.forward(g, h)
    }

    fn expect_same(&self, g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
        if g.tape.shape(a) != g.tape.shape(b) {
            return shape_err(format!(
                "{what} condition map {:?} does not match denoiser map {:?}",
                g.tape.shape(a),
                g.tape.shape(b)
            ));
        }
        Ok(())
    }

    /// Noise prediction outside any training graph.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &ConditionTensors) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false);
        let f = cond.bind(&mut g);
        let x = g.input(x_t.clone());
        let out = self.denoiser_forward(&mut g, x, t, &f)?;
        Ok(g.value(out).clone())
    }
}

impl NoisePredictor for ModelBundle {
    type Prepared = ConditionTensors;

    fn prepare(&self, condition: &Tensor) -> Result<ConditionTensors> {
        self.extract(condition)
    }

    fn predict_eps(&self, x_t: &Tensor, t: usize, prepared: &ConditionTensors) -> Result<Tensor> {
        ModelBundle::predict_eps(self, x_t, t, prepared)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn embedding_rejects_odd_width() {
        assert!(sinusoidal_embedding(3, 7).is_err());
        assert!(sinusoidal_embedding(0, 8).is_err());
        assert_eq!(sinusoidal_embedding(3, 8).unwrap().shape(), &[8]);
    }

    #[test]
    fn ablation_presets_round_trip() {
        let mut c = ModelConfig::default();
        for a in [Ablation::Baseline, Ablation::Deformable, Ablation::DeformableKalman, Ablation::Full] {
            c.set_ablation(a);
            assert_eq!(c.ablation(), Some(a));
        }
    }

    #[test]
    fn extent_must_divide() {
        let c = ModelConfig::default();
        assert!(c.check_extent(64, 64).is_ok());
        assert!(c.check_extent(60, 64).is_err());
    }
}
