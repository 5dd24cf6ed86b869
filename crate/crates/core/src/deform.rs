//! Linear deformable convolution.
//!
//! A 1×9 (or 9×1) kernel whose taps bend across the kernel axis. A zero-init
//! 3×3 convolution predicts eight bounded offsets per pixel (four per arm),
//! the offsets are smoothed into tap positions by the chain in
//! [`crate::kalman`], the input is sampled bilinearly at those positions with
//! border clamping, and the samples are contracted against learned 9-tap
//! weights.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::kalman::{self, ChainMode, KalmanConfig, Orientation, ARM_TAPS, KERNEL_TAPS};
use crate::params::{normal_init, Graph, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Offset channels predicted per orientation.
pub const OFFSET_CHANNELS: usize = 2 * ARM_TAPS;

/// Default bound on a single raw offset, in pixels.
pub const DEFAULT_MAX_OFFSET: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct LinearDeformableLayer {
    pub orientation: Orientation,
    pub c_in: usize,
    pub c_out: usize,
    /// `[8, c_in, 3, 3]`, zero-initialised.
    pub offset_weight: ParamId,
    pub offset_bias: ParamId,
    /// `[c_out, c_in, 9]`.
    pub tap_weights: ParamId,
    pub bias: ParamId,
    pub chain_mode: ChainMode,
    pub kalman: KalmanConfig,
    pub max_offset: f64,
}

impl LinearDeformableLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        orientation: Orientation,
        c_in: usize,
        c_out: usize,
        chain_mode: ChainMode,
        kalman: KalmanConfig,
        max_offset: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        kalman.validate()?;
        if !(max_offset > 0.0 && max_offset.is_finite()) {
            return invalid(format!("max_offset must be positive, got {max_offset}"));
        }
        let std = (2.0 / (c_in * KERNEL_TAPS) as f64).sqrt();
        Ok(Self {
            orientation,
            c_in,
            c_out,
            offset_weight: store.add(
                format!("{prefix}.offset.weight"),
                Tensor::zeros(&[OFFSET_CHANNELS, c_in, 3, 3]),
            )?,
            offset_bias: store.add(format!("{prefix}.offset.bias"), Tensor::zeros(&[OFFSET_CHANNELS]))?,
            tap_weights: store.add(
                format!("{prefix}.taps"),
                normal_init(&[c_out, c_in, KERNEL_TAPS], std, rng),
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?,
            chain_mode,
            kalman,
            max_offset,
        })
    }

    pub fn gains(&self) -> Result<[f64; ARM_TAPS]> {
        self.gains_for(self.chain_mode)
    }

    fn gains_for(&self, mode: ChainMode) -> Result<[f64; ARM_TAPS]> {
        let g = kalman::mode_gains(&self.kalman, mode, ARM_TAPS)?;
        Ok([g[0], g[1], g[2], g[3]])
    }

    /// Bounded per-pixel offsets `max_offset · tanh(conv3x3(input))`, `[8,h,w]`.
    pub fn predict_offsets(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let c = g.tape.shape(input)[0];
        if c != self.c_in {
            return shape_err(format!("layer expects {} channels, got {c}", self.c_in));
        }
        let w = g.param(self.offset_weight);
        let b = g.param(self.offset_bias);
        let raw = g.tape.conv2d(input, w, b, 1, 1)?;
        let sq = g.tape.tanh(raw)?;
        g.tape.scale(sq, self.max_offset)
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let deltas = self.predict_offsets(g, input)?;
        let taps = g.param(self.tap_weights);
        let bias = g.param(self.bias);
        let gains = self.gains()?;
        ld_apply(&mut g.tape, input, deltas, taps, bias, self.orientation, gains)
    }

    /// Tap coordinates this layer samples at `position` for `input`.
    ///
    /// `mode` overrides the layer's chain mode so both modes can be compared
    /// on identical raw offsets.
    pub fn receptive_field(
        &self,
        params: &ParamStore,
        input: &Tensor,
        position: (usize, usize),
        mode: Option<ChainMode>,
    ) -> Result<[(f64, f64); KERNEL_TAPS]> {
        let (h, w) = match *input.shape() {
            [_, h, w] => (h, w),
            ref s => return shape_err(format!("receptive_field expects [c,h,w], got {s:?}")),
        };
        if position.0 >= h || position.1 >= w {
            return invalid(format!("position {position:?} outside {h}x{w}"));
        }
        let deltas = self.offsets_at(params, input, position)?;
        let mode = mode.unwrap_or(self.chain_mode);
        kalman::tap_coordinates(
            position,
            self.orientation,
            (&deltas.0, &deltas.1),
            &self.kalman,
            mode,
        )
    }

    /// Raw arm offsets `(negative arm, positive arm)` at one pixel.
    pub fn offsets_at(
        &self,
        params: &ParamStore,
        input: &Tensor,
        position: (usize, usize),
    ) -> Result<([f64; ARM_TAPS], [f64; ARM_TAPS])> {
        let mut g = Graph::new(params, false);
        let x = g.input(input.clone());
        let d = self.predict_offsets(&mut g, x)?;
        let dv = g.value(d);
        let (h, w) = (dv.dim(1), dv.dim(2));
        let at = |ch: usize| dv.data()[ch * h * w + position.0 * w + position.1];
        let mut neg = [0.0; ARM_TAPS];
        let mut pos = [0.0; ARM_TAPS];
        for i in 0..ARM_TAPS {
            neg[i] = at(i);
            pos[i] = at(ARM_TAPS + i);
        }
        Ok((neg, pos))
    }
}

/// Linear deformable convolution given explicit offsets.
///
/// `input` is `[c_in,h,w]`, `deltas` `[8,h,w]`, `taps` `[c_out,c_in,9]`,
/// `bias` `[c_out]`. Returns `[c_out,h,w]`.
pub fn ld_apply(
    tape: &mut Tape,
    input: Var,
    deltas: Var,
    taps: Var,
    bias: Var,
    orientation: Orientation,
    gains: [f64; ARM_TAPS],
) -> Result<Var> {
    let (c_in, h, w) = match *tape.shape(input) {
        [c, h, w] => (c, h, w),
        ref s => return shape_err(format!("ld_apply expects [c,h,w] input, got {s:?}")),
    };
    let ts = tape.shape(taps).to_vec();
    if ts.len() != 3 || ts[1] != c_in || ts[2] != KERNEL_TAPS {
        return shape_err(format!("tap weights {ts:?} for {c_in} input channels"));
    }
    if tape.shape(deltas) != [OFFSET_CHANNELS, h, w] {
        return shape_err(format!(
            "offsets {:?} for a {h}x{w} input",
            tape.shape(deltas)
        ));
    }
    let c_out = ts[0];
    let coords = tape.kalman_taps(deltas, gains, orientation)?;
    let sampled = tape.bilinear_sample(input, coords)?;
    let cols = tape.reshape(sampled, &[c_in * KERNEL_TAPS, h * w])?;
    let wmat = tape.reshape(taps, &[c_out, c_in * KERNEL_TAPS])?;
    let out = tape.matmul(wmat, cols)?;
    let out = tape.bias_add(out, bias, 0)?;
    tape.reshape(out, &[c_out, h, w])
}

/// Horizontal and vertical layers on the same input, channel-concatenated.
#[derive(Clone, Debug)]
pub struct PairedDeformable {
    pub horizontal: LinearDeformableLayer,
    pub vertical: LinearDeformableLayer,
}

impl PairedDeformable {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        chain_mode: ChainMode,
        kalman: KalmanConfig,
        max_offset: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_out < 2 || !c_out.is_multiple_of(2) {
            return invalid(format!("paired deformable block needs an even width, got {c_out}"));
        }
        let half = c_out / 2;
        Ok(Self {
            horizontal: LinearDeformableLayer::new(
                store,
                &format!("{prefix}.h"),
                Orientation::Horizontal,
                c_in,
                half,
                chain_mode,
                kalman,
                max_offset,
                rng,
            )?,
            vertical: LinearDeformableLayer::new(
                store,
                &format!("{prefix}.v"),
                Orientation::Vertical,
                c_in,
                half,
                chain_mode,
                kalman,
                max_offset,
                rng,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let a = self.horizontal.forward(g, input)?;
        let b = self.vertical.forward(g, input)?;
        g.tape.concat(&[a, b])
    }

    pub fn set_chain_mode(&mut self, mode: ChainMode) {
        self.horizontal.chain_mode = mode;
        self.vertical.chain_mode = mode;
    }
}
