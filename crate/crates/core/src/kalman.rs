//! Kalman-gain smoothing of deformable kernel offsets.
//!
//! A linear deformable kernel has nine taps laid out along one axis. Each arm
//! (four taps on either side of the centre) bends away from the straight line
//! by accumulating per-tap offsets `δ_i` outward from the centre. Plain
//! accumulation (`x_i = x_{i-1} + δ_i`) lets one aberrant offset drag every
//! later tap with it; the scalar Kalman update instead weights each offset by
//! a gain that shrinks as the estimate covariance contracts:
//!
//! ```text
//! K_i = p_{i-1} / (p_{i-1} + r)
//! x_i = x_{i-1} + K_i · δ_i
//! p_i = (1 - K_i) · p_{i-1}
//! ```
//!
//! The gains depend only on `(r, p0, n)`, so for a fixed configuration the
//! smoothed positions are a fixed lower-triangular linear map of the offsets.

use crate::error::{invalid, Error, Result};

/// Taps per arm of a 9-tap linear kernel.
pub const ARM_TAPS: usize = 4;
/// Total taps in a linear kernel (centre plus two arms).
pub const KERNEL_TAPS: usize = 2 * ARM_TAPS + 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanConfig {
    /// Measurement-noise hyperparameter.
    pub r: f64,
    /// Initial estimate covariance.
    pub p0: f64,
    /// Initial relative coordinate of the chain.
    pub x0_rel: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            r: 0.01,
            p0: 1.0,
            x0_rel: 0.0,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return invalid(format!("kalman r must be positive and finite, got {}", self.r));
        }
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return invalid(format!("kalman p0 must be positive and finite, got {}", self.p0));
        }
        if !self.x0_rel.is_finite() {
            return invalid("kalman x0_rel must be finite");
        }
        Ok(())
    }
}

/// How an arm turns raw offsets into tap positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChainMode {
    /// Prefix sums of the raw offsets (every gain equal to one).
    Cumulative,
    /// Offsets weighted by the Kalman gain sequence.
    Kalman,
}

impl ChainMode {
    pub fn name(self) -> &'static str {
        match self {
            ChainMode::Cumulative => "cumulative",
            ChainMode::Kalman => "kalman",
        }
    }
}

/// Axis the kernel extends along. The cross axis is the deformed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// 1×9 kernel: taps step along columns, offsets bend rows.
    Horizontal,
    /// 9×1 kernel: taps step along rows, offsets bend columns.
    Vertical,
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Vertical => "vertical",
        }
    }
}

/// Gains, covariances and positions of one smoothed arm.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanChain {
    pub gains: Vec<f64>,
    pub covariances: Vec<f64>,
    pub positions: Vec<f64>,
}

/// Iterates the gain/covariance recurrence for `n` taps.
pub fn kalman_gain_sequence(config: &KalmanConfig, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    if n == 0 {
        return invalid("kalman chain length must be at least 1");
    }
    let mut gains = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    let mut p = config.p0;
    for _ in 0..n {
        let k = p / (p + config.r);
        // (1 - k)·p written without the cancellation in 1 - k
        p = p * config.r / (p + config.r);
        gains.push(k);
        covs.push(p);
    }
    Ok((gains, covs))
}

/// Gains used by `mode` for an arm of `n` taps.
pub fn mode_gains(config: &KalmanConfig, mode: ChainMode, n: usize) -> Result<Vec<f64>> {
    match mode {
        ChainMode::Kalman => Ok(kalman_gain_sequence(config, n)?.0),
        ChainMode::Cumulative => {
            if n == 0 {
                return invalid("chain length must be at least 1");
            }
            Ok(vec![1.0; n])
        }
    }
}

/// Positions of one arm relative to the kernel centre.
pub fn smooth_chain(deltas: &[f64], config: &KalmanConfig, mode: ChainMode) -> Result<Vec<f64>> {
    Ok(chain(deltas, config, mode)?.positions)
}

/// Full arm state: gains, covariances and positions.
pub fn chain(deltas: &[f64], config: &KalmanConfig, mode: ChainMode) -> Result<KalmanChain> {
    if let Some(i) = deltas.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("offset {i} of kalman chain")));
    }
    let (gains, covariances) = match mode {
        ChainMode::Kalman => kalman_gain_sequence(config, deltas.len())?,
        ChainMode::Cumulative => {
            config.validate()?;
            if deltas.is_empty() {
                return invalid("chain length must be at least 1");
            }
            (vec![1.0; deltas.len()], vec![0.0; deltas.len()])
        }
    };
    let mut x = config.x0_rel;
    let positions = deltas
        .iter()
        .zip(&gains)
        .map(|(d, k)| {
            x += k * d;
            x
        })
        .collect();
    Ok(KalmanChain {
        gains,
        covariances,
        positions,
    })
}

/// Sampling coordinates of a 9-tap kernel centred on `anchor`.
///
/// `side_deltas.0` feeds the arm at taps −1..−4, `side_deltas.1` the arm at
/// +1..+4. Both arms start from the anchor. Taps are returned from −4 to +4.
pub fn tap_coordinates(
    anchor: (usize, usize),
    orientation: Orientation,
    side_deltas: (&[f64; ARM_TAPS], &[f64; ARM_TAPS]),
    config: &KalmanConfig,
    mode: ChainMode,
) -> Result<[(f64, f64); KERNEL_TAPS]> {
    let neg = smooth_chain(side_deltas.0, config, mode)?;
    let pos = smooth_chain(side_deltas.1, config, mode)?;
    let (ar, ac) = (anchor.0 as f64, anchor.1 as f64);
    let mut taps = [(ar, ac); KERNEL_TAPS];
    for (t, tap) in taps.iter_mut().enumerate() {
        let j = t as isize - ARM_TAPS as isize;
        let cross = match j {
            0 => 0.0,
            j if j < 0 => neg[(-j) as usize - 1],
            j => pos[j as usize - 1],
        };
        *tap = match orientation {
            Orientation::Horizontal => (ar + cross, ac + j as f64),
            Orientation::Vertical => (ar + j as f64, ac + cross),
        };
    }
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE_GAINS: [f64; 4] = [0.990099, 0.497512, 0.332226, 0.249377];

    #[test]
    fn default_config() {
        let c = KalmanConfig::default();
        assert_eq!((c.r, c.p0, c.x0_rel), (0.01, 1.0, 0.0));
    }

    #[test]
    fn gains_match_reference_values() {
        let (k, p) = kalman_gain_sequence(&KalmanConfig::default(), 4).unwrap();
        for (a, b) in k.iter().zip(REFERENCE_GAINS) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(p.windows(2).all(|w| w[1] < w[0]));
        assert!(p[3] < p[0]);
    }

    #[test]
    fn huge_noise_ignores_offsets() {
        let cfg = KalmanConfig { r: 1e9, ..Default::default() };
        let (k, _) = kalman_gain_sequence(&cfg, 1).unwrap();
        assert!(k[0] < 1e-8);
    }

    #[test]
    fn rejects_bad_config() {
        let bad_r = KalmanConfig { r: 0.0, ..Default::default() };
        let bad_p = KalmanConfig { p0: -1.0, ..Default::default() };
        assert!(kalman_gain_sequence(&bad_r, 4).is_err());
        assert!(kalman_gain_sequence(&bad_p, 4).is_err());
        assert!(kalman_gain_sequence(&KalmanConfig::default(), 0).is_err());
        assert!(smooth_chain(&[f64::NAN], &KalmanConfig::default(), ChainMode::Kalman).is_err());
    }

    #[test]
    fn chain_examples() {
        let cfg = KalmanConfig::default();
        for mode in [ChainMode::Cumulative, ChainMode::Kalman] {
            assert_eq!(smooth_chain(&[0.0; 4], &cfg, mode).unwrap(), vec![0.0; 4]);
        }
        assert_eq!(
            smooth_chain(&[1.0; 4], &cfg, ChainMode::Cumulative).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        let k = smooth_chain(&[1.0; 4], &cfg, ChainMode::Kalman).unwrap();
        for (a, b) in k.iter().zip([0.990099, 1.487611, 1.819837, 2.069214]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn straight_kernels_without_offsets() {
        let cfg = KalmanConfig::default();
        let z = [0.0; 4];
        let h = tap_coordinates((5, 5), Orientation::Horizontal, (&z, &z), &cfg, ChainMode::Kalman)
            .unwrap();
        let v = tap_coordinates((5, 5), Orientation::Vertical, (&z, &z), &cfg, ChainMode::Kalman)
            .unwrap();
        for t in 0..9 {
            assert_eq!(h[t], (5.0, 1.0 + t as f64));
            assert_eq!(v[t], (1.0 + t as f64, 5.0));
        }
    }

    #[test]
    fn positive_arm_bends_by_smoothed_positions() {
        let cfg = KalmanConfig::default();
        let taps = tap_coordinates(
            (5, 5),
            Orientation::Horizontal,
            (&[0.0; 4], &[1.0; 4]),
            &cfg,
            ChainMode::Kalman,
        )
        .unwrap();
        assert_eq!(taps[4], (5.0, 5.0));
        for (m, want) in [0.990099, 1.487611, 1.819837, 2.069214].iter().enumerate() {
            assert!((taps[5 + m].0 - 5.0 - want).abs() < 1e-6);
            assert_eq!(taps[3 - m], (5.0, 5.0 - 1.0 - m as f64));
        }
    }
}
