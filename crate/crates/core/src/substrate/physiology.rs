//! Fabrication mismatch: every neuron circuit maps DAC codes to analog
//! values through its own transfer curve.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{NeuronTargets, Param};
use super::SubstrateError;
use crate::seed;

pub const DAC_MAX: u16 = 1023;

/// Curvature of the nominal DAC response, shared by all circuits.
pub const CURVATURE: f64 = 0.1;

/// Nominal hardware-domain range covered by the DAC, as multiples of the
/// default target.
const RANGE_LO: f64 = 0.3;
const RANGE_HI: f64 = 2.5;

const MAX_REDRAWS: usize = 100;

/// `value(dac) = gain · base(dac) + offset` in the hardware domain, where
/// `base` sweeps `[lo, hi]` with a mild quadratic bend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferCurve {
    pub lo: f64,
    pub hi: f64,
    pub gain: f64,
    pub offset: f64,
}

impl TransferCurve {
    pub fn nominal(param: Param) -> Self {
        let t = NeuronTargets::default().hw(param);
        Self {
            lo: RANGE_LO * t,
            hi: RANGE_HI * t,
            gain: 1.0,
            offset: 0.0,
        }
    }

    pub fn base(&self, dac: f64) -> f64 {
        let x = dac / f64::from(DAC_MAX);
        self.lo + (self.hi - self.lo) * (x + CURVATURE * x * (1.0 - x))
    }

    pub fn value(&self, dac: f64) -> f64 {
        self.gain * self.base(dac) + self.offset
    }

    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }

    /// Strictly increasing over the DAC range.
    pub fn is_monotone(&self) -> bool {
        self.gain > 0.0 && CURVATURE.abs() < 1.0
    }

    /// Smallest DAC code whose value reaches `target`, by bisection on the
    /// continuous curve; clamped to the DAC range.
    pub fn dac_for(&self, target: f64) -> u16 {
        if target <= self.value(0.0) {
            return 0;
        }
        if target >= self.value(f64::from(DAC_MAX)) {
            return DAC_MAX;
        }
        let (mut lo, mut hi) = (0.0, f64::from(DAC_MAX));
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.value(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).round() as u16
    }
}

/// DAC code that would hit the default target on a mismatch-free circuit.
pub fn nominal_dac(param: Param) -> u16 {
    TransferCurve::nominal(param).dac_for(NeuronTargets::default().hw(param))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstratePhysiology {
    pub fab_seed: u64,
    pub raw_spread: f64,
    /// `curves[circuit][param.index()]`
    pub curves: Vec<[TransferCurve; 7]>,
}

impl SubstratePhysiology {
    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn curve(&self, circuit: usize, param: Param) -> &TransferCurve {
        &self.curves[circuit][param.index()]
    }
}

/// Draws per-circuit gain and offset errors: `gain = 1 + ε_g` with
/// `ε_g ~ N(0, raw_spread)` and `offset ~ N(0, raw_spread · range / 4)`.
/// Circuits whose curve is non-monotone or cannot reach the default target
/// within the DAC range are redrawn.
pub fn fabricate(
    n_neurons: usize,
    fab_seed: u64,
    raw_spread: f64,
) -> Result<SubstratePhysiology, SubstrateError> {
    if !(raw_spread >= 0.0) || !raw_spread.is_finite() {
        return Err(SubstrateError::Config(
            "raw spread must be finite and >= 0".into(),
        ));
    }
    let targets = NeuronTargets::default();
    let mut curves = Vec::with_capacity(n_neurons);
    for circuit in 0..n_neurons {
        let mut rng = seed::rng(seed::derive_index(fab_seed, circuit as u64));
        let mut row = [TransferCurve::nominal(Param::EInh); 7];
        for param in Param::ALL {
            let nominal = TransferCurve::nominal(param);
            let target = targets.hw(param);
            let mut drawn = None;
            for _ in 0..MAX_REDRAWS {
                let (gain, offset) = if raw_spread == 0.0 {
                    (1.0, 0.0)
                } else {
                    let eps = Normal::new(0.0, raw_spread).unwrap().sample(&mut rng);
                    let off = Normal::new(0.0, raw_spread * nominal.range() / 4.0)
                        .unwrap()
                        .sample(&mut rng);
                    (1.0 + eps, off)
                };
                let c = TransferCurve {
                    gain,
                    offset,
                    ..nominal
                };
                let margin = 0.02 * target.abs();
                if c.is_monotone()
                    && c.value(0.0) <= target - margin
                    && c.value(f64::from(DAC_MAX)) >= target + margin
                {
                    drawn = Some(c);
                    break;
                }
            }
            row[param.index()] = drawn.ok_or(SubstrateError::Fabrication { circuit, param })?;
        }
        curves.push(row);
    }
    Ok(SubstratePhysiology {
        fab_seed,
        raw_spread,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_gives_identical_curves() {
        let p = fabricate(16, 5, 0.0).unwrap();
        assert!(p.curves.iter().all(|c| *c == p.curves[0]));
        assert_eq!(
            p.curves[0][Param::TauSyn.index()],
            TransferCurve::nominal(Param::TauSyn)
        );
    }

    #[test]
    fn fabrication_is_seeded() {
        assert_eq!(
            fabricate(32, 11, 0.3).unwrap(),
            fabricate(32, 11, 0.3).unwrap()
        );
        assert_ne!(
            fabricate(32, 11, 0.3).unwrap(),
            fabricate(32, 12, 0.3).unwrap()
        );
        // circuits do not depend on population size
        assert_eq!(
            fabricate(8, 11, 0.3).unwrap().curves[..],
            fabricate(32, 11, 0.3).unwrap().curves[..8]
        );
    }

    #[test]
    fn curves_are_monotone_and_reach_targets() {
        let p = fabricate(256, 3, 0.3).unwrap();
        let t = NeuronTargets::default();
        for row in &p.curves {
            for param in Param::ALL {
                let c = row[param.index()];
                assert!(c.is_monotone());
                let mut prev = f64::NEG_INFINITY;
                for d in (0..=DAC_MAX).step_by(31) {
                    let v = c.value(f64::from(d));
                    assert!(v > prev);
                    prev = v;
                }
                assert!(c.value(0.0) < t.hw(param) && c.value(1023.0) > t.hw(param));
            }
        }
    }

    #[test]
    fn invalid_spread_is_rejected() {
        assert!(matches!(
            fabricate(4, 1, -0.1),
            Err(SubstrateError::Config(_))
        ));
        assert!(fabricate(4, 1, f64::NAN).is_err());
    }

    #[test]
    fn dac_for_inverts_the_curve() {
        let c = TransferCurve::nominal(Param::ELeak);
        let d = c.dac_for(1000.0);
        assert!((c.value(f64::from(d)) - 1000.0).abs() < c.range() / 1023.0 * 1.5);
        assert_eq!(c.dac_for(-1e9), 0);
        assert_eq!(c.dac_for(1e9), DAC_MAX);
    }

    #[test]
    fn uncalibrated_tau_syn_spread_is_about_raw_spread() {
        // oracle: sample statistics of the fabricated population at the nominal code
        let p = fabricate(512, 21, 0.3).unwrap();
        let d = f64::from(nominal_dac(Param::TauSyn));
        let v: Vec<f64> = p
            .curves
            .iter()
            .map(|c| c[Param::TauSyn.index()].value(d))
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let rel = sd / mean;
        assert!((0.22..0.42).contains(&rel), "relative spread {rel}");
    }
}
