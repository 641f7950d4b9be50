use serde::{Deserialize, Serialize};

use super::SubstrateError;

/// Analog neuron parameters programmed through a DAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    EInh,
    EReset,
    ELeak,
    VThresh,
    EExc,
    TauSyn,
    TauM,
}

impl Param {
    pub const ALL: [Param; 7] = [
        Param::EInh,
        Param::EReset,
        Param::ELeak,
        Param::VThresh,
        Param::EExc,
        Param::TauSyn,
        Param::TauM,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::EInh => "e_inh",
            Param::EReset => "e_reset",
            Param::ELeak => "e_leak",
            Param::VThresh => "v_thresh",
            Param::EExc => "e_exc",
            Param::TauSyn => "tau_syn",
            Param::TauM => "tau_m",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_voltage(self) -> bool {
        !matches!(self, Param::TauSyn | Param::TauM)
    }

    /// Biological value → hardware-domain value. Voltages go through the
    /// bio-to-hardware map; time constants keep their biological value (the
    /// acceleration factor is a pure unit change).
    pub fn to_hw(self, bio: f64) -> f64 {
        if self.is_voltage() {
            VoltageMap::default().to_hw(bio)
        } else {
            bio
        }
    }

    pub fn from_hw(self, hw: f64) -> f64 {
        if self.is_voltage() {
            VoltageMap::default().to_bio(hw)
        } else {
            hw
        }
    }
}

/// `V_hw = V_bio · alpha + offset`, voltages in mV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageMap {
    pub alpha: f64,
    pub offset: f64,
}

impl Default for VoltageMap {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            offset: 1800.0,
        }
    }
}

impl VoltageMap {
    pub fn to_hw(&self, bio: f64) -> f64 {
        bio_to_hw_voltage(bio, self.alpha, self.offset)
    }

    pub fn to_bio(&self, hw: f64) -> f64 {
        (hw - self.offset) / self.alpha
    }
}

pub fn bio_to_hw_voltage(v: f64, alpha: f64, s: f64) -> f64 {
    v * alpha + s
}

/// Target neuron parameters in the biological domain (mV, ms, nF).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronTargets {
    pub e_inh: f64,
    pub e_reset: f64,
    pub e_leak: f64,
    pub v_thresh: f64,
    pub e_exc: f64,
    pub tau_syn: f64,
    pub tau_m: f64,
    pub tau_ref: f64,
    pub c_m: f64,
}

impl Default for NeuronTargets {
    fn default() -> Self {
        Self {
            e_inh: -80.0,
            e_reset: -64.0,
            e_leak: -40.0,
            v_thresh: -37.5,
            e_exc: 0.0,
            tau_syn: 5.0,
            tau_m: 20.0,
            tau_ref: 0.1,
            c_m: 0.2,
        }
    }
}

impl NeuronTargets {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::EInh => self.e_inh,
            Param::EReset => self.e_reset,
            Param::ELeak => self.e_leak,
            Param::VThresh => self.v_thresh,
            Param::EExc => self.e_exc,
            Param::TauSyn => self.tau_syn,
            Param::TauM => self.tau_m,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::EInh => self.e_inh = v,
            Param::EReset => self.e_reset = v,
            Param::ELeak => self.e_leak = v,
            Param::VThresh => self.v_thresh = v,
            Param::EExc => self.e_exc = v,
            Param::TauSyn => self.tau_syn = v,
            Param::TauM => self.tau_m = v,
        }
    }

    pub fn hw(&self, p: Param) -> f64 {
        p.to_hw(self.get(p))
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        let ordered = self.e_inh < self.e_reset
            && self.e_reset < self.e_leak
            && self.e_leak < self.v_thresh
            && self.v_thresh < self.e_exc;
        if !ordered {
            return Err(SubstrateError::Config(
                "reversal potentials must satisfy E_inh < E_reset < E_leak < V_thresh < E_exc"
                    .into(),
            ));
        }
        if !(self.tau_syn > 0.0 && self.tau_m > 0.0 && self.tau_ref >= 0.0 && self.c_m > 0.0) {
            return Err(SubstrateError::Config(
                "time constants and capacitance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Relative trial-to-trial standard deviations, applied to hardware-domain
/// values at every configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationSpec {
    pub e_inh: f64,
    pub e_reset: f64,
    pub e_leak: f64,
    pub v_thresh: f64,
    pub e_exc: f64,
    pub tau_syn: f64,
    pub tau_m: f64,
    /// Relative noise on each synapse's peak conductance.
    pub synapse: f64,
}

impl Default for VariationSpec {
    fn default() -> Self {
        Self {
            e_inh: 0.05,
            e_reset: 0.02,
            e_leak: 0.10,
            v_thresh: 0.005,
            e_exc: 0.005,
            tau_syn: 0.10,
            tau_m: 0.10,
            synapse: 0.10,
        }
    }
}

impl VariationSpec {
    pub fn none() -> Self {
        Self {
            e_inh: 0.0,
            e_reset: 0.0,
            e_leak: 0.0,
            v_thresh: 0.0,
            e_exc: 0.0,
            tau_syn: 0.0,
            tau_m: 0.0,
            synapse: 0.0,
        }
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::EInh => self.e_inh,
            Param::EReset => self.e_reset,
            Param::ELeak => self.e_leak,
            Param::VThresh => self.v_thresh,
            Param::EExc => self.e_exc,
            Param::TauSyn => self.tau_syn,
            Param::TauM => self.tau_m,
        }
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        let all = Param::ALL
            .iter()
            .map(|p| self.get(*p))
            .chain([self.synapse]);
        if all.into_iter().any(|v| !(v >= 0.0)) {
            return Err(SubstrateError::Config("variations must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voltage_map_examples() {
        assert_eq!(bio_to_hw_voltage(-40.0, 20.0, 1800.0), 1000.0);
        assert_eq!(bio_to_hw_voltage(-37.5, 20.0, 1800.0), 1050.0);
        assert_eq!(bio_to_hw_voltage(-12.25, 1.0, 0.0), -12.25);
        let m = VoltageMap::default();
        assert_eq!(m.to_bio(m.to_hw(-64.0)), -64.0);
    }

    #[test]
    fn default_targets_are_ordered() {
        NeuronTargets::default().validate().unwrap();
        let t = NeuronTargets {
            v_thresh: -45.0,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for p in Param::ALL {
            assert_eq!(Param::from_name(p.name()), Some(p));
        }
        assert_eq!(NeuronTargets::default().hw(Param::EExc), 1800.0);
        assert_eq!(NeuronTargets::default().hw(Param::TauM), 20.0);
    }
}
