//! Run configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::calibration::CalibOptions;
use crate::dataset::{ClassSet, DEFAULT_CLASSES};
use crate::loop_trainer::ITLConfig;
use crate::relu_net::{HyperParams, Topology};
use crate::seed;
use crate::substrate::{NeuronTargets, SimParams, VariationSpec, CIRCUITS, NU_TOT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every phase seed is derived from it.
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataSection,
    pub software: SoftwareSection,
    pub substrate: SubstrateSection,
    pub calibration: CalibrationSection,
    pub conversion: ConversionSection,
    pub itl: ITLConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory with the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    pub classes: Vec<u8>,
    /// Fail unless the reduced split has the expected sizes (default class
    /// set only).
    pub check_counts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftwareSection {
    pub layer_sizes: Vec<usize>,
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubstrateSection {
    pub fab_seed: u64,
    pub circuits: usize,
    /// Relative spread of fabrication mismatch.
    pub raw_spread: f64,
    pub nu_tot: f64,
    pub sim: SimParams,
    pub targets: NeuronTargets,
    pub variation: VariationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub sweep_points: usize,
    pub repeats: usize,
    pub psp_weight: f64,
    pub drive_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum GUnitPolicy {
    /// Log-bisection on probe images toward a label rate near 30 Hz.
    Tune,
    /// Fixed conductance per weight step, nS.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversionSection {
    pub g_unit: GUnitPolicy,
    /// Training images used to tune `g_unit`.
    pub probe_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            software: SoftwareSection::default(),
            substrate: SubstrateSection::default(),
            calibration: CalibrationSection::default(),
            conversion: ConversionSection::default(),
            itl: ITLConfig::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            classes: DEFAULT_CLASSES.to_vec(),
            check_counts: true,
        }
    }
}

impl Default for SoftwareSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            layer_sizes: Topology::default().layer_sizes,
            eta: hp.eta,
            gamma: hp.gamma,
            lambda: hp.lambda,
            batch_size: hp.batch_size,
            steps: hp.steps,
        }
    }
}

impl Default for SubstrateSection {
    fn default() -> Self {
        Self {
            fab_seed: 1,
            circuits: CIRCUITS,
            raw_spread: 0.3,
            nu_tot: NU_TOT,
            sim: SimParams::default(),
            targets: NeuronTargets::default(),
            variation: VariationSpec::default(),
        }
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let o = CalibOptions::default();
        Self {
            sweep_points: o.sweep_points,
            repeats: o.repeats,
            psp_weight: o.psp_weight,
            drive_weight: o.drive_weight,
        }
    }
}

impl Default for ConversionSection {
    fn default() -> Self {
        Self {
            g_unit: GUnitPolicy::Tune,
            probe_samples: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section without touching the data files.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.class_set()?;
        let topology = self.topology()?;
        if topology.outputs() != self.data.classes.len() {
            return Err(CliError::Config(format!(
                "{} label units for {} classes",
                topology.outputs(),
                self.data.classes.len()
            )));
        }
        self.hyper().validate().map_err(|e| cfg(&e))?;
        let s = &self.substrate;
        if s.circuits == 0
            || !(s.raw_spread >= 0.0 && s.raw_spread.is_finite())
            || !(s.nu_tot >= 0.0)
        {
            return Err(CliError::Config(
                "substrate needs circuits >= 1, raw_spread >= 0, nu_tot >= 0".into(),
            ));
        }
        let needed: usize = topology.layer_sizes[1..].iter().sum();
        if needed > s.circuits {
            return Err(CliError::Config(format!(
                "{needed} neurons do not fit on {} circuits",
                s.circuits
            )));
        }
        s.sim.validate().map_err(|e| cfg(&e))?;
        s.targets.validate().map_err(|e| cfg(&e))?;
        s.variation.validate().map_err(|e| cfg(&e))?;
        self.calib_options().validate().map_err(|e| cfg(&e))?;
        if let GUnitPolicy::Fixed(g) = self.conversion.g_unit {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CliError::Config("fixed g_unit must be > 0".into()));
            }
        }
        if self.conversion.probe_samples == 0 {
            return Err(CliError::Config("probe_samples must be >= 1".into()));
        }
        self.itl.validate().map_err(|e| cfg(&e))?;
        Ok(())
    }

    pub fn class_set(&self) -> Result<ClassSet, CliError> {
        ClassSet::new(self.data.classes.clone()).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn topology(&self) -> Result<Topology, CliError> {
        Topology::new(self.software.layer_sizes.clone())
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn hyper(&self) -> HyperParams {
        let s = &self.software;
        HyperParams {
            eta: s.eta,
            gamma: s.gamma,
            lambda: s.lambda,
            batch_size: s.batch_size,
            steps: s.steps,
        }
    }

    pub fn calib_options(&self) -> CalibOptions {
        let c = &self.calibration;
        CalibOptions {
            sweep_points: c.sweep_points,
            repeats: c.repeats,
            psp_weight: c.psp_weight,
            drive_weight: c.drive_weight,
            variation: self.substrate.variation.clone(),
            seed: self.phase_seed("calibration"),
        }
    }

    /// ITL settings with the seed taken from the master seed.
    pub fn itl_config(&self) -> ITLConfig {
        ITLConfig {
            seed: self.phase_seed("itl"),
            ..self.itl.clone()
        }
    }

    /// Seed of one phase: `derive(master, label)`.
    pub fn phase_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }

    /// Configuration of seed bundle `k` of a multi-seed run: master and
    /// fabrication seeds shifted by `k`, outputs in `seed_<k>/`.
    pub fn bundle(&self, k: u64) -> Self {
        let mut c = self.clone();
        c.seed = self.seed.wrapping_add(k);
        c.substrate.fab_seed = self.substrate.fab_seed.wrapping_add(k);
        c.run_dir = self.run_dir.join(format!("seed_{k}"));
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[software]\netta = 0.1").is_err());
        assert!(RunConfig::parse("[substrate.variation]\ne_lek = 0.1").is_err());
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::parse("seed = 9\n[itl]\niterations = 3\n[conversion]\ng_unit = { policy = \"fixed\", value = 0.5 }\n")
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.itl.iterations, 3);
        assert_eq!(c.itl.eta, 0.05);
        assert_eq!(c.conversion.g_unit, GUnitPolicy::Fixed(0.5));
        assert_eq!(c.software.gamma, 0.9);
    }

    #[test]
    fn validation_catches_inconsistent_sections() {
        let mut c = RunConfig::default();
        c.data.classes = vec![0, 1];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.substrate.circuits = 20;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.itl.rate_divisor = 0.0;
        assert!(c.validate().is_err());
    }
}
