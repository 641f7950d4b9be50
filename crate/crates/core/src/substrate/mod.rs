//! Simulated analog substrate: conductance-based LIF neurons with
//! fabrication mismatch, trial-to-trial parameter noise, 4-bit twin
//! synapses and Poisson rate-coded input.

pub mod encode;
pub mod network;
pub mod params;
pub mod physiology;
pub mod sim;

use thiserror::Error;

use crate::container::ContainerError;
use params::Param;

pub use encode::{encode_rates, make_spike_trains, SpikeTrains, NU_TOT};
pub use network::{
    configure, ConfiguredNetwork, HardwareNetworkConfig, Incoming, NeuronParams, SynapseEntry,
    SynapseSign, MAX_HW_WEIGHT,
};
pub use params::{bio_to_hw_voltage, NeuronTargets, VariationSpec, VoltageMap};
pub use physiology::{fabricate, SubstratePhysiology, TransferCurve, DAC_MAX};
pub use sim::{
    classify_hw, rates_from_record, run, run_rates, write_raster, RunRecord, SampleRecord,
    SimParams,
};

/// Neuron circuits on one chip; the default fabrication size.
pub const CIRCUITS: usize = 512;

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("circuit {circuit}: no usable transfer curve for {} after repeated draws", .param.name())]
    Fabrication { circuit: usize, param: Param },
    #[error("configuration was made for fabrication seed {found}, substrate has {expected}")]
    SeedMismatch { expected: u64, found: u64 },
    #[error("non-finite membrane state in neuron {neuron} at {time_ms} ms")]
    NonFinite { neuron: usize, time_ms: f64 },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
