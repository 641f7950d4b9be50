//! Conductance-based LIF integration.
//!
//! Each sample is simulated from rest, independently of the others, so a
//! batch parallelises over samples. The network is feed-forward, which lets
//! every neuron be integrated over the whole presentation window once its
//! sources are known: inputs first, then each layer in order.
//!
//! Within a step of length `dt` the membrane follows the exponential-Euler
//! update with conductances averaged over the step. Synaptic conductances
//! decay analytically, and an arrival inside a step contributes exactly its
//! share of the step average and of the end-of-step value.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encode::{make_spike_trains, SpikeTrains};
use super::network::{ConfiguredNetwork, NeuronParams};
use super::SubstrateError;
use crate::relu_net::argmax;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Integration step, ms.
    pub dt: f64,
    /// Uniform synaptic transmission delay, ms.
    pub delay: f64,
    /// Stimulus duration, ms.
    pub t_on: f64,
    /// Silence after the stimulus, ms.
    pub t_off: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            delay: 1.0,
            t_on: 900.0,
            t_off: 100.0,
        }
    }
}

impl SimParams {
    pub fn period(&self) -> f64 {
        self.t_on + self.t_off
    }

    pub fn steps(&self, duration: f64) -> usize {
        (duration / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        if !(self.dt > 0.0 && self.delay >= 0.0 && self.t_on >= 0.0 && self.t_off >= 0.0) {
            return Err(SubstrateError::Config(
                "need dt > 0 and non-negative delay and window".into(),
            ));
        }
        if !(self.dt.is_finite() && self.period().is_finite()) {
            return Err(SubstrateError::Config(
                "timing parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Spikes of one presentation, times relative to the sample start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Spike times per logical neuron, ms, strictly increasing.
    pub spikes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub t_on: f64,
    pub t_off: f64,
    pub n_inputs: usize,
    pub layer_ranges: Vec<std::ops::Range<usize>>,
    pub samples: Vec<SampleRecord>,
}

impl RunRecord {
    /// `(start, stimulus end, window end)` of sample `i` on a continuous
    /// time axis where samples follow each other.
    pub fn window(&self, i: usize) -> (f64, f64, f64) {
        let start = i as f64 * (self.t_on + self.t_off);
        (start, start + self.t_on, start + self.t_on + self.t_off)
    }

    pub fn total_spikes(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| &s.spikes)
            .map(Vec::len)
            .sum()
    }
}

/// Per-step synaptic input of one neuron.
#[derive(Debug, Default, Clone)]
pub struct Drive {
    avg_e: Vec<f64>,
    end_e: Vec<f64>,
    avg_i: Vec<f64>,
    end_i: Vec<f64>,
    dt: f64,
    tau: f64,
}

impl Drive {
    pub fn reset(&mut self, n_steps: usize, dt: f64, tau_syn: f64) {
        for v in [
            &mut self.avg_e,
            &mut self.end_e,
            &mut self.avg_i,
            &mut self.end_i,
        ] {
            v.clear();
            v.resize(n_steps, 0.0);
        }
        self.dt = dt;
        self.tau = tau_syn;
    }

    /// Adds a conductance jump of `g` nS arriving at `time` ms.
    pub fn add(&mut self, time: f64, g: f64, excitatory: bool) {
        if time < 0.0 || g == 0.0 {
            return;
        }
        let k = (time / self.dt) as usize;
        if k >= self.avg_e.len() {
            return;
        }
        let rem = (k + 1) as f64 * self.dt - time;
        let decay = (-rem / self.tau).exp();
        let avg = g * self.tau / self.dt * (1.0 - decay);
        let end = g * decay;
        if excitatory {
            self.avg_e[k] += avg;
            self.end_e[k] += end;
        } else {
            self.avg_i[k] += avg;
            self.end_i[k] += end;
        }
    }
}

/// Optional observations during integration.
#[derive(Debug, Default)]
pub struct Probe {
    /// Membrane potential at the end of every step.
    pub trace: Option<Vec<f64>>,
    /// `(last sub-threshold value, value that crossed)` for every spike.
    pub crossings: Option<Vec<(f64, f64)>>,
}

/// Integrates one neuron over `drive`, appending spike times (step ends) to
/// `spikes`.
pub fn integrate(
    p: &NeuronParams,
    drive: &Drive,
    u0: f64,
    spiking: bool,
    spikes: &mut Vec<f64>,
    probe: &mut Probe,
) -> Result<(), (usize, f64)> {
    let dt = drive.dt;
    let tau = p.tau_syn;
    let keep = (-dt / tau).exp();
    let share = tau / dt * (1.0 - keep);
    let gl = p.g_leak();
    // nS · ms / nF = 1e-3
    let rate_scale = dt / (p.c_m * 1000.0);
    let ref_steps = (p.tau_ref / dt - 1e-9).ceil().max(0.0) as usize;
    let (mut ge, mut gi, mut u) = (0.0f64, 0.0f64, u0);
    let mut refractory = 0usize;
    let mut prev = u0;
    for k in 0..drive.avg_e.len() {
        let ge_avg = ge * share + drive.avg_e[k];
        let gi_avg = gi * share + drive.avg_i[k];
        ge = ge * keep + drive.end_e[k];
        gi = gi * keep + drive.end_i[k];
        if refractory > 0 {
            refractory -= 1;
            u = p.e_reset;
        } else {
            let gt = gl + ge_avg + gi_avg;
            let u_inf = (gl * p.e_leak + ge_avg * p.e_exc + gi_avg * p.e_inh) / gt;
            u = u_inf + (u - u_inf) * (-gt * rate_scale).exp();
            if !u.is_finite() {
                return Err((k, u));
            }
            if spiking && u >= p.v_thresh {
                spikes.push((k + 1) as f64 * dt);
                if let Some(c) = probe.crossings.as_mut() {
                    c.push((prev, u));
                }
                u = p.e_reset;
                refractory = ref_steps;
            }
        }
        prev = u;
        if let Some(t) = probe.trace.as_mut() {
            t.push(u);
        }
    }
    Ok(())
}

fn run_sample(
    net: &ConfiguredNetwork,
    trains: &SpikeTrains,
    sim: &SimParams,
) -> Result<SampleRecord, SubstrateError> {
    let n_steps = sim.steps(sim.period());
    let mut spikes: Vec<Vec<f64>> = Vec::with_capacity(net.neurons.len());
    let mut drive = Drive::default();
    for (j, p) in net.neurons.iter().enumerate() {
        drive.reset(n_steps, sim.dt, p.tau_syn);
        for inc in &net.incoming[j] {
            let src = inc.source as usize;
            let times = if src < net.n_inputs {
                trains.get(src).map(Vec::as_slice).unwrap_or(&[])
            } else {
                &spikes[src - net.n_inputs]
            };
            for &t in times {
                drive.add(t + sim.delay, inc.g, inc.excitatory);
            }
        }
        let mut out = Vec::new();
        integrate(p, &drive, p.e_leak, true, &mut out, &mut Probe::default()).map_err(
            |(k, _)| SubstrateError::NonFinite {
                neuron: j,
                time_ms: k as f64 * sim.dt,
            },
        )?;
        spikes.push(out);
    }
    Ok(SampleRecord { spikes })
}

fn record(net: &ConfiguredNetwork, sim: &SimParams, samples: Vec<SampleRecord>) -> RunRecord {
    RunRecord {
        t_on: sim.t_on,
        t_off: sim.t_off,
        n_inputs: net.n_inputs,
        layer_ranges: net.layer_ranges.clone(),
        samples,
    }
}

/// Runs every sample's input trains through the network.
pub fn run(
    net: &ConfiguredNetwork,
    inputs: &[SpikeTrains],
    sim: &SimParams,
) -> Result<RunRecord, SubstrateError> {
    sim.validate()?;
    let samples = inputs
        .par_iter()
        .map(|trains| run_sample(net, trains, sim))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(record(net, sim, samples))
}

/// Encodes input rates into Poisson trains and runs them. Sample `i` draws
/// its trains from `derive_index(seed, i)`, so results do not depend on
/// scheduling.
pub fn run_rates(
    net: &ConfiguredNetwork,
    rates: &[Vec<f64>],
    sim: &SimParams,
    seed: u64,
) -> Result<RunRecord, SubstrateError> {
    sim.validate()?;
    let samples = rates
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let trains = make_spike_trains(r, sim.t_on, seed::derive_index(seed, i as u64));
            run_sample(net, &trains, sim)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(record(net, sim, samples))
}

/// Rates in Hz from spikes inside each sample's stimulus window, indexed
/// `[sample][layer][neuron]` over the non-input layers.
pub fn rates_from_record(rec: &RunRecord) -> Vec<Vec<Vec<f64>>> {
    rec.samples
        .iter()
        .map(|s| {
            rec.layer_ranges
                .iter()
                .map(|r| {
                    s.spikes[r.clone()]
                        .iter()
                        .map(|train| {
                            if rec.t_on <= 0.0 {
                                return 0.0;
                            }
                            let n = train
                                .iter()
                                .filter(|t| **t >= 0.0 && **t < rec.t_on)
                                .count();
                            n as f64 * 1000.0 / rec.t_on
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Class index of the most active label neuron; ties go to the lowest index.
pub fn classify_hw(label_rates: &[f64]) -> usize {
    argmax(label_rates)
}

/// Writes `neuron_id,spike_time_ms,sample_index` rows. Neuron ids count
/// stimulus sources first, so the first logical neuron has id `n_inputs`.
/// Times are on the continuous axis given by [`RunRecord::window`].
pub fn write_raster<W: Write>(rec: &RunRecord, out: W) -> Result<(), SubstrateError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["neuron_id", "spike_time_ms", "sample_index"])?;
    for (i, s) in rec.samples.iter().enumerate() {
        let (start, _, _) = rec.window(i);
        for (j, train) in s.spikes.iter().enumerate() {
            for t in train {
                w.write_record(&[
                    (rec.n_inputs + j).to_string(),
                    format!("{:.4}", start + t),
                    i.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Single-neuron test bench used by calibration: arrivals are applied
/// directly (no transmission delay) and the whole trace is recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub trace: Vec<f64>,
    pub spikes: Vec<f64>,
    pub crossings: Vec<(f64, f64)>,
}

pub fn bench(
    p: &NeuronParams,
    arrivals: &[(f64, f64, bool)],
    dt: f64,
    duration: f64,
    u0: f64,
    spiking: bool,
) -> Result<BenchResult, SubstrateError> {
    let n = (duration / dt - 1e-9).ceil().max(0.0) as usize;
    let mut drive = Drive::default();
    drive.reset(n, dt, p.tau_syn);
    for &(t, g, exc) in arrivals {
        drive.add(t, g, exc);
    }
    let mut probe = Probe {
        trace: Some(Vec::with_capacity(n)),
        crossings: Some(Vec::new()),
    };
    let mut spikes = Vec::new();
    integrate(p, &drive, u0, spiking, &mut spikes, &mut probe).map_err(|(k, _)| {
        SubstrateError::NonFinite {
            neuron: 0,
            time_ms: k as f64 * dt,
        }
    })?;
    Ok(BenchResult {
        trace: probe.trace.unwrap_or_default(),
        spikes,
        crossings: probe.crossings.unwrap_or_default(),
    })
}
