//! Hardware network description and its realisation on a fabricated
//! substrate.

use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{NeuronTargets, Param, VariationSpec};
use super::physiology::{SubstratePhysiology, DAC_MAX};
use super::SubstrateError;
use crate::container::{Container, Reader, Tag, Writer};
use crate::seed;

pub const MAX_HW_WEIGHT: u8 = 15;

pub const TAG_HW_CONFIG: Tag = *b"HWCF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynapseSign {
    Excitatory,
    Inhibitory,
}

/// One synapse of an excitatory/inhibitory twin pair. Node ids below the
/// input count denote stimulus sources; the rest are logical neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynapseEntry {
    pub pre: u32,
    pub post: u32,
    pub hw_weight: u8,
    pub sign: SynapseSign,
    pub enabled: bool,
}

impl SynapseEntry {
    /// Weight seen by the post-synaptic neuron, `-15..=15`.
    pub fn signed_weight(&self) -> i32 {
        if !self.enabled {
            return 0;
        }
        match self.sign {
            SynapseSign::Excitatory => i32::from(self.hw_weight),
            SynapseSign::Inhibitory => -i32::from(self.hw_weight),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareNetworkConfig {
    /// Layer sizes including the stimulus layer.
    pub layer_sizes: Vec<usize>,
    /// Logical neuron → circuit index in the fabricated population.
    pub placement: Vec<u32>,
    /// DAC code per logical neuron and parameter.
    pub neuron_dacs: Vec<[u16; 7]>,
    pub synapses: Vec<SynapseEntry>,
    /// Peak conductance per hardware weight step, nS.
    pub g_unit: f64,
    /// Fabrication the DACs were calibrated against.
    pub fab_seed: u64,
}

impl HardwareNetworkConfig {
    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_neurons(&self) -> usize {
        self.layer_sizes[1..].iter().sum()
    }

    /// Logical-neuron index ranges of each non-input layer.
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layer_sizes[1..]
            .iter()
            .map(|n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Node id range of each layer, stimulus layer first.
    pub fn node_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.layer_sizes
            .iter()
            .map(|n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Synapse budget: one twin pair for every pair of neurons in
    /// consecutive layers.
    pub fn synapse_budget(&self) -> usize {
        2 * self
            .layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1])
            .sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        let bad = |m: String| Err(SubstrateError::Config(m));
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad("need a stimulus layer and at least one neuron layer".into());
        }
        let n = self.n_neurons();
        if self.placement.len() != n || self.neuron_dacs.len() != n {
            return bad(format!("expected placement and DACs for {n} neurons"));
        }
        let mut seen = self.placement.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return bad("two logical neurons placed on the same circuit".into());
        }
        if self.neuron_dacs.iter().flatten().any(|d| *d > DAC_MAX) {
            return bad("DAC code out of range".into());
        }
        if !(self.g_unit >= 0.0) || !self.g_unit.is_finite() {
            return bad("g_unit must be finite and >= 0".into());
        }
        if self.synapses.len() > self.synapse_budget() {
            return bad(format!(
                "{} synapses exceed the budget of {}",
                self.synapses.len(),
                self.synapse_budget()
            ));
        }
        let n_in = self.n_inputs() as u32;
        let total = n_in + n as u32;
        let mut twins: HashMap<(u32, u32), Vec<&SynapseEntry>> = HashMap::new();
        for s in &self.synapses {
            if s.hw_weight > MAX_HW_WEIGHT {
                return bad(format!(
                    "hardware weight {} exceeds {MAX_HW_WEIGHT}",
                    s.hw_weight
                ));
            }
            if s.post < n_in || s.post >= total || s.pre >= s.post {
                return bad(format!(
                    "synapse {}→{} is not feed-forward onto a neuron",
                    s.pre, s.post
                ));
            }
            twins.entry((s.pre, s.post)).or_default().push(s);
        }
        for ((pre, post), entries) in twins {
            let enabled = entries.iter().filter(|e| e.enabled).count();
            let all_zero = entries.iter().all(|e| e.hw_weight == 0);
            if entries.len() > 2 || (enabled != 1 && !all_zero) {
                return bad(format!("twin invariant violated for {pre}→{post}"));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.layer_sizes.len() as u32);
        for s in &self.layer_sizes {
            w.u32(*s as u32);
        }
        for p in &self.placement {
            w.u32(*p);
        }
        for dacs in &self.neuron_dacs {
            for d in dacs {
                w.u16(*d);
            }
        }
        w.f64(self.g_unit).u64(self.fab_seed);
        w.u32(self.synapses.len() as u32);
        for s in &self.synapses {
            w.u32(s.pre).u32(s.post).u8(s.hw_weight);
            w.u8(match s.sign {
                SynapseSign::Excitatory => 0,
                SynapseSign::Inhibitory => 1,
            });
            w.u8(u8::from(s.enabled));
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<(), SubstrateError> {
        let mut c = Container::new();
        c.push(TAG_HW_CONFIG, self.encode());
        Ok(c.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SubstrateError> {
        let cfg = Self::decode(Container::read(path)?.require(TAG_HW_CONFIG)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SubstrateError> {
        let mut r = Reader::new(bytes, "HWCF");
        let nl = r.u32()? as usize;
        let layer_sizes = (0..nl)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = layer_sizes.iter().skip(1).sum();
        let placement = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let mut neuron_dacs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut d = [0u16; 7];
            for x in &mut d {
                *x = r.u16()?;
            }
            neuron_dacs.push(d);
        }
        let g_unit = r.f64()?;
        let fab_seed = r.u64()?;
        let ns = r.u32()? as usize;
        let mut synapses = Vec::with_capacity(ns);
        for _ in 0..ns {
            let pre = r.u32()?;
            let post = r.u32()?;
            let hw_weight = r.u8()?;
            let sign = match r.u8()? {
                0 => SynapseSign::Excitatory,
                1 => SynapseSign::Inhibitory,
                _ => return Err(r.error("bad synapse sign").into()),
            };
            let enabled = r.u8()? != 0;
            synapses.push(SynapseEntry {
                pre,
                post,
                hw_weight,
                sign,
                enabled,
            });
        }
        r.finish()?;
        Ok(Self {
            layer_sizes,
            placement,
            neuron_dacs,
            synapses,
            g_unit,
            fab_seed,
        })
    }
}

/// Realised parameters of one neuron, biological domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub e_inh: f64,
    pub e_reset: f64,
    pub e_leak: f64,
    pub v_thresh: f64,
    pub e_exc: f64,
    pub tau_syn: f64,
    pub tau_m: f64,
    pub tau_ref: f64,
    /// Membrane capacitance, nF.
    pub c_m: f64,
}

impl NeuronParams {
    pub fn from_targets(t: &NeuronTargets) -> Self {
        Self {
            e_inh: t.e_inh,
            e_reset: t.e_reset,
            e_leak: t.e_leak,
            v_thresh: t.v_thresh,
            e_exc: t.e_exc,
            tau_syn: t.tau_syn,
            tau_m: t.tau_m,
            tau_ref: t.tau_ref,
            c_m: t.c_m,
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

    /// Leak conductance, nS.
    pub fn g_leak(&self) -> f64 {
        1000.0 * self.c_m / self.tau_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incoming {
    pub source: u32,
    /// Peak conductance, nS.
    pub g: f64,
    pub excitatory: bool,
}

/// A network with all analog quantities drawn; immutable while running.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfiguredNetwork {
    pub n_inputs: usize,
    pub neurons: Vec<NeuronParams>,
    /// Incoming synapses per logical neuron, sources always earlier nodes.
    pub incoming: Vec<Vec<Incoming>>,
    pub layer_ranges: Vec<std::ops::Range<usize>>,
}

/// Hardware-domain value of one parameter as written into analog storage:
/// the circuit's transfer curve at `dac`, times `1 + ε_t`.
pub fn realize(curve_value: f64, rel_sd: f64, rng: &mut seed::Rng) -> f64 {
    if rel_sd == 0.0 {
        return curve_value;
    }
    let eps: f64 = Normal::new(0.0, rel_sd).unwrap().sample(rng);
    curve_value * (1.0 + eps)
}

/// Minimum realisable time constant, ms.
const MIN_TAU: f64 = 0.05;

/// One write of a neuron's DACs: every parameter lands on its transfer curve
/// with fresh trial noise. `tau_ref` and `C_m` are not programmable and keep
/// their target values.
pub fn realize_neuron(
    phys: &SubstratePhysiology,
    circuit: usize,
    dacs: &[u16; 7],
    targets: &NeuronTargets,
    variation: &VariationSpec,
    rng: &mut seed::Rng,
) -> NeuronParams {
    let mut p = NeuronParams::from_targets(targets);
    for param in Param::ALL {
        let hw = realize(
            phys.curve(circuit, param)
                .value(f64::from(dacs[param.index()])),
            variation.get(param),
            rng,
        );
        let mut bio = param.from_hw(hw);
        if !param.is_voltage() {
            bio = bio.max(MIN_TAU);
        }
        p.set(param, bio);
    }
    p
}

/// Draws trial-to-trial noise for every neuron parameter and synapse.
pub fn configure(
    phys: &SubstratePhysiology,
    cfg: &HardwareNetworkConfig,
    targets: &NeuronTargets,
    variation: &VariationSpec,
    trial_seed: u64,
) -> Result<ConfiguredNetwork, SubstrateError> {
    cfg.validate()?;
    variation.validate()?;
    if cfg.fab_seed != phys.fab_seed {
        return Err(SubstrateError::SeedMismatch {
            expected: phys.fab_seed,
            found: cfg.fab_seed,
        });
    }
    let mut neurons = Vec::with_capacity(cfg.n_neurons());
    for (j, (&circuit, dacs)) in cfg.placement.iter().zip(&cfg.neuron_dacs).enumerate() {
        let circuit = circuit as usize;
        if circuit >= phys.len() {
            return Err(SubstrateError::Config(format!(
                "circuit {circuit} not fabricated"
            )));
        }
        let mut rng = seed::rng(seed::derive_index(
            seed::derive(trial_seed, "neurons"),
            j as u64,
        ));
        neurons.push(realize_neuron(
            phys, circuit, dacs, targets, variation, &mut rng,
        ));
    }
    let n_in = cfg.n_inputs();
    let mut incoming = vec![Vec::new(); cfg.n_neurons()];
    let mut rng = seed::rng(seed::derive(trial_seed, "synapses"));
    let syn_noise = Normal::new(0.0, variation.synapse.max(f64::MIN_POSITIVE)).unwrap();
    for s in &cfg.synapses {
        // one draw per entry keeps streams aligned across weight changes
        let eps: f64 = if variation.synapse > 0.0 {
            syn_noise.sample(&mut rng)
        } else {
            0.0
        };
        if !s.enabled || s.hw_weight == 0 {
            continue;
        }
        let g = (f64::from(s.hw_weight) * cfg.g_unit * (1.0 + eps)).max(0.0);
        incoming[s.post as usize - n_in].push(Incoming {
            source: s.pre,
            g,
            excitatory: s.sign == SynapseSign::Excitatory,
        });
    }
    Ok(ConfiguredNetwork {
        n_inputs: n_in,
        neurons,
        incoming,
        layer_ranges: cfg.layer_ranges(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::physiology::{fabricate, nominal_dac};

    fn tiny(phys: &SubstratePhysiology, weights: &[(u32, u32, i32)]) -> HardwareNetworkConfig {
        let dacs = Param::ALL.map(nominal_dac);
        let mut synapses = Vec::new();
        for &(pre, post, w) in weights {
            let sign = if w < 0 {
                SynapseSign::Inhibitory
            } else {
                SynapseSign::Excitatory
            };
            for s in [SynapseSign::Excitatory, SynapseSign::Inhibitory] {
                synapses.push(SynapseEntry {
                    pre,
                    post,
                    hw_weight: if s == sign { w.unsigned_abs() as u8 } else { 0 },
                    sign: s,
                    enabled: s == sign,
                });
            }
        }
        HardwareNetworkConfig {
            layer_sizes: vec![2, 2],
            placement: vec![0, 1],
            neuron_dacs: vec![dacs; 2],
            synapses,
            g_unit: 2.0,
            fab_seed: phys.fab_seed,
        }
    }

    #[test]
    fn noiseless_configuration_reads_the_curves() {
        let phys = fabricate(4, 9, 0.3).unwrap();
        let cfg = tiny(&phys, &[(0, 2, 3), (1, 3, -15)]);
        let net = configure(
            &phys,
            &cfg,
            &NeuronTargets::default(),
            &VariationSpec::none(),
            1,
        )
        .unwrap();
        for param in Param::ALL {
            let hw = phys
                .curve(1, param)
                .value(f64::from(cfg.neuron_dacs[1][param.index()]));
            assert!((net.neurons[1].get(param) - param.from_hw(hw)).abs() < 1e-12);
        }
        assert_eq!(net.incoming[0][0].g, 6.0);
        assert!(!net.incoming[1][0].excitatory);
        assert_eq!(net.incoming[1][0].g, 30.0);
    }

    #[test]
    fn zero_weight_has_no_conductance() {
        let phys = fabricate(4, 9, 0.3).unwrap();
        let cfg = tiny(&phys, &[(0, 2, 0), (1, 3, 0)]);
        let net = configure(
            &phys,
            &cfg,
            &NeuronTargets::default(),
            &VariationSpec::default(),
            5,
        )
        .unwrap();
        assert!(net.incoming.iter().all(Vec::is_empty));
    }

    #[test]
    fn trial_noise_on_tau_syn_is_ten_percent() {
        let phys = fabricate(2, 9, 0.0).unwrap();
        let cfg = tiny(&phys, &[]);
        let v: Vec<f64> = (0..1000)
            .map(|t| {
                configure(
                    &phys,
                    &cfg,
                    &NeuronTargets::default(),
                    &VariationSpec::default(),
                    t,
                )
                .unwrap()
                .neurons[0]
                    .tau_syn
            })
            .collect();
        let mean = v.iter().sum::<f64>() / 1000.0;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((sd / mean - 0.10).abs() < 0.01, "{}", sd / mean);
    }

    #[test]
    fn validation_catches_broken_configs() {
        let phys = fabricate(4, 9, 0.3).unwrap();
        let good = tiny(&phys, &[(0, 2, 3)]);
        good.validate().unwrap();

        let mut both = good.clone();
        both.synapses[1].enabled = true;
        both.synapses[1].hw_weight = 2;
        assert!(both.validate().is_err());

        let mut heavy = good.clone();
        heavy.synapses[0].hw_weight = 16;
        assert!(heavy.validate().is_err());

        let mut backwards = good.clone();
        backwards.synapses[0].post = 0;
        assert!(backwards.validate().is_err());

        let mut shared = good.clone();
        shared.placement = vec![3, 3];
        assert!(shared.validate().is_err());

        let other = fabricate(4, 10, 0.3).unwrap();
        assert!(matches!(
            configure(
                &other,
                &good,
                &NeuronTargets::default(),
                &VariationSpec::none(),
                0
            ),
            Err(SubstrateError::SeedMismatch { .. })
        ));
    }

    #[test]
    fn config_round_trips_through_bytes() {
        let phys = fabricate(4, 9, 0.3).unwrap();
        let cfg = tiny(&phys, &[(0, 2, 3), (1, 3, -7), (0, 3, 0)]);
        assert_eq!(HardwareNetworkConfig::decode(&cfg.encode()).unwrap(), cfg);
        assert!(HardwareNetworkConfig::decode(&cfg.encode()[..10]).is_err());
    }
}
