//! Conversion of software weights to a substrate configuration and
//! hardware-in-the-loop training.
//!
//! The trainer keeps full-precision shadow weights. Each iteration writes
//! their 4-bit quantisation to the substrate (with fresh trial noise),
//! measures firing rates for a batch, substitutes the rates for the ReLU
//! activations in the software backward pass and updates the shadow copy.

use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{tune_g_unit, CalibrationError, CalibrationStore, GUnitTuning};
use crate::dataset::{BatchIndices, DatasetSplit, Image};
use crate::relu_net::{
    argmax, backward_masked, forward, step, Activations, HyperParams, MLPWeights, Matrix, NetError,
    Topology,
};
use crate::seed;
use crate::substrate::encode::{encode_rates, NU_TOT};
use crate::substrate::{
    configure, rates_from_record, run_rates, ConfiguredNetwork, HardwareNetworkConfig,
    NeuronTargets, SimParams, SubstrateError, SubstratePhysiology, SynapseEntry, SynapseSign,
    VariationSpec, MAX_HW_WEIGHT,
};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("weight {0} outside [-1, 1]")]
    WeightRange(f64),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error("{needed} logical neurons do not fit on {available} circuits")]
    Capacity { needed: usize, available: usize },
    #[error("invalid ITL configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// `round(|w| · 15)` with halves rounded away from zero; positive weights
/// are excitatory, zero and negative ones inhibitory-or-off.
pub fn quantize(w: f64) -> Result<(u8, SynapseSign), LoopError> {
    if !(w.abs() <= 1.0) {
        return Err(LoopError::WeightRange(w));
    }
    let hw = (w.abs() * f64::from(MAX_HW_WEIGHT)).round() as u8;
    let sign = if w >= 0.0 {
        SynapseSign::Excitatory
    } else {
        SynapseSign::Inhibitory
    };
    Ok((hw, sign))
}

/// Signed hardware weight, `-15..=15`.
pub fn quantize_signed(w: f64) -> Result<i32, LoopError> {
    let (hw, sign) = quantize(w)?;
    Ok(match sign {
        SynapseSign::Excitatory => i32::from(hw),
        SynapseSign::Inhibitory => -i32::from(hw),
    })
}

/// Random placement of logical neurons on distinct circuits.
pub fn place(n_neurons: usize, n_circuits: usize, seed: u64) -> Result<Vec<u32>, LoopError> {
    if n_neurons > n_circuits {
        return Err(LoopError::Capacity {
            needed: n_neurons,
            available: n_circuits,
        });
    }
    let mut rng = seed::rng(seed);
    Ok(sample(&mut rng, n_circuits, n_neurons)
        .into_iter()
        .map(|i| i as u32)
        .collect())
}

/// Twin synapse entries for every pair of neurons in consecutive layers,
/// excitatory entry first.
fn synapses(w: &MLPWeights) -> Result<Vec<SynapseEntry>, LoopError> {
    let mut out = Vec::new();
    let mut pre_offset = 0u32;
    for m in &w.layers {
        let post_offset = pre_offset + m.cols as u32;
        for r in 0..m.rows {
            for c in 0..m.cols {
                let (hw, sign) = quantize(m.get(r, c))?;
                for twin in [SynapseSign::Excitatory, SynapseSign::Inhibitory] {
                    out.push(SynapseEntry {
                        pre: pre_offset + c as u32,
                        post: post_offset + r as u32,
                        hw_weight: if twin == sign { hw } else { 0 },
                        sign: twin,
                        enabled: twin == sign,
                    });
                }
            }
        }
        pre_offset = post_offset;
    }
    Ok(out)
}

/// Builds the substrate configuration for `w`: calibrated DACs for the
/// targets on the placed circuits and quantised twin synapses.
pub fn convert(
    w: &MLPWeights,
    phys: &SubstratePhysiology,
    store: &CalibrationStore,
    targets: &NeuronTargets,
    placement: &[u32],
    g_unit: f64,
) -> Result<HardwareNetworkConfig, LoopError> {
    store.check(phys)?;
    let topology = w.topology();
    let n: usize = topology.layer_sizes[1..].iter().sum();
    if placement.len() != n {
        return Err(LoopError::Topology(format!(
            "{} placements for {n} neurons",
            placement.len()
        )));
    }
    let neuron_dacs = placement
        .iter()
        .map(|c| store.dacs_for(*c as usize, targets))
        .collect();
    let cfg = HardwareNetworkConfig {
        layer_sizes: topology.layer_sizes,
        placement: placement.to_vec(),
        neuron_dacs,
        synapses: synapses(w)?,
        g_unit,
        fab_seed: phys.fab_seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Same neurons and wiring, synapse weights re-derived from `w`.
pub fn requantize(
    cfg: &HardwareNetworkConfig,
    w: &MLPWeights,
) -> Result<HardwareNetworkConfig, LoopError> {
    if w.topology().layer_sizes != cfg.layer_sizes {
        return Err(LoopError::Topology(
            "weights do not match the configured layers".into(),
        ));
    }
    Ok(HardwareNetworkConfig {
        synapses: synapses(w)?,
        ..cfg.clone()
    })
}

/// Signed hardware weights per projection, `[post][pre]` like the software
/// matrices.
pub fn hw_weights(cfg: &HardwareNetworkConfig) -> Vec<Vec<Vec<i32>>> {
    let nodes = cfg.node_ranges();
    let mut out: Vec<Vec<Vec<i32>>> = cfg
        .layer_sizes
        .windows(2)
        .map(|p| vec![vec![0; p[0]]; p[1]])
        .collect();
    for s in &cfg.synapses {
        let post = s.post as usize;
        let Some(layer) = nodes.iter().position(|r| r.contains(&post)) else {
            continue;
        };
        if layer == 0 {
            continue;
        }
        let pre = s.pre as usize - nodes[layer - 1].start;
        out[layer - 1][post - nodes[layer].start][pre] += s.signed_weight();
    }
    out
}

/// Substrate, calibration targets and presentation timing used for every
/// hardware run.
#[derive(Debug, Clone)]
pub struct Hardware {
    pub phys: SubstratePhysiology,
    pub targets: NeuronTargets,
    pub variation: VariationSpec,
    pub sim: SimParams,
    pub nu_tot: f64,
}

impl Hardware {
    pub fn new(phys: SubstratePhysiology) -> Self {
        Self {
            phys,
            targets: NeuronTargets::default(),
            variation: VariationSpec::default(),
            sim: SimParams::default(),
            nu_tot: NU_TOT,
        }
    }

    pub fn configure(
        &self,
        cfg: &HardwareNetworkConfig,
        trial_seed: u64,
    ) -> Result<ConfiguredNetwork, LoopError> {
        Ok(configure(
            &self.phys,
            cfg,
            &self.targets,
            &self.variation,
            trial_seed,
        )?)
    }

    pub fn input_rates(&self, images: &[&Image]) -> Vec<Vec<f64>> {
        images
            .iter()
            .map(|i| encode_rates(&i.input(), self.nu_tot))
            .collect()
    }

    /// Tunes `g_unit` on probe images and returns the updated configuration.
    pub fn tune(
        &self,
        cfg: &HardwareNetworkConfig,
        probe: &[&Image],
        seed: u64,
    ) -> Result<(HardwareNetworkConfig, GUnitTuning), LoopError> {
        let t = tune_g_unit(
            &self.phys,
            cfg,
            &self.targets,
            &self.variation,
            &self.input_rates(probe),
            &self.sim,
            seed,
        )?;
        Ok((
            HardwareNetworkConfig {
                g_unit: t.g_unit,
                ..cfg.clone()
            },
            t,
        ))
    }
}

/// Measured activities of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HwSample {
    /// Pixels, then rate / divisor for every later layer.
    pub activations: Activations,
    pub label_rates: Vec<f64>,
}

/// Runs `images` on a configured network. Input activities are the pixel
/// values; every neuron layer reports its rate divided by `rate_divisor`.
pub fn forward_hw(
    hw: &Hardware,
    net: &ConfiguredNetwork,
    images: &[&Image],
    rate_divisor: f64,
    input_seed: u64,
) -> Result<Vec<HwSample>, LoopError> {
    let rec = run_rates(net, &hw.input_rates(images), &hw.sim, input_seed)?;
    Ok(rates_from_record(&rec)
        .into_iter()
        .zip(images)
        .map(|(layers, img)| {
            let label_rates = layers.last().cloned().unwrap_or_default();
            let mut acts = vec![img.input()];
            acts.extend(
                layers
                    .into_iter()
                    .map(|l| l.into_iter().map(|r| r / rate_divisor).collect()),
            );
            HwSample {
                activations: Activations { layers: acts },
                label_rates,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialNoisePolicy {
    /// Every reconfiguration redraws neuron and synapse noise.
    RedrawAll,
    /// Neuron parameters, whose DACs never change during training, keep the
    /// noise of the first write; synapse noise is redrawn at every write.
    RedrawSynapses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScale {
    /// Cost summed over the batch, as in software training.
    Sum,
    /// Cost averaged over the batch.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMask {
    /// A unit passes gradient when its measured rate is positive.
    Measured,
    /// ... or when the shadow network's ReLU is active for the same input,
    /// so silent units can be pulled back into their working range.
    MeasuredOrShadow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ITLConfig {
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Rate in Hz that corresponds to a ReLU activity of 1.
    pub rate_divisor: f64,
    /// Test images evaluated at each evaluation point.
    pub eval_subset: usize,
    /// Evaluate the test subset every this many iterations (and at the end).
    pub eval_every: usize,
    pub trial_noise: TrialNoisePolicy,
    pub gradient: GradientScale,
    pub mask: DerivativeMask,
    /// Set by the caller, not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ITLConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            gamma: 0.0,
            lambda: 0.001,
            batch_size: 1200,
            iterations: 60,
            rate_divisor: 30.0,
            eval_subset: 1000,
            eval_every: 5,
            trial_noise: TrialNoisePolicy::RedrawSynapses,
            gradient: GradientScale::Mean,
            mask: DerivativeMask::MeasuredOrShadow,
            seed: 0,
        }
    }
}

impl ITLConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: &str| Err(LoopError::Config(m.into()));
        if !(self.eta >= 0.0) || !(0.0..1.0).contains(&self.gamma) || !(self.lambda >= 0.0) {
            return bad("need eta >= 0, gamma in [0, 1), lambda >= 0");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch size and evaluation interval must be >= 1");
        }
        if !(self.rate_divisor > 0.0) {
            return bad("rate divisor must be > 0");
        }
        Ok(())
    }

    fn hyper(&self) -> HyperParams {
        HyperParams {
            eta: self.eta,
            gamma: self.gamma,
            lambda: self.lambda,
            batch_size: self.batch_size,
            steps: self.iterations,
        }
    }
}

/// Shadow weights with their momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowState {
    pub weights: MLPWeights,
    pub velocity: MLPWeights,
    pub iteration: usize,
}

impl ShadowState {
    pub fn new(weights: MLPWeights) -> Self {
        let velocity = MLPWeights::zeros(&weights.topology());
        Self {
            weights,
            velocity,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ITLPoint {
    pub iteration: usize,
    pub batch_accuracy: f64,
    /// Empty when the test subset was not evaluated at this iteration.
    pub test_accuracy_subset: Option<f64>,
    pub mean_label_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ITLMetrics {
    pub points: Vec<ITLPoint>,
}

impl ITLMetrics {
    pub fn evaluated(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.points
            .iter()
            .filter_map(|p| p.test_accuracy_subset.map(|a| (p.iteration, a)))
    }

    pub fn conversion_accuracy(&self) -> Option<f64> {
        self.points.first().and_then(|p| p.test_accuracy_subset)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.evaluated().last().map(|p| p.1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LoopError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "batch_accuracy",
            "test_accuracy_subset",
            "mean_label_rate_hz",
        ])?;
        for p in &self.points {
            w.write_record(&[
                p.iteration.to_string(),
                format!("{:.6}", p.batch_accuracy),
                p.test_accuracy_subset
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_default(),
                format!("{:.6}", p.mean_label_rate_hz),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn accuracy_of(samples: &[HwSample], images: &[&Image]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let correct = samples
        .iter()
        .zip(images)
        .filter(|(s, img)| argmax(&s.label_rates) == img.class)
        .count();
    let rate = samples.iter().flat_map(|s| &s.label_rates).sum::<f64>()
        / samples
            .iter()
            .map(|s| s.label_rates.len())
            .sum::<usize>()
            .max(1) as f64;
    (correct as f64 / samples.len() as f64, rate)
}

/// Accuracy and mean label rate (Hz) of a configured network on `images`.
pub fn evaluate_net(
    hw: &Hardware,
    net: &ConfiguredNetwork,
    images: &[&Image],
    input_seed: u64,
) -> Result<(f64, f64), LoopError> {
    let samples = forward_hw(hw, net, images, 1.0, input_seed)?;
    Ok(accuracy_of(&samples, images))
}

/// [`evaluate_net`] on a fresh write of `cfg`.
pub fn evaluate_hw(
    hw: &Hardware,
    cfg: &HardwareNetworkConfig,
    images: &[&Image],
    trial_seed: u64,
    input_seed: u64,
) -> Result<(f64, f64), LoopError> {
    evaluate_net(hw, &hw.configure(cfg, trial_seed)?, images, input_seed)
}

/// Fixed evaluation subset of the test set.
pub fn eval_subset(split: &DatasetSplit, size: usize, seed: u64) -> Vec<usize> {
    let n = split.test.len();
    if size >= n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut seed::rng(seed), n, size).into_vec();
    idx.sort_unstable();
    idx
}

/// One update from measured activities: backward pass with measured rates
/// in place of ReLU outputs, momentum step, clipping.
pub fn itl_step(state: &mut ShadowState, samples: &[HwSample], labels: &[usize], cfg: &ITLConfig) {
    let batch: Vec<(Activations, usize)> = samples
        .iter()
        .zip(labels)
        .map(|(s, l)| (s.activations.clone(), *l))
        .collect();
    let masks: Vec<Vec<Vec<bool>>> = batch
        .iter()
        .map(|(acts, _)| {
            let shadow = forward(&state.weights, &acts.layers[0]);
            acts.layers[1..]
                .iter()
                .zip(&shadow.layers[1..])
                .map(|(m, s)| {
                    m.iter()
                        .zip(s)
                        .map(|(a, b)| {
                            *a > 0.0 || (cfg.mask == DerivativeMask::MeasuredOrShadow && *b > 0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let grad = match cfg.gradient {
        GradientScale::Sum => backward_masked(&state.weights, &batch, &masks, cfg.lambda, 1.0),
        GradientScale::Mean => {
            // data term averaged, weight decay kept at full strength
            let mut g = backward_masked(&state.weights, &batch, &masks, 0.0, 1.0);
            let n = batch.len().max(1) as f64;
            for (g, w) in g.iter_mut().zip(state.weights.iter()) {
                *g = *g / n + cfg.lambda * w;
            }
            g
        }
    };
    step(&mut state.weights, &mut state.velocity, &grad, &cfg.hyper());
    state.iteration += 1;
}

#[derive(Debug, Clone)]
pub struct ITLOutcome {
    pub state: ShadowState,
    pub metrics: ITLMetrics,
    pub initial: HardwareNetworkConfig,
    pub last: HardwareNetworkConfig,
}

/// Trial seed of the configuration written at `iteration`.
pub fn trial_seed(cfg: &ITLConfig, iteration: usize) -> u64 {
    let it = match cfg.trial_noise {
        TrialNoisePolicy::RedrawAll => iteration,
        TrialNoisePolicy::RedrawSynapses => 0,
    };
    seed::derive(cfg.seed, &format!("itl/trial/{it}"))
}

/// Network as written at `iteration` under the configured noise policy.
pub fn configure_iteration(
    hw: &Hardware,
    hw_cfg: &HardwareNetworkConfig,
    cfg: &ITLConfig,
    iteration: usize,
) -> Result<ConfiguredNetwork, LoopError> {
    let mut net = hw.configure(hw_cfg, trial_seed(cfg, iteration))?;
    if cfg.trial_noise == TrialNoisePolicy::RedrawSynapses {
        let fresh = hw.configure(
            hw_cfg,
            seed::derive(cfg.seed, &format!("itl/trial/{iteration}")),
        )?;
        net.incoming = fresh.incoming;
    }
    Ok(net)
}

/// Runs `cfg.iterations` in-the-loop updates starting from `state`, with the
/// neuron setup of `template`. Iteration 0 measures the converted network
/// before any update.
pub fn train_itl(
    mut state: ShadowState,
    template: &HardwareNetworkConfig,
    split: &DatasetSplit,
    hw: &Hardware,
    cfg: &ITLConfig,
) -> Result<ITLOutcome, LoopError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(LoopError::Config("empty training set".into()));
    }
    let subset_idx = eval_subset(
        split,
        cfg.eval_subset,
        seed::derive(cfg.seed, "eval/subset"),
    );
    let subset: Vec<&Image> = subset_idx.iter().map(|&i| &split.test[i]).collect();
    let mut batches = BatchIndices::new(
        split.train.len(),
        cfg.batch_size,
        seed::derive(cfg.seed, "itl/batches"),
    );
    let initial = requantize(template, &state.weights)?;
    let mut metrics = ITLMetrics::default();
    let mut last = initial.clone();
    for it in 0..=cfg.iterations {
        let hw_cfg = requantize(template, &state.weights)?;
        let net = configure_iteration(hw, &hw_cfg, cfg, it)?;
        let iter_seed = seed::derive(cfg.seed, &format!("itl/inputs/{it}"));
        let idx = batches.next().expect("non-empty training set");
        let images: Vec<&Image> = idx.iter().map(|&i| &split.train[i]).collect();
        let samples = forward_hw(
            hw,
            &net,
            &images,
            cfg.rate_divisor,
            seed::derive(iter_seed, "batch"),
        )?;
        let (batch_accuracy, mean_label_rate_hz) = {
            let (a, r) = accuracy_of(&samples, &images);
            (a, r)
        };
        let test_accuracy_subset = if it % cfg.eval_every == 0 || it == cfg.iterations {
            let eval = forward_hw(hw, &net, &subset, 1.0, seed::derive(iter_seed, "eval"))?;
            Some(accuracy_of(&eval, &subset).0)
        } else {
            None
        };
        metrics.points.push(ITLPoint {
            iteration: it,
            batch_accuracy,
            test_accuracy_subset,
            mean_label_rate_hz,
        });
        last = hw_cfg;
        if it == cfg.iterations {
            break;
        }
        let labels: Vec<usize> = images.iter().map(|i| i.class).collect();
        itl_step(&mut state, &samples, &labels, cfg);
    }
    Ok(ITLOutcome {
        state,
        metrics,
        initial,
        last,
    })
}

/// Signed weight range of the migration histogram, `-15..=15`.
pub const MIGRATION_BINS: usize = 2 * MAX_HW_WEIGHT as usize + 1;

/// `counts[before + 15][after + 15]` for one projection; the (0, 0) cell is
/// always zero.
pub type MigrationHistogram = [[u32; MIGRATION_BINS]; MIGRATION_BINS];

pub fn weight_migration(
    before: &HardwareNetworkConfig,
    after: &HardwareNetworkConfig,
) -> Result<Vec<MigrationHistogram>, LoopError> {
    if before.layer_sizes != after.layer_sizes {
        return Err(LoopError::Topology(
            "configurations have different layers".into(),
        ));
    }
    let off = i32::from(MAX_HW_WEIGHT);
    Ok(hw_weights(before)
        .iter()
        .zip(hw_weights(after))
        .map(|(b, a)| {
            let mut h = [[0u32; MIGRATION_BINS]; MIGRATION_BINS];
            for (rb, ra) in b.iter().zip(&a) {
                for (&x, &y) in rb.iter().zip(ra) {
                    if x != 0 || y != 0 {
                        h[(x + off) as usize][(y + off) as usize] += 1;
                    }
                }
            }
            h
        })
        .collect())
}

/// Fraction of counted pairs with `|after - before| <= band`.
pub fn near_diagonal_fraction(hists: &[MigrationHistogram], band: usize) -> f64 {
    let (mut near, mut total) = (0u64, 0u64);
    for h in hists {
        for (i, row) in h.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                total += u64::from(c);
                if i.abs_diff(j) <= band {
                    near += u64::from(c);
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        near as f64 / total as f64
    }
}

/// Long-format CSV: `projection,before,after,count`, nonzero cells only.
pub fn write_migration_csv<W: Write>(
    hists: &[MigrationHistogram],
    out: W,
) -> Result<(), LoopError> {
    let off = i32::from(MAX_HW_WEIGHT);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["projection", "before", "after", "count"])?;
    for (p, h) in hists.iter().enumerate() {
        for (i, row) in h.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    w.write_record(&[
                        p.to_string(),
                        (i as i32 - off).to_string(),
                        (j as i32 - off).to_string(),
                        c.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Matrix of shadow weights reconstructed from a configuration, `hw / 15`.
pub fn dequantize(cfg: &HardwareNetworkConfig) -> Result<MLPWeights, LoopError> {
    let topology = Topology::new(cfg.layer_sizes.clone())?;
    let mut w = MLPWeights::zeros(&topology);
    for (m, hw) in w.layers.iter_mut().zip(hw_weights(cfg)) {
        *m = Matrix {
            rows: m.rows,
            cols: m.cols,
            data: hw
                .iter()
                .flatten()
                .map(|v| f64::from(*v) / f64::from(MAX_HW_WEIGHT))
                .collect(),
        };
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate_all, CalibOptions};
    use crate::relu_net::{cost, init_weights};
    use crate::substrate::fabricate;
    use num_bigint::BigInt;

    fn grid() -> impl Iterator<Item = (i64, f64)> {
        (-1000i64..=1000).map(|k| (k, k as f64 / 1000.0))
    }

    /// Half-away rounding of `|k| · 15 / 1000` in exact integer arithmetic.
    fn reference(k: i64) -> u8 {
        let num = BigInt::from(2 * 15 * k.abs() + 1000);
        let q: BigInt = num / BigInt::from(2000);
        u8::try_from(q).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(1.0).unwrap(), (15, SynapseSign::Excitatory));
        assert_eq!(quantize(0.0).unwrap(), (0, SynapseSign::Excitatory));
        assert_eq!(quantize(-0.5).unwrap(), (8, SynapseSign::Inhibitory));
        assert_eq!(quantize(0.03).unwrap(), (0, SynapseSign::Excitatory));
        assert!(quantize(1.0001).is_err());
        assert!(quantize(f64::NAN).is_err());
    }

    #[test]
    fn quantize_matches_integer_reference_on_grid() {
        for (k, w) in grid() {
            let (hw, sign) = quantize(w).unwrap();
            assert_eq!(hw, reference(k), "w = {w}");
            let expected = if k >= 0 {
                SynapseSign::Excitatory
            } else {
                SynapseSign::Inhibitory
            };
            assert_eq!(sign, expected, "w = {w}");
            assert_eq!(quantize_signed(-w).unwrap(), -quantize_signed(w).unwrap());
        }
    }

    proptest::proptest! {
        #[test]
        fn quantizer_is_odd(w in -1.0f64..=1.0) {
            proptest::prop_assert_eq!(quantize_signed(-w).unwrap(), -quantize_signed(w).unwrap());
            proptest::prop_assert_eq!(quantize(-w).unwrap().0, quantize(w).unwrap().0);
        }
    }

    fn small_store(n: usize) -> (SubstratePhysiology, CalibrationStore) {
        let phys = fabricate(n, 5, 0.3).unwrap();
        let opts = CalibOptions {
            variation: VariationSpec::none(),
            repeats: 1,
            ..Default::default()
        };
        let store = calibrate_all(&phys, &opts).unwrap();
        (phys, store)
    }

    fn weights_on_grid(t: &Topology, seed: u64) -> MLPWeights {
        let mut w = init_weights(t, seed);
        for x in w.iter_mut() {
            *x = (*x * 15.0).round().clamp(-15.0, 15.0) / 15.0;
        }
        w
    }

    #[test]
    fn default_topology_twin_synapse_count() {
        let t = Topology::default();
        let n: usize = t.layer_sizes[1..].iter().sum();
        let (phys, store) = small_store(n);
        let w = init_weights(&t, 1);
        let placement: Vec<u32> = (0..n as u32).collect();
        let cfg = convert(
            &w,
            &phys,
            &store,
            &NeuronTargets::default(),
            &placement,
            1.0,
        )
        .unwrap();
        // 100·15 + 15·15 + 15·5 = 1800 pairs
        assert_eq!(cfg.synapses.len(), 3600);
        assert_eq!(cfg.synapse_budget(), 3600);
        // twins: at most one of each pair carries weight
        for pair in cfg.synapses.chunks(2) {
            assert_eq!(pair[0].pre, pair[1].pre);
            assert_eq!(pair[0].post, pair[1].post);
            assert!(pair[0].hw_weight == 0 || pair[1].hw_weight == 0);
        }
    }

    #[test]
    fn conversion_round_trips_grid_weights_and_zero_is_silent() {
        let t = Topology::new(vec![100, 6, 5]).unwrap();
        let (phys, store) = small_store(11);
        let placement: Vec<u32> = (0..11).collect();
        let targets = NeuronTargets::default();
        let w = weights_on_grid(&t, 3);
        let cfg = convert(&w, &phys, &store, &targets, &placement, 1.0).unwrap();
        assert_eq!(dequantize(&cfg).unwrap(), w);
        assert_eq!(requantize(&cfg, &dequantize(&cfg).unwrap()).unwrap(), cfg);

        let zero = MLPWeights::zeros(&t);
        let cfg = convert(&zero, &phys, &store, &targets, &placement, 1.0).unwrap();
        assert!(hw_weights(&cfg).iter().flatten().flatten().all(|v| *v == 0));
        // with trial noise a resting level above threshold fires on its own
        let mut hw = Hardware::new(phys);
        hw.variation = VariationSpec::none();
        hw.sim.t_on = 200.0;
        let net = hw.configure(&cfg, 9).unwrap();
        let img = Image {
            pixels: [0.5; crate::dataset::PIXELS],
            digit: 0,
            class: 0,
        };
        let out = forward_hw(&hw, &net, &[&img], 30.0, 4).unwrap();
        assert!(out[0].activations.layers[1..]
            .iter()
            .flatten()
            .all(|a| *a == 0.0));
        assert_eq!(out[0].activations.layers[0], img.input());
    }

    #[test]
    fn convert_rejects_foreign_store() {
        let t = Topology::new(vec![100, 3, 2]).unwrap();
        let (_, store) = small_store(5);
        let other = fabricate(5, 6, 0.3).unwrap();
        let w = MLPWeights::zeros(&t);
        let placement: Vec<u32> = (0..5).collect();
        assert!(convert(
            &w,
            &other,
            &store,
            &NeuronTargets::default(),
            &placement,
            1.0
        )
        .is_err());
    }

    #[test]
    fn placement_is_distinct_and_bounded() {
        let p = place(35, 512, 3).unwrap();
        let mut s = p.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 35);
        assert!(p.iter().all(|c| *c < 512));
        assert_eq!(p, place(35, 512, 3).unwrap());
        assert!(matches!(
            place(513, 512, 0),
            Err(LoopError::Capacity { .. })
        ));
    }

    fn static_batch(w: &MLPWeights) -> (Vec<HwSample>, Vec<usize>) {
        // activities from the software forward pass stand in for a frozen
        // substrate response
        let mut rng = seed::rng(11);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let x: Vec<f64> = (0..w.layers[0].cols)
                .map(|_| rand::Rng::random::<f64>(&mut rng))
                .collect();
            let acts = crate::relu_net::forward(w, &x);
            samples.push(HwSample {
                label_rates: acts.output().iter().map(|a| a * 30.0).collect(),
                activations: acts,
            });
            labels.push(i % 5);
        }
        (samples, labels)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let t = Topology::new(vec![100, 15, 15, 5]).unwrap();
        let w = init_weights(&t, 2);
        let (samples, labels) = static_batch(&w);
        let mut state = ShadowState::new(w.clone());
        let cfg = ITLConfig {
            eta: 0.0,
            ..Default::default()
        };
        itl_step(&mut state, &samples, &labels, &cfg);
        assert_eq!(state.weights, w);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn small_step_reduces_cost_on_static_activations() {
        let t = Topology::new(vec![100, 15, 15, 5]).unwrap();
        let w = init_weights(&t, 4);
        let (samples, labels) = static_batch(&w);
        let batch: Vec<(Activations, usize)> = samples
            .iter()
            .zip(&labels)
            .map(|(s, l)| (s.activations.clone(), *l))
            .collect();
        for gradient in [GradientScale::Sum, GradientScale::Mean] {
            let cfg = ITLConfig {
                eta: 1e-4,
                gradient,
                ..Default::default()
            };
            let mut state = ShadowState::new(w.clone());
            itl_step(&mut state, &samples, &labels, &cfg);
            let before = cost(&w, &batch, cfg.lambda, 1.0);
            let after = cost(&state.weights, &batch, cfg.lambda, 1.0);
            assert!(after < before, "{gradient:?}: {after} >= {before}");
        }
    }

    #[test]
    fn shadow_mask_reaches_silent_units() {
        let t = Topology::new(vec![100, 15, 15, 5]).unwrap();
        let w = init_weights(&t, 6);
        let (mut samples, labels) = static_batch(&w);
        // the substrate answered with silence everywhere past the input
        for s in &mut samples {
            for l in &mut s.activations.layers[1..] {
                l.iter_mut().for_each(|a| *a = 0.0);
            }
        }
        let base = ITLConfig {
            lambda: 0.0,
            mask: DerivativeMask::Measured,
            ..Default::default()
        };
        let mut measured = ShadowState::new(w.clone());
        itl_step(&mut measured, &samples, &labels, &base);
        assert_eq!(measured.weights, w);
        let mut shadow = ShadowState::new(w.clone());
        let cfg = ITLConfig {
            mask: DerivativeMask::MeasuredOrShadow,
            ..base
        };
        itl_step(&mut shadow, &samples, &labels, &cfg);
        // measured hidden activity is zero, so only the first projection can
        // move; it does because shadow-active units carry the error back
        assert_ne!(shadow.weights.layers[0], w.layers[0]);
        assert_eq!(shadow.weights.layers[1..], w.layers[1..]);
    }

    #[test]
    fn migration_diagonal_and_antidiagonal() {
        let t = Topology::new(vec![100, 6, 5]).unwrap();
        let (phys, store) = small_store(11);
        let placement: Vec<u32> = (0..11).collect();
        let targets = NeuronTargets::default();
        let w = weights_on_grid(&t, 8);
        let a = convert(&w, &phys, &store, &targets, &placement, 1.0).unwrap();
        let mut neg = w.clone();
        for x in neg.iter_mut() {
            *x = -*x;
        }
        let b = requantize(&a, &neg).unwrap();
        let off = MAX_HW_WEIGHT as usize;
        let same = weight_migration(&a, &a).unwrap();
        let flip = weight_migration(&a, &b).unwrap();
        assert_eq!(same.len(), 2);
        for (s, f) in same.iter().zip(&flip) {
            assert_eq!(s[off][off], 0);
            let total: u32 = s.iter().flatten().sum();
            assert!(total > 0);
            assert_eq!((0..MIGRATION_BINS).map(|i| s[i][i]).sum::<u32>(), total);
            assert_eq!(
                (0..MIGRATION_BINS)
                    .map(|i| f[i][MIGRATION_BINS - 1 - i])
                    .sum::<u32>(),
                total
            );
        }
        assert_eq!(near_diagonal_fraction(&same, 0), 1.0);

        let other = convert(
            &MLPWeights::zeros(&Topology::new(vec![100, 5, 6]).unwrap()),
            &phys,
            &store,
            &targets,
            &placement,
            1.0,
        )
        .unwrap();
        assert!(weight_migration(&a, &other).is_err());
    }

    #[test]
    fn migration_csv_lists_nonzero_cells() {
        let mut h = [[0u32; MIGRATION_BINS]; MIGRATION_BINS];
        h[15 + 3][15 + 4] = 7;
        let mut buf = Vec::new();
        write_migration_csv(&[h], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "projection,before,after,count\n0,3,4,7\n"
        );
    }

    #[test]
    fn metrics_csv_layout() {
        let m = ITLMetrics {
            points: vec![
                ITLPoint {
                    iteration: 0,
                    batch_accuracy: 0.5,
                    test_accuracy_subset: Some(0.25),
                    mean_label_rate_hz: 12.0,
                },
                ITLPoint {
                    iteration: 1,
                    batch_accuracy: 0.75,
                    test_accuracy_subset: None,
                    mean_label_rate_hz: 10.0,
                },
            ],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,batch_accuracy,test_accuracy_subset,mean_label_rate_hz"
        );
        assert_eq!(lines[1], "0,0.500000,0.250000,12.000000");
        assert_eq!(lines[2], "1,0.750000,,10.000000");
        assert_eq!(m.conversion_accuracy(), Some(0.25));
        assert_eq!(m.final_accuracy(), Some(0.25));
    }

    #[test]
    fn config_validation() {
        assert!(ITLConfig::default().validate().is_ok());
        for bad in [
            ITLConfig {
                rate_divisor: 0.0,
                ..Default::default()
            },
            ITLConfig {
                batch_size: 0,
                ..Default::default()
            },
            ITLConfig {
                gamma: 1.0,
                ..Default::default()
            },
            ITLConfig {
                eval_every: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn trial_seeds_follow_policy() {
        let all = ITLConfig {
            trial_noise: TrialNoisePolicy::RedrawAll,
            ..Default::default()
        };
        let keep = ITLConfig {
            trial_noise: TrialNoisePolicy::RedrawSynapses,
            ..Default::default()
        };
        assert_ne!(trial_seed(&all, 0), trial_seed(&all, 1));
        assert_eq!(trial_seed(&keep, 0), trial_seed(&keep, 7));
    }
}
