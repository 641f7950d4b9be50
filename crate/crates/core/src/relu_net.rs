//! Bias-free feed-forward ReLU network trained by mini-batch gradient
//! descent with momentum and weight clipping.
//!
//! The backward pass accepts injected activations so that the same code
//! computes updates from firing rates measured on the substrate.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, Reader, Writer};
use crate::dataset::{BatchIndices, DatasetSplit, Image};
use crate::seed;

pub const TAG_TOPOLOGY: [u8; 4] = *b"TOPO";
pub const TAG_WEIGHTS: [u8; 4] = *b"WGHT";
pub const TAG_VELOCITY: [u8; 4] = *b"VELO";
pub const TAG_META: [u8; 4] = *b"META";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid hyperparameters: {0}")]
    HyperParams(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub layer_sizes: Vec<usize>,
}

impl Default for Topology {
    /// 100 inputs, two hidden layers of 15, five label units.
    fn default() -> Self {
        Self {
            layer_sizes: vec![100, 15, 15, 5],
        }
    }
}

impl Topology {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, NetError> {
        let t = Self { layer_sizes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_sizes.len() < 2 {
            return Err(NetError::Topology(
                "need at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NetError::Topology("empty layer".into()));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight matrices.
    pub fn projections(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Output scaling of the software model: label activity divided by the
    /// size of the layer feeding the label layer.
    pub fn software_output_scale(&self) -> f64 {
        1.0 / self.layer_sizes[self.layer_sizes.len() - 2] as f64
    }
}

/// Dense row-major matrix; `rows` are post-synaptic units.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Per-projection weight matrices, `layers[n]` mapping layer `n` to `n + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MLPWeights {
    pub layers: Vec<Matrix>,
}

impl MLPWeights {
    pub fn zeros(topology: &Topology) -> Self {
        Self {
            layers: topology
                .layer_sizes
                .windows(2)
                .map(|w| Matrix::zeros(w[1], w[0]))
                .collect(),
        }
    }

    pub fn topology(&self) -> Topology {
        let mut sizes = vec![self.layers[0].cols];
        sizes.extend(self.layers.iter().map(|m| m.rows));
        Topology { layer_sizes: sizes }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|m| m.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|m| m.data.iter_mut())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn clip(&mut self) {
        for w in self.iter_mut() {
            *w = w.clamp(-1.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 0.05,
            gamma: 0.9,
            lambda: 0.001,
            batch_size: 100,
            steps: 15000,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.eta > 0.0) {
            return Err(NetError::HyperParams("eta must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(NetError::HyperParams("gamma must lie in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(NetError::HyperParams("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::HyperParams("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Layer outputs, `layers[0]` being the input and the last entry the
/// (unscaled) label-layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }
}

/// Truncated-normal initialisation: layer `n` draws from N(0, 1/N_{n-1}),
/// redrawing any sample beyond two standard deviations.
pub fn init_weights(topology: &Topology, seed: u64) -> MLPWeights {
    let mut rng = seed::rng(seed);
    let mut w = MLPWeights::zeros(topology);
    for m in &mut w.layers {
        let sigma = 1.0 / (m.cols as f64).sqrt();
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for x in &mut m.data {
            *x = loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * sigma {
                    break v;
                }
            };
        }
    }
    w.clip();
    w
}

#[inline]
fn relu(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

pub fn forward(w: &MLPWeights, input: &[f64]) -> Activations {
    let mut layers = Vec::with_capacity(w.layers.len() + 1);
    layers.push(input.to_vec());
    for m in &w.layers {
        let prev = layers.last().unwrap();
        let next: Vec<f64> = (0..m.rows)
            .map(|r| relu(m.row(r).iter().zip(prev).map(|(a, b)| a * b).sum()))
            .collect();
        layers.push(next);
    }
    Activations { layers }
}

/// Squared-error cost summed over the batch plus L2 regularisation:
/// `(1/5) Σ_s ‖scale·y_s − ŷ_s‖² + (λ/2) Σ W²`.
pub fn cost(w: &MLPWeights, batch: &[(Activations, usize)], lambda: f64, output_scale: f64) -> f64 {
    let data: f64 = batch
        .iter()
        .map(|(acts, target)| {
            acts.output()
                .iter()
                .enumerate()
                .map(|(j, y)| {
                    let t = if j == *target { 1.0 } else { 0.0 };
                    (output_scale * y - t).powi(2)
                })
                .sum::<f64>()
        })
        .sum();
    data / 5.0 + 0.5 * lambda * w.iter().map(|x| x * x).sum::<f64>()
}

/// Exact gradient of [`cost`] w.r.t. every weight. ReLU units contribute
/// derivative 1 where their activity is positive and 0 otherwise, so
/// activations measured elsewhere may be substituted for `forward` output.
pub fn backward(
    w: &MLPWeights,
    batch: &[(Activations, usize)],
    lambda: f64,
    output_scale: f64,
) -> MLPWeights {
    backward_with(w, batch, lambda, output_scale, |_, _, _, a| a > 0.0)
}

/// [`backward`] with explicit derivative masks: `masks[s][n][j]` says
/// whether unit `j` of layer `n + 1` passes gradient for sample `s`.
pub fn backward_masked(
    w: &MLPWeights,
    batch: &[(Activations, usize)],
    masks: &[Vec<Vec<bool>>],
    lambda: f64,
    output_scale: f64,
) -> MLPWeights {
    assert_eq!(batch.len(), masks.len(), "one mask per sample");
    backward_with(w, batch, lambda, output_scale, |s, n, j, _| {
        masks[s][n - 1][j]
    })
}

/// `active(sample, layer, unit, activity)` decides the ReLU derivative.
fn backward_with(
    w: &MLPWeights,
    batch: &[(Activations, usize)],
    lambda: f64,
    output_scale: f64,
    active: impl Fn(usize, usize, usize, f64) -> bool,
) -> MLPWeights {
    let mut grad = MLPWeights {
        layers: w
            .layers
            .iter()
            .map(|m| Matrix {
                rows: m.rows,
                cols: m.cols,
                data: m.data.iter().map(|x| lambda * x).collect(),
            })
            .collect(),
    };
    let depth = w.layers.len();
    let mut delta: Vec<f64> = Vec::new();
    let mut next_delta: Vec<f64> = Vec::new();
    for (s, (acts, target)) in batch.iter().enumerate() {
        let out = acts.output();
        delta.clear();
        delta.extend(out.iter().enumerate().map(|(j, &y)| {
            if active(s, depth, j, y) {
                let t = if j == *target { 1.0 } else { 0.0 };
                0.4 * output_scale * (output_scale * y - t)
            } else {
                0.0
            }
        }));
        for n in (0..depth).rev() {
            let m = &w.layers[n];
            let input = &acts.layers[n];
            let g = &mut grad.layers[n];
            for (r, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    let row = &mut g.data[r * m.cols..(r + 1) * m.cols];
                    for (gc, x) in row.iter_mut().zip(input) {
                        *gc += d * x;
                    }
                }
            }
            if n == 0 {
                break;
            }
            next_delta.clear();
            next_delta.extend(input.iter().enumerate().map(|(c, &x)| {
                if active(s, n, c, x) {
                    delta.iter().enumerate().map(|(r, d)| d * m.get(r, c)).sum()
                } else {
                    0.0
                }
            }));
            std::mem::swap(&mut delta, &mut next_delta);
        }
    }
    grad
}

/// Momentum update followed by clipping to [-1, 1].
pub fn step(w: &mut MLPWeights, velocity: &mut MLPWeights, grad: &MLPWeights, hp: &HyperParams) {
    assert!(
        w.same_shape(velocity) && w.same_shape(grad),
        "shape mismatch"
    );
    for ((wl, vl), gl) in w
        .layers
        .iter_mut()
        .zip(&mut velocity.layers)
        .zip(&grad.layers)
    {
        for ((x, v), g) in wl.data.iter_mut().zip(&mut vl.data).zip(&gl.data) {
            *v = hp.eta * g + hp.gamma * *v;
            *x = (*x - *v).clamp(-1.0, 1.0);
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify_sw(w: &MLPWeights, input: &[f64]) -> usize {
    argmax(forward(w, input).output())
}

pub fn accuracy(w: &MLPWeights, images: &[Image]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let correct = images
        .iter()
        .filter(|img| classify_sw(w, &img.input()) == img.class)
        .count();
    correct as f64 / images.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetric {
    pub step: usize,
    pub batch_accuracy: f64,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: MLPWeights,
    pub velocity: MLPWeights,
    pub metrics: Vec<StepMetric>,
}

/// Phase A: trains the software model from a truncated-normal start.
/// `seed` feeds both the initialisation and the batch order.
pub fn train_software(
    split: &DatasetSplit,
    topology: &Topology,
    hp: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome, NetError> {
    topology.validate()?;
    hp.validate()?;
    if topology.outputs() != split.classes.len() {
        return Err(NetError::Shape(format!(
            "{} label units for {} classes",
            topology.outputs(),
            split.classes.len()
        )));
    }
    let mut weights = init_weights(topology, seed::derive(seed, "software/init"));
    let mut velocity = MLPWeights::zeros(topology);
    let scale = topology.software_output_scale();
    let mut metrics = Vec::with_capacity(hp.steps);
    let mut sampler = BatchIndices::new(
        split.train.len(),
        hp.batch_size,
        seed::derive(seed, "software/batches"),
    );
    let mut batch = Vec::with_capacity(hp.batch_size);
    for step_no in 0..hp.steps {
        let Some(idx) = sampler.next() else { break };
        batch.clear();
        let mut correct = 0;
        for i in idx {
            let img = &split.train[i];
            let acts = forward(&weights, &img.input());
            if argmax(acts.output()) == img.class {
                correct += 1;
            }
            batch.push((acts, img.class));
        }
        let c = cost(&weights, &batch, hp.lambda, scale);
        let grad = backward(&weights, &batch, hp.lambda, scale);
        step(&mut weights, &mut velocity, &grad, hp);
        metrics.push(StepMetric {
            step: step_no,
            batch_accuracy: correct as f64 / batch.len() as f64,
            cost: c,
        });
    }
    Ok(TrainOutcome {
        weights,
        velocity,
        metrics,
    })
}

/// Software-model checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: MLPWeights,
    pub velocity: MLPWeights,
    pub step: u64,
    pub seed: u64,
}

pub fn encode_topology(t: &Topology) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(t.layer_sizes.len() as u32);
    for s in &t.layer_sizes {
        w.u32(*s as u32);
    }
    w.finish()
}

pub fn decode_topology(bytes: &[u8]) -> Result<Topology, NetError> {
    let mut r = Reader::new(bytes, "TOPO");
    let n = r.u32()? as usize;
    let sizes = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Topology::new(sizes)
}

pub fn encode_matrices(w: &MLPWeights) -> Vec<u8> {
    let mut out = Writer::new();
    for m in &w.layers {
        out.f64s(&m.data);
    }
    out.finish()
}

pub fn decode_matrices(
    bytes: &[u8],
    topology: &Topology,
    tag: &'static str,
) -> Result<MLPWeights, NetError> {
    let mut r = Reader::new(bytes, tag);
    let mut w = MLPWeights::zeros(topology);
    for m in &mut w.layers {
        m.data = r.f64s(m.rows * m.cols)?;
    }
    r.finish()?;
    Ok(w)
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push(TAG_TOPOLOGY, encode_topology(&self.weights.topology()));
        c.push(TAG_WEIGHTS, encode_matrices(&self.weights));
        c.push(TAG_VELOCITY, encode_matrices(&self.velocity));
        c.push(
            TAG_META,
            Writer::new().u64(self.step).u64(self.seed).finish(),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, NetError> {
        let topology = decode_topology(c.require(TAG_TOPOLOGY)?)?;
        let weights = decode_matrices(c.require(TAG_WEIGHTS)?, &topology, "WGHT")?;
        let velocity = decode_matrices(c.require(TAG_VELOCITY)?, &topology, "VELO")?;
        let mut r = Reader::new(c.require(TAG_META)?, "META");
        let step = r.u64()?;
        let seed = r.u64()?;
        r.finish()?;
        Ok(Self {
            weights,
            velocity,
            step,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn acts_for(w: &MLPWeights, input: &[f64]) -> Activations {
        forward(w, input)
    }

    #[test]
    fn init_respects_truncation() {
        let t = Topology::default();
        let w = init_weights(&t, 3);
        assert!(w.layers[0].data.iter().all(|x| x.abs() <= 0.2));
        let bound = 2.0 / 15f64.sqrt();
        assert!(w.layers[1].data.iter().all(|x| x.abs() <= bound));
        assert_eq!(init_weights(&t, 3), w);
        assert_ne!(init_weights(&t, 4), w);
        // fan-in of one: sigma 1, |w| <= 2 before clipping to [-1, 1]
        let single = init_weights(&Topology::new(vec![1, 400]).unwrap(), 9);
        assert!(single.max_abs() <= 1.0);
        assert!(single.iter().any(|x| x.abs() == 1.0));
    }

    #[test]
    fn zero_weights_give_zero_activity_and_fixed_cost() {
        let t = Topology::default();
        let w = MLPWeights::zeros(&t);
        let acts = forward(&w, &[0.5; 100]);
        assert!(acts.layers[1..].iter().flatten().all(|x| *x == 0.0));
        let scale = t.software_output_scale();
        assert_relative_eq!(cost(&w, &[(acts.clone(), 3)], 0.001, scale), 0.2);
        let batch: Vec<_> = (0..100).map(|i| (acts.clone(), i % 5)).collect();
        assert_relative_eq!(cost(&w, &batch, 0.001, scale), 20.0, epsilon = 1e-12);
        let g = backward(&w, &batch, 0.001, scale);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn regularisation_only() {
        let t = Topology::new(vec![1, 1]).unwrap();
        let mut w = MLPWeights::zeros(&t);
        w.layers[0].data[0] = 0.5;
        assert_relative_eq!(cost(&w, &[], 0.001, 1.0), 0.000125);
        let g = backward(&w, &[], 0.001, 1.0);
        assert_relative_eq!(g.layers[0].data[0], 0.0005);
    }

    #[test]
    fn identity_chain() {
        let t = Topology::new(vec![2, 1, 1, 1]).unwrap();
        let mut w = MLPWeights::zeros(&t);
        w.layers[0].set(0, 0, 1.0);
        w.layers[1].set(0, 0, 1.0);
        w.layers[2].set(0, 0, 1.0);
        assert_eq!(forward(&w, &[0.7, 0.3]).output(), &[0.7]);
    }

    #[test]
    fn forward_matches_hand_computation() {
        let t = Topology::new(vec![3, 2, 2]).unwrap();
        let mut w = MLPWeights::zeros(&t);
        w.layers[0].data = vec![0.5, -1.0, 0.25, 0.1, 0.2, 0.3];
        w.layers[1].data = vec![1.0, -0.5, -0.2, 0.4];
        let x = [1.0, 0.2, 0.8];
        // hidden: [max(0, .5 - .2 + .2), max(0, .1 + .04 + .24)] = [0.5, 0.38]
        // out: [max(0, .5 - .19), max(0, -.1 + .152)] = [0.31, 0.052]
        let acts = forward(&w, &x);
        assert_relative_eq!(acts.layers[1][0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(acts.layers[1][1], 0.38, epsilon = 1e-15);
        assert_relative_eq!(acts.output()[0], 0.31, epsilon = 1e-15);
        assert_relative_eq!(acts.output()[1], 0.052, epsilon = 1e-15);
    }

    #[test]
    fn momentum_accumulates_geometrically() {
        let t = Topology::new(vec![1, 1]).unwrap();
        let mut w = MLPWeights::zeros(&t);
        let mut v = MLPWeights::zeros(&t);
        let mut g = MLPWeights::zeros(&t);
        g.layers[0].data[0] = 0.1;
        let hp = HyperParams {
            eta: 0.05,
            gamma: 0.9,
            ..HyperParams::default()
        };
        step(&mut w, &mut v, &g, &hp);
        step(&mut w, &mut v, &g, &hp);
        assert_relative_eq!(v.layers[0].data[0], 0.095 * 0.1, epsilon = 1e-15);
        assert_relative_eq!(w.layers[0].data[0], -(0.005 + 0.0095), epsilon = 1e-15);

        let hp = HyperParams {
            eta: 1.0,
            gamma: 0.0,
            ..HyperParams::default()
        };
        let mut w = MLPWeights::zeros(&t);
        let mut v = MLPWeights::zeros(&t);
        step(&mut w, &mut v, &g, &hp);
        assert_relative_eq!(w.layers[0].data[0], -0.1);
    }

    #[test]
    fn step_clips_at_one() {
        let t = Topology::new(vec![1, 1]).unwrap();
        let mut w = MLPWeights::zeros(&t);
        w.layers[0].data[0] = 0.99;
        let mut v = MLPWeights::zeros(&t);
        let mut g = MLPWeights::zeros(&t);
        g.layers[0].data[0] = -0.05;
        let hp = HyperParams {
            eta: 1.0,
            gamma: 0.0,
            ..HyperParams::default()
        };
        step(&mut w, &mut v, &g, &hp);
        assert_eq!(w.layers[0].data[0], 1.0);
    }

    #[test]
    fn masked_backward_with_activity_masks_equals_backward() {
        let t = Topology::new(vec![6, 4, 3]).unwrap();
        let w = init_weights(&t, 12);
        let batch: Vec<(Activations, usize)> = (0..5)
            .map(|i| {
                (
                    forward(&w, &[0.1 * i as f64, 0.5, 0.2, 0.9, 0.0, 0.3]),
                    i % 3,
                )
            })
            .collect();
        let masks: Vec<Vec<Vec<bool>>> = batch
            .iter()
            .map(|(a, _)| {
                a.layers[1..]
                    .iter()
                    .map(|l| l.iter().map(|x| *x > 0.0).collect())
                    .collect()
            })
            .collect();
        assert_eq!(
            backward_masked(&w, &batch, &masks, 0.01, 0.5),
            backward(&w, &batch, 0.01, 0.5)
        );
        // closing every gate leaves only the regulariser
        let closed: Vec<Vec<Vec<bool>>> = masks
            .iter()
            .map(|m| m.iter().map(|l| vec![false; l.len()]).collect())
            .collect();
        let g = backward_masked(&w, &batch, &closed, 0.01, 0.5);
        for (a, b) in g.iter().zip(w.iter()) {
            assert_relative_eq!(*a, 0.01 * b);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 3.0, 0.0, 0.0]), 2);
        assert_eq!(argmax(&[0.0; 5]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn hyperparams_are_validated() {
        assert!(HyperParams::default().validate().is_ok());
        for bad in [
            HyperParams {
                eta: 0.0,
                ..Default::default()
            },
            HyperParams {
                gamma: 1.0,
                ..Default::default()
            },
            HyperParams {
                lambda: -1.0,
                ..Default::default()
            },
            HyperParams {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = Topology::default();
        let ck = Checkpoint {
            weights: init_weights(&t, 1),
            velocity: init_weights(&t, 2),
            step: 15000,
            seed: 77,
        };
        let back = Checkpoint::from_container(
            &Container::from_bytes(&ck.to_container().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, ck);
    }

    proptest! {
        #[test]
        fn clipping_holds_after_any_steps(seed in 0u64..1000, gscale in 0.1f64..50.0, steps in 1usize..20) {
            let t = Topology::new(vec![4, 3, 2]).unwrap();
            let mut w = init_weights(&t, seed);
            let mut v = MLPWeights::zeros(&t);
            let hp = HyperParams { eta: 0.5, gamma: 0.9, ..Default::default() };
            let mut rng = seed::rng(seed);
            for _ in 0..steps {
                let mut g = MLPWeights::zeros(&t);
                for x in g.iter_mut() {
                    *x = gscale * (rand::Rng::random::<f64>(&mut rng) - 0.5);
                }
                step(&mut w, &mut v, &g, &hp);
                prop_assert!(w.max_abs() <= 1.0);
            }
        }

        #[test]
        fn cost_is_non_negative(seed in 0u64..1000, target in 0usize..2) {
            let t = Topology::new(vec![3, 2, 2]).unwrap();
            let w = init_weights(&t, seed);
            let acts = acts_for(&w, &[0.3, 0.9, 0.1]);
            prop_assert!(cost(&w, &[(acts, target)], 0.001, 0.5) >= 0.0);
        }
    }
}
