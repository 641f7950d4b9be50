//! Python module `itl`: dataset, software network, simulated substrate,
//! conversion and in-the-loop training.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use itl_core::calibration::{calibrate_all, spread_report, CalibOptions, CalibrationStore};
use itl_core::dataset::{self, ClassSet, DatasetSplit, Image, RawImage};
use itl_core::loop_trainer::{self, Hardware, ITLConfig, ShadowState};
use itl_core::relu_net::{self, Checkpoint, HyperParams, MLPWeights, Topology};
use itl_core::seed;
use itl_core::substrate::{fabricate, HardwareNetworkConfig, SynapseSign, VariationSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn class_set(classes: Option<Vec<u8>>) -> PyResult<ClassSet> {
    match classes {
        Some(c) => ClassSet::new(c).map_err(value_err),
        None => Ok(ClassSet::default()),
    }
}

/// Reduced MNIST split: 10x10 images of the selected digits.
#[pyclass(module = "itl", frozen)]
pub struct Dataset {
    split: DatasetSplit,
}

#[pymethods]
impl Dataset {
    /// Loads the four IDX files from `dir` and reduces them.
    #[staticmethod]
    #[pyo3(signature = (dir, classes=None))]
    fn load(py: Python<'_>, dir: PathBuf, classes: Option<Vec<u8>>) -> PyResult<Self> {
        let classes = class_set(classes)?;
        py.detach(|| {
            let (tr, te) = dataset::load_mnist_dir(&dir).map_err(io_err)?;
            Ok(Self {
                split: dataset::reduce(&tr, &te, &classes),
            })
        })
    }

    /// Builds a split from 28x28 uint8 images given as flat lists of 784
    /// values; digits outside `classes` are dropped.
    #[staticmethod]
    #[pyo3(signature = (train_images, train_digits, test_images, test_digits, classes=None))]
    fn from_raw(
        train_images: Vec<Vec<u8>>,
        train_digits: Vec<u8>,
        test_images: Vec<Vec<u8>>,
        test_digits: Vec<u8>,
        classes: Option<Vec<u8>>,
    ) -> PyResult<Self> {
        let classes = class_set(classes)?;
        let records = |images: Vec<Vec<u8>>, digits: Vec<u8>| -> PyResult<Vec<(RawImage, u8)>> {
            if images.len() != digits.len() {
                return Err(value_err(format!(
                    "{} images for {} labels",
                    images.len(),
                    digits.len()
                )));
            }
            images
                .into_iter()
                .zip(digits)
                .map(|(px, d)| {
                    if px.len() != dataset::RAW_PIXELS {
                        return Err(value_err(format!(
                            "image has {} pixels, expected 784",
                            px.len()
                        )));
                    }
                    Ok((RawImage::from_fn(|r, c| px[r * dataset::RAW_SIDE + c]), d))
                })
                .collect()
        };
        let train = records(train_images, train_digits)?;
        let test = records(test_images, test_digits)?;
        Ok(Self {
            split: dataset::reduce(&train, &test, &classes),
        })
    }

    /// Reads a split written by `save` or the `prepare` command.
    #[staticmethod]
    fn read_cache(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            split: dataset::read_cache(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::write_cache(&self.split, &path).map_err(io_err)
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.split.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.split.test.len()
    }

    #[getter]
    fn classes(&self) -> Vec<u32> {
        self.split
            .classes
            .digits()
            .iter()
            .map(|d| u32::from(*d))
            .collect()
    }

    /// `(pixels, digit)` of test image `i`, pixels in [0, 1].
    fn test_image(&self, i: usize) -> PyResult<(Vec<f64>, u8)> {
        let img = self
            .split
            .test
            .get(i)
            .ok_or_else(|| value_err(format!("test index {i} out of range")))?;
        Ok((img.input(), img.digit))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(classes={:?}, train={}, test={})",
            self.split.classes.digits(),
            self.split.train.len(),
            self.split.test.len()
        )
    }
}

/// Bias-free ReLU network.
#[pyclass(module = "itl", frozen)]
pub struct Network {
    weights: MLPWeights,
}

#[pymethods]
impl Network {
    /// Trains from scratch with the default hyperparameters, optionally
    /// overriding the step count.
    #[staticmethod]
    #[pyo3(signature = (data, seed=0, steps=None, layer_sizes=None))]
    fn train(
        py: Python<'_>,
        data: &Dataset,
        seed: u64,
        steps: Option<usize>,
        layer_sizes: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let topology = match layer_sizes {
            Some(s) => Topology::new(s).map_err(value_err)?,
            None => Topology::default(),
        };
        let mut hp = HyperParams::default();
        if let Some(s) = steps {
            hp.steps = s;
        }
        py.detach(|| {
            let out =
                relu_net::train_software(&data.split, &topology, &hp, seed).map_err(value_err)?;
            Ok(Self {
                weights: out.weights,
            })
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            weights: Checkpoint::load(&path).map_err(io_err)?.weights,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            weights: self.weights.clone(),
            velocity: MLPWeights::zeros(&self.weights.topology()),
            step: 0,
            seed: 0,
        }
        .save(&path)
        .map_err(io_err)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.weights.topology().layer_sizes
    }

    /// Weight matrices as nested lists, `[projection][post][pre]`.
    fn weights(&self) -> Vec<Vec<Vec<f64>>> {
        self.weights
            .layers
            .iter()
            .map(|m| (0..m.rows).map(|r| m.row(r).to_vec()).collect())
            .collect()
    }

    /// Label-layer output for one 100-pixel input.
    fn forward(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_input(&pixels)?;
        Ok(relu_net::forward(&self.weights, &pixels).output().to_vec())
    }

    /// Class index of the strongest label unit.
    fn classify(&self, pixels: Vec<f64>) -> PyResult<usize> {
        self.check_input(&pixels)?;
        Ok(relu_net::classify_sw(&self.weights, &pixels))
    }

    /// Test-set accuracy.
    fn accuracy(&self, data: &Dataset) -> f64 {
        relu_net::accuracy(&self.weights, &data.split.test)
    }
}

impl Network {
    fn check_input(&self, pixels: &[f64]) -> PyResult<()> {
        let n = self.weights.layers[0].cols;
        if pixels.len() != n {
            return Err(value_err(format!(
                "expected {n} inputs, got {}",
                pixels.len()
            )));
        }
        Ok(())
    }
}

/// Quantized substrate configuration of a network.
#[pyclass(module = "itl", frozen)]
pub struct HardwareConfig {
    cfg: HardwareNetworkConfig,
}

#[pymethods]
impl HardwareConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            cfg: HardwareNetworkConfig::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.cfg.save(&path).map_err(io_err)
    }

    #[getter]
    fn g_unit(&self) -> f64 {
        self.cfg.g_unit
    }

    #[getter]
    fn fab_seed(&self) -> u64 {
        self.cfg.fab_seed
    }

    #[getter]
    fn n_synapses(&self) -> usize {
        self.cfg.synapses.len()
    }

    /// Signed 4-bit weights, `[projection][post][pre]`.
    fn hw_weights(&self) -> Vec<Vec<Vec<i32>>> {
        loop_trainer::hw_weights(&self.cfg)
    }

    /// Weights dequantized back to `[-1, 1]`.
    fn to_network(&self) -> PyResult<Network> {
        Ok(Network {
            weights: loop_trainer::dequantize(&self.cfg).map_err(value_err)?,
        })
    }
}

/// One in-the-loop iteration: `(iteration, batch_accuracy,
/// test_accuracy_subset or None, mean_label_rate_hz)`.
type MetricRow = (usize, f64, Option<f64>, f64);

/// Fabricated chip with its calibration and presentation timing.
#[pyclass(module = "itl")]
pub struct Substrate {
    hw: Hardware,
    store: Option<CalibrationStore>,
}

#[pymethods]
impl Substrate {
    #[new]
    #[pyo3(signature = (fab_seed, circuits=512, raw_spread=0.3))]
    fn new(fab_seed: u64, circuits: usize, raw_spread: f64) -> PyResult<Self> {
        Ok(Self {
            hw: Hardware::new(fabricate(circuits, fab_seed, raw_spread).map_err(value_err)?),
            store: None,
        })
    }

    #[getter]
    fn circuits(&self) -> usize {
        self.hw.phys.len()
    }

    #[getter]
    fn t_on(&self) -> f64 {
        self.hw.sim.t_on
    }

    #[setter]
    fn set_t_on(&mut self, ms: f64) {
        self.hw.sim.t_on = ms;
    }

    #[getter]
    fn t_off(&self) -> f64 {
        self.hw.sim.t_off
    }

    #[setter]
    fn set_t_off(&mut self, ms: f64) {
        self.hw.sim.t_off = ms;
    }

    /// Disables trial-to-trial noise of every parameter and synapse.
    fn disable_noise(&mut self) {
        self.hw.variation = VariationSpec::none();
    }

    #[getter]
    fn calibrated(&self) -> bool {
        self.store.is_some()
    }

    #[pyo3(signature = (seed=0, repeats=None))]
    fn calibrate(&mut self, py: Python<'_>, seed: u64, repeats: Option<usize>) -> PyResult<()> {
        let mut opts = CalibOptions {
            seed,
            variation: self.hw.variation.clone(),
            ..Default::default()
        };
        if let Some(r) = repeats {
            opts.repeats = r;
        }
        let phys = &self.hw.phys;
        let store = py
            .detach(|| calibrate_all(phys, &opts))
            .map_err(value_err)?;
        self.store = Some(store);
        Ok(())
    }

    fn save_calibration(&self, path: PathBuf) -> PyResult<()> {
        self.calibration()?.save(&path).map_err(io_err)
    }

    fn load_calibration(&mut self, path: PathBuf) -> PyResult<()> {
        let store = CalibrationStore::load(&path).map_err(io_err)?;
        store.check(&self.hw.phys).map_err(value_err)?;
        self.store = Some(store);
        Ok(())
    }

    /// `(parameter, target_hw, uncalibrated_rel_sd, calibrated_rel_sd)` rows.
    #[pyo3(signature = (seed=0))]
    fn spread_report(&self, seed: u64) -> PyResult<Vec<(String, f64, f64, f64)>> {
        let rows = spread_report(
            &self.hw.phys,
            self.calibration()?,
            &self.hw.targets,
            &self.hw.variation,
            seed,
        )
        .map_err(value_err)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                (
                    r.parameter,
                    r.target_hw,
                    r.uncalibrated_rel_sd,
                    r.calibrated_rel_sd,
                )
            })
            .collect())
    }

    /// Quantizes `network` onto randomly placed circuits. With `g_unit`
    /// unset it is tuned on the first `probe_samples` training images of
    /// `data`.
    #[pyo3(signature = (network, placement_seed=0, g_unit=None, data=None, probe_samples=100))]
    fn convert(
        &self,
        py: Python<'_>,
        network: &Network,
        placement_seed: u64,
        g_unit: Option<f64>,
        data: Option<&Dataset>,
        probe_samples: usize,
    ) -> PyResult<HardwareConfig> {
        let store = self.calibration()?;
        let n_neurons: usize = network.weights.topology().layer_sizes[1..].iter().sum();
        let placement = loop_trainer::place(n_neurons, self.hw.phys.len(), placement_seed)
            .map_err(value_err)?;
        let cfg = loop_trainer::convert(
            &network.weights,
            &self.hw.phys,
            store,
            &self.hw.targets,
            &placement,
            g_unit.unwrap_or(1.0),
        )
        .map_err(value_err)?;
        if g_unit.is_some() {
            return Ok(HardwareConfig { cfg });
        }
        let data = data.ok_or_else(|| value_err("tuning g_unit needs `data` (or pass g_unit)"))?;
        let probe: Vec<&Image> = data.split.train.iter().take(probe_samples).collect();
        let seed = seed::derive(placement_seed, "g_unit");
        let (cfg, _) = py
            .detach(|| self.hw.tune(&cfg, &probe, seed))
            .map_err(value_err)?;
        Ok(HardwareConfig { cfg })
    }

    /// Test accuracy of one write of `config` over the first `subset` test
    /// images (all when unset).
    #[pyo3(signature = (config, data, subset=None, trial_seed=0, input_seed=0))]
    fn evaluate(
        &self,
        py: Python<'_>,
        config: &HardwareConfig,
        data: &Dataset,
        subset: Option<usize>,
        trial_seed: u64,
        input_seed: u64,
    ) -> PyResult<f64> {
        let n = subset
            .unwrap_or(data.split.test.len())
            .min(data.split.test.len());
        let images: Vec<&Image> = data.split.test[..n].iter().collect();
        py.detach(|| {
            loop_trainer::evaluate_hw(&self.hw, &config.cfg, &images, trial_seed, input_seed)
        })
        .map(|(acc, _)| acc)
        .map_err(value_err)
    }

    /// In-the-loop training from `network` with the neuron setup of
    /// `config`. Returns the trained network, the last written
    /// configuration and one metrics row per iteration.
    #[pyo3(signature = (network, config, data, iterations=60, batch_size=1200, eta=0.05, eval_subset=1000, eval_every=5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train_itl(
        &self,
        py: Python<'_>,
        network: &Network,
        config: &HardwareConfig,
        data: &Dataset,
        iterations: usize,
        batch_size: usize,
        eta: f64,
        eval_subset: usize,
        eval_every: usize,
        seed: u64,
    ) -> PyResult<(Network, HardwareConfig, Vec<MetricRow>)> {
        let itl = ITLConfig {
            iterations,
            batch_size,
            eta,
            eval_subset,
            eval_every,
            seed,
            ..Default::default()
        };
        let out = py
            .detach(|| {
                loop_trainer::train_itl(
                    ShadowState::new(network.weights.clone()),
                    &config.cfg,
                    &data.split,
                    &self.hw,
                    &itl,
                )
            })
            .map_err(value_err)?;
        let rows = out
            .metrics
            .points
            .iter()
            .map(|p| {
                (
                    p.iteration,
                    p.batch_accuracy,
                    p.test_accuracy_subset,
                    p.mean_label_rate_hz,
                )
            })
            .collect();
        Ok((
            Network {
                weights: out.state.weights,
            },
            HardwareConfig { cfg: out.last },
            rows,
        ))
    }
}

impl Substrate {
    fn calibration(&self) -> PyResult<&CalibrationStore> {
        self.store.as_ref().ok_or_else(|| {
            value_err("substrate is not calibrated; call calibrate() or load_calibration()")
        })
    }
}

/// `(magnitude 0..=15, "exc" | "inh")` of a weight in `[-1, 1]`.
#[pyfunction]
fn quantize(w: f64) -> PyResult<(u8, &'static str)> {
    let (mag, sign) = loop_trainer::quantize(w).map_err(value_err)?;
    Ok((
        mag,
        match sign {
            SynapseSign::Excitatory => "exc",
            SynapseSign::Inhibitory => "inh",
        },
    ))
}

/// Signed quantized weight in `-15..=15`.
#[pyfunction]
fn quantize_signed(w: f64) -> PyResult<i32> {
    loop_trainer::quantize_signed(w).map_err(value_err)
}

/// Input rates (Hz) of an image; they sum to `nu_tot` unless the image is
/// blank.
#[pyfunction]
#[pyo3(signature = (pixels, nu_tot=2500.0))]
fn encode_rates(pixels: Vec<f64>, nu_tot: f64) -> Vec<f64> {
    itl_core::substrate::encode_rates(&pixels, nu_tot)
}

#[pyfunction]
#[pyo3(signature = (v, alpha=20.0, offset=1800.0))]
fn bio_to_hw_voltage(v: f64, alpha: f64, offset: f64) -> f64 {
    itl_core::substrate::bio_to_hw_voltage(v, alpha, offset)
}

/// Child seed of `parent` for `label`, as used for every phase seed.
#[pyfunction]
fn derive_seed(parent: u64, label: &str) -> u64 {
    seed::derive(parent, label)
}

/// Runs the `itl` command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("itl".to_string()).chain(args).collect();
    py.detach(|| itl_core::cli::main_with_args(argv))
}

#[pymodule]
fn itl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_class::<HardwareConfig>()?;
    m.add_class::<Substrate>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_signed, m)?)?;
    m.add_function(wrap_pyfunction!(encode_rates, m)?)?;
    m.add_function(wrap_pyfunction!(bio_to_hw_voltage, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
