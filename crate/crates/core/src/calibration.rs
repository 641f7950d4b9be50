//! Per-circuit calibration of the analog neuron parameters.
//!
//! Every parameter is swept over its usable DAC range on a single-neuron
//! bench, the response is measured from simulated membrane traces, and a
//! low-order polynomial of the inverse map (target value → DAC) is fitted.
//! All measured values are in the hardware domain.
//!
//! | parameter  | measurement                                                   |
//! |------------|---------------------------------------------------------------|
//! | `e_leak`   | steady state after release from reset, no input               |
//! | `tau_m`    | exponential fit to the same relaxation                        |
//! | `tau_syn`  | double-exponential fit to a small PSP, `tau_m` from relaxation|
//! | `v_thresh` | mean crossing level under strong tonic drive                  |
//! | `e_reset`  | membrane value while clamped after a spike                    |
//! | `e_exc`    | steady states under two excitatory drive levels               |
//! | `e_inh`    | steady states under two inhibitory drive levels               |

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, Reader, Tag, Writer};
use crate::seed;
use crate::substrate::network::realize_neuron;
use crate::substrate::params::{NeuronTargets, Param, VariationSpec};
use crate::substrate::physiology::{nominal_dac, SubstratePhysiology, TransferCurve, DAC_MAX};
use crate::substrate::sim::{bench, run_rates, BenchResult, SimParams};
use crate::substrate::{
    configure, rates_from_record, HardwareNetworkConfig, NeuronParams, SubstrateError,
};

pub const TAG_CAL_META: Tag = *b"CALM";
pub const TAG_CAL_CURVES: Tag = *b"CALC";

/// Usable sweep range as multiples of the default target, on the nominal
/// curve.
const USABLE: (f64, f64) = (0.5, 1.5);

/// Relative residual above which the quadratic inverse is replaced by a cubic.
const CUBIC_FALLBACK: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("insufficient measurements: {0} valid points, need at least 4")]
    Insufficient(usize),
    #[error("degenerate design matrix")]
    Degenerate,
    #[error("circuit {circuit}, {}: {source}", .param.name())]
    Circuit {
        circuit: usize,
        param: Param,
        #[source]
        source: Box<CalibrationError>,
    },
    #[error("calibration store covers {found} circuits, substrate has {expected}")]
    Coverage { expected: usize, found: usize },
    #[error(
        "calibration store was measured on fabrication seed {found}, substrate has {expected}"
    )]
    SeedMismatch { expected: u64, found: u64 },
    #[error("unreachable target: {0}")]
    Unreachable(String),
    #[error("invalid option: {0}")]
    Options(String),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How a parameter is read off the bench; stored with the calibration data.
pub fn method(param: Param) -> &'static str {
    match param {
        Param::ELeak => "relaxation steady state",
        Param::TauM => "relaxation exponential fit",
        Param::TauSyn => "psp double-exponential fit",
        Param::VThresh => "crossing level",
        Param::EReset => "clamped reset level",
        Param::EExc | Param::EInh => "two-level drive steady state",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibOptions {
    pub sweep_points: usize,
    pub repeats: usize,
    /// Peak conductance of the PSP stimulus, nS.
    pub psp_weight: f64,
    /// Peak conductance per arrival of the tonic drive, nS.
    pub drive_weight: f64,
    /// Trial noise present while measuring.
    pub variation: VariationSpec,
    pub seed: u64,
}

impl Default for CalibOptions {
    fn default() -> Self {
        Self {
            sweep_points: 8,
            repeats: 5,
            psp_weight: 0.1,
            drive_weight: 1.0,
            variation: VariationSpec::default(),
            seed: 0,
        }
    }
}

impl CalibOptions {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.sweep_points < 4 || self.repeats == 0 {
            return Err(CalibrationError::Options(
                "need >= 4 sweep points and >= 1 repeat".into(),
            ));
        }
        if !(self.psp_weight >= 0.0 && self.drive_weight > 0.0) {
            return Err(CalibrationError::Options(
                "stimulus weights must be positive".into(),
            ));
        }
        self.variation.validate()?;
        Ok(())
    }
}

/// Evenly spaced DAC codes over the usable range of `param`.
pub fn sweep(param: Param, points: usize) -> Vec<u16> {
    let nominal = TransferCurve::nominal(param);
    let t = NeuronTargets::default().hw(param);
    let lo = f64::from(nominal.dac_for(USABLE.0 * t));
    let hi = f64::from(nominal.dac_for(USABLE.1 * t));
    let n = points.max(2);
    (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).round() as u16)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub dac: u16,
    /// Hardware-domain value, `None` when the trace could not be evaluated.
    pub value: Option<f64>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Relaxation from the reset level with no input: `(steady state, tau_m)`.
fn relaxation(p: &NeuronParams) -> Result<(f64, Option<f64>), SubstrateError> {
    let dt = 1.0;
    let r = bench(p, &[], dt, 600.0, p.e_reset, false)?;
    let n = r.trace.len();
    let u_inf = mean(r.trace[n - n / 10..].iter().copied());
    let first = (r.trace[0] - u_inf).abs();
    if first < 0.5 {
        return Ok((u_inf, None));
    }
    let pts: Vec<(f64, f64)> = r
        .trace
        .iter()
        .enumerate()
        .map(|(k, u)| ((k + 1) as f64 * dt, (u - u_inf).abs()))
        .take_while(|(_, d)| *d > 0.05 * first)
        .map(|(t, d)| (t, d.ln()))
        .collect();
    if pts.len() < 3 {
        return Ok((u_inf, None));
    }
    let tm = mean(pts.iter().map(|p| p.0));
    let ym = mean(pts.iter().map(|p| p.1));
    let sxy: f64 = pts.iter().map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| (t - tm).powi(2)).sum();
    let slope = sxy / sxx;
    Ok((u_inf, (slope < 0.0).then(|| -1.0 / slope)))
}

/// Sum of squared residuals of the best amplitude for a given `tau_s`.
fn psp_sse(d: &[f64], h: f64, tau_m: f64, tau_s: f64) -> f64 {
    let rm = (-h / tau_m).exp();
    let rs = (-h / tau_s).exp();
    let inv = 1.0 / tau_s - 1.0 / tau_m;
    let limit = inv.abs() < 1e-9 / tau_m;
    let (mut em, mut es) = (1.0, 1.0);
    let (mut sdf, mut sff, mut sdd) = (0.0, 0.0, 0.0);
    for (k, &y) in d.iter().enumerate() {
        em *= rm;
        es *= rs;
        let s = (k + 1) as f64 * h;
        let f = if limit { s * em } else { (em - es) / inv };
        sdf += y * f;
        sff += f * f;
        sdd += y * y;
    }
    if sff == 0.0 {
        return sdd;
    }
    sdd - sdf * sdf / sff
}

/// Synaptic time constant from a PSP sampled every `h` ms after the arrival,
/// with the membrane time constant known.
pub fn fit_psp(deflection: &[f64], h: f64, tau_m: f64) -> Option<f64> {
    let peak = deflection.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if peak < 1e-9 || deflection.len() < 5 {
        return None;
    }
    let (lo, hi) = (0.1f64.ln(), 100.0f64.ln());
    let grid = 80;
    let cost = |x: f64| psp_sse(deflection, h, tau_m, x.exp());
    let mut best = (f64::INFINITY, lo);
    for i in 0..=grid {
        let x = lo + (hi - lo) * i as f64 / grid as f64;
        let c = cost(x);
        if c < best.0 {
            best = (c, x);
        }
    }
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    let (mut fc, mut fe) = (cost(c), cost(e));
    for _ in 0..60 {
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - g * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + g * (b - a);
            fe = cost(e);
        }
    }
    let sdd: f64 = deflection.iter().map(|d| d * d).sum();
    let x = 0.5 * (a + b);
    (cost(x) < 1e-3 * sdd).then(|| x.exp())
}

/// Regular firing under tonic excitation, starting from the reset level.
/// Arrivals every 0.2 ms keep the mean excitatory conductance at about five
/// times the leak.
fn firing_bench(
    p: &NeuronParams,
    dt: f64,
    duration: f64,
    g: f64,
) -> Result<BenchResult, SubstrateError> {
    let interval = 0.2;
    let n = (duration / interval) as usize;
    let arrivals: Vec<_> = (0..n)
        .map(|i| (i as f64 * interval, 2.0 * g, true))
        .collect();
    bench(p, &arrivals, dt, duration, p.e_reset, true)
}

/// Mean membrane potential under regular arrivals every `interval` ms.
fn drive_level(
    p: &NeuronParams,
    g: f64,
    interval: f64,
    excitatory: bool,
) -> Result<f64, SubstrateError> {
    let (dt, duration, settle) = (0.05, 300.0, 150.0);
    let n = (duration / interval) as usize;
    let arrivals: Vec<_> = (0..n)
        .map(|i| (i as f64 * interval, g, excitatory))
        .collect();
    let r = bench(p, &arrivals, dt, duration, p.e_leak, false)?;
    let skip = (settle / dt) as usize;
    Ok(mean(r.trace[skip..].iter().copied()))
}

/// Reversal potential from the steady-state shifts `d1`, `d2` under one and
/// two units of tonic conductance: with `a = g1/g_l`,
/// `d_k = k·a/(1 + k·a) · (E − E_l)`.
pub fn reversal_from_levels(rest: f64, u1: f64, u2: f64) -> Option<f64> {
    let (d1, d2) = (u1 - rest, u2 - rest);
    if d1.abs() < 0.05 {
        return None;
    }
    let r = d2 / d1;
    if !(r > 1.0 && r < 2.0) {
        return None;
    }
    let a = (2.0 - r) / (2.0 * (r - 1.0));
    Some(rest + d1 * (1.0 + a) / a)
}

fn measure_once(
    p: &NeuronParams,
    param: Param,
    opts: &CalibOptions,
) -> Result<Option<f64>, SubstrateError> {
    let value = match param {
        Param::ELeak => Some(relaxation(p)?.0),
        Param::TauM => relaxation(p)?.1,
        Param::TauSyn => {
            let Some(tau_m) = relaxation(p)?.1 else {
                return Ok(None);
            };
            let (dt, t0) = (0.05, 1.0);
            let duration = t0 + 8.0 * tau_m.max(10.0);
            let r = bench(
                p,
                &[(t0, opts.psp_weight, true)],
                dt,
                duration.min(400.0),
                p.e_leak,
                false,
            )?;
            let base = p.e_leak;
            // samples every 0.2 ms starting one sample after the arrival
            let stride = 4;
            let first = (t0 / dt).round() as usize - 1;
            let d: Vec<f64> = r.trace[first..]
                .iter()
                .step_by(stride)
                .skip(1)
                .map(|u| u - base)
                .collect();
            fit_psp(&d, dt * stride as f64, tau_m)
        }
        Param::VThresh => {
            let dt = 0.002;
            let r = firing_bench(p, dt, 30.0, opts.drive_weight)?;
            let reset = r
                .spikes
                .first()
                .map(|t| r.trace[(t / dt).round() as usize - 1]);
            // a crossing straight out of the reset clamp means the threshold
            // sits below the reset level and was never approached
            if r.crossings.len() < 3 || r.crossings.iter().any(|(a, _)| Some(*a) == reset) {
                None
            } else {
                Some(mean(r.crossings.iter().map(|(a, b)| 0.5 * (a + b))))
            }
        }
        Param::EReset => {
            let dt = 0.1;
            let r = firing_bench(p, dt, 50.0, opts.drive_weight)?;
            let clamped: Vec<f64> = r
                .spikes
                .iter()
                .map(|t| r.trace[(t / dt).round() as usize - 1])
                .collect();
            (!clamped.is_empty()).then(|| mean(clamped))
        }
        Param::EExc | Param::EInh => {
            let exc = param == Param::EExc;
            let rest = relaxation(p)?.0;
            let u1 = drive_level(p, opts.drive_weight, 0.5, exc)?;
            let u2 = drive_level(p, opts.drive_weight, 0.25, exc)?;
            reversal_from_levels(rest, u1, u2)
        }
    };
    Ok(value.filter(|v| v.is_finite()).map(|v| param.to_hw(v)))
}

/// Bench DACs for sweeping `param`: nominal codes elsewhere, with leak and
/// excitatory reversal pushed to the top of their ranges when the neuron
/// has to fire. The reset level sits at the bottom of its range unless it is
/// the swept parameter, which keeps relaxations large and the threshold
/// above reset.
fn bench_dacs(param: Param, dac: u16) -> [u16; 7] {
    let mut dacs = Param::ALL.map(nominal_dac);
    if matches!(param, Param::VThresh | Param::EReset) {
        dacs[Param::ELeak.index()] = DAC_MAX;
        dacs[Param::EExc.index()] = DAC_MAX;
    }
    if param != Param::EReset {
        dacs[Param::EReset.index()] = 0;
    }
    dacs[param.index()] = dac;
    dacs
}

/// Sweeps one parameter of one circuit; every sweep point and repeat is a
/// fresh configuration with its own trial noise.
pub fn measure_parameter(
    phys: &SubstratePhysiology,
    circuit: usize,
    param: Param,
    dac_sweep: &[u16],
    opts: &CalibOptions,
) -> Result<Vec<Measurement>, CalibrationError> {
    if circuit >= phys.len() {
        return Err(CalibrationError::Options(format!(
            "circuit {circuit} not fabricated"
        )));
    }
    if dac_sweep.iter().any(|d| *d > DAC_MAX) {
        return Err(CalibrationError::Options(
            "sweep outside the DAC range".into(),
        ));
    }
    measure_pass(phys, circuit, param, dac_sweep, opts, 0)
}

/// One pass of a sweep; later passes of the same parameter draw from their
/// own noise streams.
fn measure_pass(
    phys: &SubstratePhysiology,
    circuit: usize,
    param: Param,
    dac_sweep: &[u16],
    opts: &CalibOptions,
    pass: u64,
) -> Result<Vec<Measurement>, CalibrationError> {
    let targets = NeuronTargets::default();
    let mut base = seed::derive_index(
        seed::derive_index(seed::derive(opts.seed, "calibration"), circuit as u64),
        param.index() as u64,
    );
    if pass > 0 {
        base = seed::derive_index(seed::derive(base, "pass"), pass);
    }
    let mut out = Vec::with_capacity(dac_sweep.len() * opts.repeats);
    for (i, &dac) in dac_sweep.iter().enumerate() {
        for rep in 0..opts.repeats {
            let mut rng = seed::rng(seed::derive_index(base, (i * opts.repeats + rep) as u64));
            let p = realize_neuron(
                phys,
                circuit,
                &bench_dacs(param, dac),
                &targets,
                &opts.variation,
                &mut rng,
            );
            out.push(Measurement {
                dac,
                value: measure_once(&p, param, opts)?,
            });
        }
    }
    Ok(out)
}

/// Inverse transfer `dac = Σ c_i x^i` with `x = (value - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub coeffs: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    /// RMS DAC error of the fit as a fraction of the full DAC scale.
    pub residual: f64,
    /// Measured value range covered by the fit.
    pub lo: f64,
    pub hi: f64,
}

impl CalibrationCurve {
    pub fn eval(&self, value: f64) -> f64 {
        let x = (value - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn dac_for(&self, target: f64) -> u16 {
        self.eval(target).round().clamp(0.0, f64::from(DAC_MAX)) as u16
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (upper, lower) = a.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for (r, row) in lower.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[col + 1 + r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn polyfit(points: &[(f64, f64)], degree: usize) -> Result<CalibrationCurve, CalibrationError> {
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let center = 0.5 * (lo + hi);
    let scale = 0.5 * (hi - lo);
    if !(scale > 0.0) {
        return Err(CalibrationError::Degenerate);
    }
    let m = degree + 1;
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    for &(v, d) in points {
        let x = (v - center) / scale;
        let pow: Vec<f64> = (0..m).map(|i| x.powi(i as i32)).collect();
        for i in 0..m {
            atb[i] += pow[i] * d;
            for j in 0..m {
                ata[i][j] += pow[i] * pow[j];
            }
        }
    }
    let coeffs = solve(ata, atb).ok_or(CalibrationError::Degenerate)?;
    let mut curve = CalibrationCurve {
        coeffs,
        center,
        scale,
        residual: 0.0,
        lo,
        hi,
    };
    let rms = mean(points.iter().map(|&(v, d)| (curve.eval(v) - d).powi(2))).sqrt();
    curve.residual = rms / f64::from(DAC_MAX);
    Ok(curve)
}

/// Least-squares fit of the inverse transfer. Flagged measurements are
/// dropped, repeats at the same DAC are averaged, and at least four DAC
/// points must remain.
pub fn fit_curve(measurements: &[Measurement]) -> Result<CalibrationCurve, CalibrationError> {
    let mut dacs: Vec<u16> = measurements
        .iter()
        .filter(|m| m.value.is_some())
        .map(|m| m.dac)
        .collect();
    dacs.sort_unstable();
    dacs.dedup();
    let points: Vec<(f64, f64)> = dacs
        .iter()
        .map(|&d| {
            let v = mean(
                measurements
                    .iter()
                    .filter(|m| m.dac == d)
                    .filter_map(|m| m.value),
            );
            (v, f64::from(d))
        })
        .collect();
    if points.len() < 4 {
        return Err(CalibrationError::Insufficient(points.len()));
    }
    let quad = polyfit(&points, 2)?;
    if quad.residual > CUBIC_FALLBACK && points.len() >= 5 {
        if let Ok(cubic) = polyfit(&points, 3) {
            if cubic.residual < quad.residual {
                return Ok(cubic);
            }
        }
    }
    Ok(quad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStore {
    pub fab_seed: u64,
    /// `curves[circuit][param.index()]`
    pub curves: Vec<[CalibrationCurve; 7]>,
}

impl CalibrationStore {
    pub fn check(&self, phys: &SubstratePhysiology) -> Result<(), CalibrationError> {
        if self.fab_seed != phys.fab_seed {
            return Err(CalibrationError::SeedMismatch {
                expected: phys.fab_seed,
                found: self.fab_seed,
            });
        }
        if self.curves.len() != phys.len() {
            return Err(CalibrationError::Coverage {
                expected: phys.len(),
                found: self.curves.len(),
            });
        }
        Ok(())
    }

    /// Calibrated DAC codes of one circuit for the given targets.
    pub fn dacs_for(&self, circuit: usize, targets: &NeuronTargets) -> [u16; 7] {
        Param::ALL.map(|p| self.curves[circuit][p.index()].dac_for(targets.hw(p)))
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Writer::new();
        meta.u64(self.fab_seed).u32(self.curves.len() as u32);
        for p in Param::ALL {
            meta.str(p.name()).str(method(p));
        }
        let mut curves = Writer::new();
        for row in &self.curves {
            for c in row {
                curves.u8(c.coeffs.len() as u8).f64s(&c.coeffs);
                curves
                    .f64(c.center)
                    .f64(c.scale)
                    .f64(c.residual)
                    .f64(c.lo)
                    .f64(c.hi);
            }
        }
        let mut out = Container::new();
        out.push(TAG_CAL_META, meta.finish());
        out.push(TAG_CAL_CURVES, curves.finish());
        out
    }

    pub fn from_container(c: &Container) -> Result<Self, CalibrationError> {
        let mut meta = Reader::new(c.require(TAG_CAL_META)?, "CALM");
        let fab_seed = meta.u64()?;
        let n = meta.u32()? as usize;
        for p in Param::ALL {
            if meta.str()? != p.name() {
                return Err(meta.error("parameter order").into());
            }
            meta.str()?;
        }
        meta.finish()?;
        let mut r = Reader::new(c.require(TAG_CAL_CURVES)?, "CALC");
        let mut curves = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(7);
            for _ in 0..7 {
                let len = r.u8()? as usize;
                if !(1..=8).contains(&len) {
                    return Err(r.error("polynomial degree").into());
                }
                row.push(CalibrationCurve {
                    coeffs: r.f64s(len)?,
                    center: r.f64()?,
                    scale: r.f64()?,
                    residual: r.f64()?,
                    lo: r.f64()?,
                    hi: r.f64()?,
                });
            }
            curves.push(row.try_into().expect("seven curves"));
        }
        r.finish()?;
        Ok(Self { fab_seed, curves })
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Measures and fits one parameter. When too few sweep points give a usable
/// reading (the circuit cannot reach part of the range), a second sweep with
/// the same number of points covers the span that did work.
pub fn calibrate_parameter(
    phys: &SubstratePhysiology,
    circuit: usize,
    param: Param,
    dac_sweep: &[u16],
    opts: &CalibOptions,
) -> Result<CalibrationCurve, CalibrationError> {
    let mut m = measure_parameter(phys, circuit, param, dac_sweep, opts)?;
    match fit_curve(&m) {
        Err(CalibrationError::Insufficient(_)) => {
            let valid = m.iter().filter(|x| x.value.is_some()).map(|x| x.dac);
            let (lo, hi) = (valid.clone().min(), valid.max());
            let (Some(lo), Some(hi)) = (lo, hi) else {
                return fit_curve(&m);
            };
            if hi <= lo {
                return fit_curve(&m);
            }
            let n = opts.sweep_points.max(4);
            let refined: Vec<u16> = (0..n)
                .map(|i| {
                    (f64::from(lo) + f64::from(hi - lo) * i as f64 / (n - 1) as f64).round() as u16
                })
                .collect();
            m.extend(measure_pass(phys, circuit, param, &refined, opts, 1)?);
            fit_curve(&m)
        }
        r => r,
    }
}

/// Measures and fits every parameter of every circuit.
pub fn calibrate_all(
    phys: &SubstratePhysiology,
    opts: &CalibOptions,
) -> Result<CalibrationStore, CalibrationError> {
    opts.validate()?;
    let sweeps = Param::ALL.map(|p| sweep(p, opts.sweep_points));
    let curves = (0..phys.len())
        .into_par_iter()
        .map(|circuit| {
            let mut row = Vec::with_capacity(7);
            for param in Param::ALL {
                let curve = calibrate_parameter(phys, circuit, param, &sweeps[param.index()], opts)
                    .map_err(|e| CalibrationError::Circuit {
                        circuit,
                        param,
                        source: Box::new(e),
                    })?;
                row.push(curve);
            }
            Ok(row.try_into().expect("seven curves"))
        })
        .collect::<Result<Vec<_>, CalibrationError>>()?;
    Ok(CalibrationStore {
        fab_seed: phys.fab_seed,
        curves,
    })
}

/// Realised hardware-domain values of every circuit after one write of
/// `dacs`, indexed `[param][circuit]`.
pub fn realised_population(
    phys: &SubstratePhysiology,
    dacs: &[[u16; 7]],
    variation: &VariationSpec,
    seed: u64,
) -> [Vec<f64>; 7] {
    let mut rng = seed::rng(seed);
    let mut out: [Vec<f64>; 7] = Default::default();
    for (circuit, d) in dacs.iter().enumerate() {
        for param in Param::ALL {
            let v = phys
                .curve(circuit, param)
                .value(f64::from(d[param.index()]));
            let eps = if variation.get(param) > 0.0 {
                Normal::new(0.0, variation.get(param))
                    .unwrap()
                    .sample(&mut rng)
            } else {
                0.0
            };
            out[param.index()].push(v * (1.0 + eps));
        }
    }
    out
}

/// Sample standard deviation over the absolute mean.
pub fn relative_sd(values: &[f64]) -> f64 {
    let m = mean(values.iter().copied());
    if values.len() < 2 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt() / m.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub parameter: String,
    pub target_hw: f64,
    pub uncalibrated_rel_sd: f64,
    pub calibrated_rel_sd: f64,
}

/// Population spread per parameter at nominal DACs versus calibrated DACs,
/// each with one write of trial noise.
pub fn spread_report(
    phys: &SubstratePhysiology,
    store: &CalibrationStore,
    targets: &NeuronTargets,
    variation: &VariationSpec,
    seed: u64,
) -> Result<Vec<SpreadRow>, CalibrationError> {
    store.check(phys)?;
    let nominal = vec![Param::ALL.map(nominal_dac); phys.len()];
    let calibrated: Vec<[u16; 7]> = (0..phys.len())
        .map(|c| store.dacs_for(c, targets))
        .collect();
    let before = realised_population(
        phys,
        &nominal,
        variation,
        seed::derive(seed, "uncalibrated"),
    );
    let after = realised_population(
        phys,
        &calibrated,
        variation,
        seed::derive(seed, "calibrated"),
    );
    Ok(Param::ALL
        .iter()
        .map(|p| SpreadRow {
            parameter: p.name().to_string(),
            target_hw: targets.hw(*p),
            uncalibrated_rel_sd: relative_sd(&before[p.index()]),
            calibrated_rel_sd: relative_sd(&after[p.index()]),
        })
        .collect())
}

pub fn write_spread_csv<W: Write>(rows: &[SpreadRow], out: W) -> Result<(), CalibrationError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GUnitTuning {
    pub g_unit: f64,
    /// Median over probe samples of the most active label neuron's rate, Hz.
    pub label_rate: f64,
    pub evaluations: Vec<(f64, f64)>,
}

pub const G_UNIT_RANGE: (f64, f64) = (0.1, 50.0);
pub const LABEL_RATE_BAND: (f64, f64) = (10.0, 60.0);
const LABEL_RATE_GOAL: (f64, f64) = (25.0, 35.0);

/// Median over samples of the maximum label rate for one `g_unit`.
pub fn label_rate_statistic(
    phys: &SubstratePhysiology,
    cfg: &HardwareNetworkConfig,
    targets: &NeuronTargets,
    variation: &VariationSpec,
    probe: &[Vec<f64>],
    sim: &SimParams,
    seed: u64,
) -> Result<f64, CalibrationError> {
    let net = configure(phys, cfg, targets, variation, seed::derive(seed, "trial"))?;
    let rec = run_rates(&net, probe, sim, seed::derive(seed, "inputs"))?;
    let mut peaks: Vec<f64> = rates_from_record(&rec)
        .iter()
        .map(|layers| {
            layers
                .last()
                .map_or(0.0, |l| l.iter().copied().fold(0.0, f64::max))
        })
        .collect();
    if peaks.is_empty() {
        return Ok(0.0);
    }
    peaks.sort_by(f64::total_cmp);
    let n = peaks.len();
    Ok(if n % 2 == 1 {
        peaks[n / 2]
    } else {
        0.5 * (peaks[n / 2 - 1] + peaks[n / 2])
    })
}

/// Log-scale bisection of `g_unit` toward label rates of about 30 Hz. The
/// result is accepted if the statistic lies in the 10–60 Hz band.
pub fn tune_g_unit(
    phys: &SubstratePhysiology,
    cfg: &HardwareNetworkConfig,
    targets: &NeuronTargets,
    variation: &VariationSpec,
    probe: &[Vec<f64>],
    sim: &SimParams,
    seed: u64,
) -> Result<GUnitTuning, CalibrationError> {
    let mut evaluations = Vec::new();
    let mut eval = |g: f64| -> Result<f64, CalibrationError> {
        let c = HardwareNetworkConfig {
            g_unit: g,
            ..cfg.clone()
        };
        let s = label_rate_statistic(phys, &c, targets, variation, probe, sim, seed)?;
        evaluations.push((g, s));
        Ok(s)
    };
    let (mut lo, mut hi) = G_UNIT_RANGE;
    let top = eval(hi)?;
    if top < LABEL_RATE_BAND.0 {
        return Err(CalibrationError::Unreachable(format!(
            "label rate {top:.2} Hz at g_unit {hi} nS is below {} Hz",
            LABEL_RATE_BAND.0
        )));
    }
    let bottom = eval(lo)?;
    if bottom > LABEL_RATE_BAND.1 {
        return Err(CalibrationError::Unreachable(format!(
            "label rate {bottom:.2} Hz at g_unit {lo} nS is above {} Hz",
            LABEL_RATE_BAND.1
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    let goal_mid = 0.5 * (LABEL_RATE_GOAL.0 + LABEL_RATE_GOAL.1);
    for _ in 0..24 {
        let mid = (lo * hi).sqrt();
        let s = eval(mid)?;
        if best.is_none_or(|(_, b)| (s - goal_mid).abs() < (b - goal_mid).abs()) {
            best = Some((mid, s));
        }
        if (LABEL_RATE_GOAL.0..=LABEL_RATE_GOAL.1).contains(&s) {
            break;
        }
        if s < goal_mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (g_unit, label_rate) = best.expect("at least one bisection step");
    if !(LABEL_RATE_BAND.0..=LABEL_RATE_BAND.1).contains(&label_rate) {
        return Err(CalibrationError::Unreachable(format!(
            "closest label rate {label_rate:.2} Hz at g_unit {g_unit:.3} nS"
        )));
    }
    Ok(GUnitTuning {
        g_unit,
        label_rate,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::physiology::fabricate;

    fn quiet() -> CalibOptions {
        CalibOptions {
            variation: VariationSpec::none(),
            repeats: 1,
            ..CalibOptions::default()
        }
    }

    #[test]
    fn noiseless_measurements_follow_the_curve() {
        let phys = fabricate(6, 17, 0.3).unwrap();
        let opts = quiet();
        for circuit in 0..6 {
            for param in Param::ALL {
                let m = measure_parameter(&phys, circuit, param, &sweep(param, 8), &opts).unwrap();
                let mut prev = f64::NEG_INFINITY;
                for x in &m {
                    let truth = phys.curve(circuit, param).value(f64::from(x.dac));
                    let Some(v) = x.value else { continue };
                    let span = phys.curve(circuit, param).range();
                    assert!(
                        (v - truth).abs() < 0.01 * truth.abs().max(0.1 * span),
                        "circuit {circuit} {param:?} dac {}: {v} vs {truth}",
                        x.dac
                    );
                    assert!(v > prev);
                    prev = v;
                }
                assert!(
                    m.iter().filter(|x| x.value.is_some()).count() >= 6,
                    "{param:?}"
                );
            }
        }
    }

    #[test]
    fn zero_weight_psp_is_flagged() {
        let phys = fabricate(1, 17, 0.3).unwrap();
        let opts = CalibOptions {
            psp_weight: 0.0,
            ..quiet()
        };
        let m = measure_parameter(&phys, 0, Param::TauSyn, &[300], &opts).unwrap();
        assert_eq!(m[0].value, None);
    }

    #[test]
    fn psp_fit_recovers_synthetic_tau() {
        // oracle: sampled closed-form double exponential
        let (tm, ts, h) = (18.0, 4.2, 0.2);
        let d: Vec<f64> = (1..400)
            .map(|k| {
                let s = k as f64 * h;
                0.3 * ((-s / tm).exp() - (-s / ts).exp())
            })
            .collect();
        let fit = fit_psp(&d, h, tm).unwrap();
        assert!((fit - ts).abs() < 1e-4 * ts, "{fit}");
    }

    #[test]
    fn reversal_oracle() {
        // oracle: steady states of the conductance equation at a and 2a
        let (el, e, a) = (-40.0, -80.0, 0.7);
        let u = |k: f64| el + k * a / (1.0 + k * a) * (e - el);
        let got = reversal_from_levels(el, u(1.0), u(2.0)).unwrap();
        assert!((got - e).abs() < 1e-9);
        assert_eq!(reversal_from_levels(el, el, el), None);
    }

    fn affine(points: &[(f64, u16)]) -> Vec<Measurement> {
        points
            .iter()
            .map(|&(v, d)| Measurement {
                dac: d,
                value: Some(v),
            })
            .collect()
    }

    #[test]
    fn affine_transfer_fits_exactly() {
        let m = affine(&[(1.0, 100), (2.0, 200), (3.0, 300), (4.0, 400), (5.0, 500)]);
        let c = fit_curve(&m).unwrap();
        assert!(c.residual < 1e-12);
        assert!(c.coeffs[2].abs() < 1e-9);
        assert_eq!(c.dac_for(2.5), 250);
    }

    #[test]
    fn three_points_are_not_enough() {
        let mut m = affine(&[(1.0, 100), (2.0, 200), (3.0, 300)]);
        m.push(Measurement {
            dac: 400,
            value: None,
        });
        assert!(matches!(
            fit_curve(&m),
            Err(CalibrationError::Insufficient(3))
        ));
        let same = affine(&[(1.0, 100), (1.0, 200), (1.0, 300), (1.0, 400)]);
        assert!(matches!(
            fit_curve(&same),
            Err(CalibrationError::Degenerate)
        ));
    }

    #[test]
    fn mismatched_curve_round_trips_within_three_percent() {
        // oracle: forward-evaluate the fabrication curve at the fitted DAC
        let phys = fabricate(64, 23, 0.3).unwrap();
        let t = NeuronTargets::default();
        for circuit in 0..64 {
            for param in Param::ALL {
                let curve = phys.curve(circuit, param);
                let m: Vec<Measurement> = sweep(param, 8)
                    .into_iter()
                    .map(|d| Measurement {
                        dac: d,
                        value: Some(curve.value(f64::from(d))),
                    })
                    .collect();
                let fit = fit_curve(&m).unwrap();
                let got = curve.value(f64::from(fit.dac_for(t.hw(param))));
                assert!(
                    (got - t.hw(param)).abs() < 0.03 * t.hw(param),
                    "circuit {circuit} {param:?}: {got}"
                );
            }
        }
    }

    #[test]
    fn noiseless_calibration_removes_spread() {
        let phys = fabricate(8, 29, 0.0).unwrap();
        let store = calibrate_all(&phys, &quiet()).unwrap();
        let rows = spread_report(
            &phys,
            &store,
            &NeuronTargets::default(),
            &VariationSpec::none(),
            1,
        )
        .unwrap();
        for r in rows {
            assert!(r.calibrated_rel_sd < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn store_round_trip_and_seed_check() {
        let phys = fabricate(3, 31, 0.3).unwrap();
        let store = calibrate_all(&phys, &quiet()).unwrap();
        let back = CalibrationStore::from_container(&store.to_container()).unwrap();
        assert_eq!(back, store);
        store.check(&phys).unwrap();
        let other = fabricate(3, 32, 0.3).unwrap();
        assert!(matches!(
            store.check(&other),
            Err(CalibrationError::SeedMismatch { .. })
        ));
        assert_eq!(calibrate_all(&phys, &quiet()).unwrap(), store);
    }
}
