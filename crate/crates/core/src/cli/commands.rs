//! Phase implementations shared by the individual commands and `pipeline`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{GUnitPolicy, RunConfig};
use super::manifest::Manifest;
use super::{CliError, Command};
use crate::calibration::{
    calibrate_all, spread_report, write_spread_csv, CalibrationStore, SpreadRow,
};
use crate::dataset::{
    cache_from_bytes, cache_to_bytes, load_mnist_dir, reduce, DatasetSplit, Image, DEFAULT_CLASSES,
    EXPECTED_TEST, EXPECTED_TRAIN,
};
use crate::loop_trainer::{
    configure_iteration, convert, eval_subset, evaluate_net, place, train_itl, weight_migration,
    write_migration_csv, Hardware, ShadowState,
};
use crate::relu_net::{accuracy, train_software, Checkpoint};
use crate::seed;
use crate::substrate::{
    classify_hw, fabricate, rates_from_record, run_rates, write_raster, HardwareNetworkConfig,
    SubstratePhysiology,
};

pub const DATASET: &str = "dataset.bin";
pub const SW_CHECKPOINT: &str = "software.ckpt";
pub const SW_METRICS: &str = "software_metrics.csv";
pub const CALIBRATION: &str = "calibration.bin";
pub const SPREAD: &str = "calibration_spread.csv";
pub const HW_CONFIG: &str = "hw_config.bin";
pub const CONVERSION: &str = "conversion.json";
pub const ITL_METRICS: &str = "itl_metrics.csv";
pub const ITL_CHECKPOINT: &str = "itl_shadow.ckpt";
pub const ITL_CONFIG: &str = "itl_config.bin";
pub const MIGRATION: &str = "migration.csv";
pub const RASTER: &str = "raster.csv";
pub const VERDICTS: &str = "raster_verdicts.csv";
pub const SUMMARY: &str = "summary.csv";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| CliError::io(path, e))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "missing {what}: {}",
            path.display()
        )))
    }
}

/// `path` relative to the run directory when it lies inside it.
fn rel(cfg: &RunConfig, path: &Path) -> String {
    path.strip_prefix(&cfg.run_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn record(cfg: &RunConfig, command: &str, files: &[&Path]) -> Result<(), CliError> {
    let names: Vec<String> = files.iter().map(|p| rel(cfg, p)).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| CliError::io(&cfg.run_dir, e))?;
    Manifest::record(&cfg.run_dir, cfg, command, &refs)
}

fn out_path(cfg: &RunConfig, given: Option<&PathBuf>, default: &str) -> PathBuf {
    match given {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => cfg.run_dir.join(p),
        None => cfg.run_dir.join(default),
    }
}

fn in_path(cfg: &RunConfig, given: Option<&PathBuf>, default: &str) -> PathBuf {
    given.cloned().unwrap_or_else(|| cfg.run_dir.join(default))
}

/// Reduced split from the MNIST directory, with the count check for the
/// default class set.
pub fn build_split(cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    let (train, test) = load_mnist_dir(&cfg.data.mnist_dir)?;
    let split = reduce(&train, &test, &cfg.class_set()?);
    if cfg.data.check_counts
        && cfg.data.classes == DEFAULT_CLASSES
        && (split.train.len() != EXPECTED_TRAIN || split.test.len() != EXPECTED_TEST)
    {
        return Err(CliError::Data(format!(
            "reduced split has {} train / {} test images, expected {EXPECTED_TRAIN} / {EXPECTED_TEST}",
            split.train.len(),
            split.test.len()
        )));
    }
    Ok(split)
}

/// Cached split from the run directory, or a fresh reduction.
pub fn load_split(cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    let path = cfg.run_dir.join(DATASET);
    if path.exists() {
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let split = cache_from_bytes(&bytes)?;
        if split.classes.digits() != cfg.data.classes.as_slice() {
            return Err(CliError::Config(format!(
                "cached dataset {} holds classes {:?}, config asks for {:?}",
                path.display(),
                split.classes.digits(),
                cfg.data.classes
            )));
        }
        return Ok(split);
    }
    build_split(cfg)
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    let split = build_split(cfg)?;
    let path = cfg.run_dir.join(DATASET);
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| CliError::io(&cfg.run_dir, e))?;
    std::fs::write(&path, cache_to_bytes(&split)).map_err(|e| CliError::io(&path, e))?;
    println!(
        "classes {:?}: train {} test {}",
        split.classes.digits(),
        split.train.len(),
        split.test.len()
    );
    record(cfg, "prepare", &[&path])?;
    Ok(split)
}

pub fn hardware(cfg: &RunConfig) -> Result<Hardware, CliError> {
    let s = &cfg.substrate;
    let phys = fabricate(s.circuits, s.fab_seed, s.raw_spread)?;
    Ok(Hardware {
        phys,
        targets: s.targets.clone(),
        variation: s.variation.clone(),
        sim: s.sim.clone(),
        nu_tot: s.nu_tot,
    })
}

pub fn cmd_train_sw(cfg: &RunConfig, split: &DatasetSplit) -> Result<f64, CliError> {
    let out = train_software(
        split,
        &cfg.topology()?,
        &cfg.hyper(),
        cfg.phase_seed("software"),
    )?;
    let acc = accuracy(&out.weights, &split.test);
    let ckpt = cfg.run_dir.join(SW_CHECKPOINT);
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| CliError::io(&cfg.run_dir, e))?;
    Checkpoint {
        weights: out.weights,
        velocity: out.velocity,
        step: out.metrics.len() as u64,
        seed: cfg.phase_seed("software"),
    }
    .save(&ckpt)?;
    let metrics = cfg.run_dir.join(SW_METRICS);
    let mut w = csv::Writer::from_writer(create(&metrics)?);
    for m in &out.metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| CliError::io(&metrics, e))?;
    drop(w);
    println!(
        "software test accuracy {acc:.4} ({} images)",
        split.test.len()
    );
    record(cfg, "train-sw", &[&ckpt, &metrics])?;
    Ok(acc)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<(SubstratePhysiology, CalibrationStore), CliError> {
    let s = &cfg.substrate;
    let phys = fabricate(s.circuits, s.fab_seed, s.raw_spread)?;
    let store = calibrate_all(&phys, &cfg.calib_options())?;
    let path = cfg.run_dir.join(CALIBRATION);
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| CliError::io(&cfg.run_dir, e))?;
    store.save(&path)?;
    println!(
        "calibrated {} circuits (fabrication seed {})",
        phys.len(),
        phys.fab_seed
    );
    record(cfg, "calibrate", &[&path])?;
    Ok((phys, store))
}

pub fn cmd_calib_report(cfg: &RunConfig, calib: &Path) -> Result<Vec<SpreadRow>, CliError> {
    require(calib, "calibration store")?;
    let hw = hardware(cfg)?;
    let store = CalibrationStore::load(calib)?;
    let rows = spread_report(
        &hw.phys,
        &store,
        &hw.targets,
        &hw.variation,
        cfg.phase_seed("calib-report"),
    )?;
    let path = cfg.run_dir.join(SPREAD);
    write_spread_csv(&rows, create(&path)?)?;
    println!(
        "{:<10} {:>12} {:>14} {:>12}",
        "parameter", "target_hw", "uncalibrated", "calibrated"
    );
    for r in &rows {
        println!(
            "{:<10} {:>12.3} {:>13.2}% {:>11.2}%",
            r.parameter,
            r.target_hw,
            100.0 * r.uncalibrated_rel_sd,
            100.0 * r.calibrated_rel_sd
        );
    }
    record(cfg, "calib-report", &[&path])?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConversionInfo {
    pub g_unit: f64,
    pub label_rate_hz: Option<f64>,
    pub tuning_evaluations: usize,
    pub placement: Vec<u32>,
}

pub fn cmd_convert(
    cfg: &RunConfig,
    split: &DatasetSplit,
    sw_checkpoint: &Path,
    calib: &Path,
    out: &Path,
) -> Result<HardwareNetworkConfig, CliError> {
    require(sw_checkpoint, "software checkpoint")?;
    require(calib, "calibration store")?;
    let w = Checkpoint::load(sw_checkpoint)?.weights;
    let store = CalibrationStore::load(calib)?;
    let hw = hardware(cfg)?;
    let n: usize = w.topology().layer_sizes[1..].iter().sum();
    let placement = place(n, hw.phys.len(), cfg.phase_seed("placement"))?;
    let g0 = match cfg.conversion.g_unit {
        GUnitPolicy::Fixed(g) => g,
        GUnitPolicy::Tune => 1.0,
    };
    let mut hw_cfg = convert(&w, &hw.phys, &store, &hw.targets, &placement, g0)?;
    let mut info = ConversionInfo {
        g_unit: g0,
        label_rate_hz: None,
        tuning_evaluations: 0,
        placement,
    };
    if cfg.conversion.g_unit == GUnitPolicy::Tune {
        let probe: Vec<&Image> = split
            .train
            .iter()
            .take(cfg.conversion.probe_samples)
            .collect();
        let (tuned, t) = hw.tune(&hw_cfg, &probe, cfg.phase_seed("g_unit"))?;
        hw_cfg = tuned;
        info.g_unit = t.g_unit;
        info.label_rate_hz = Some(t.label_rate);
        info.tuning_evaluations = t.evaluations.len();
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    hw_cfg.save(out)?;
    let info_path = cfg.run_dir.join(CONVERSION);
    write_json(&info_path, &info)?;
    println!(
        "converted {} synapses, g_unit {:.4} nS{}",
        hw_cfg.synapses.len(),
        info.g_unit,
        info.label_rate_hz
            .map(|r| format!(" (probe label rate {r:.1} Hz)"))
            .unwrap_or_default()
    );
    record(cfg, "convert", &[out, &info_path])?;
    Ok(hw_cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub config: String,
    pub iteration: usize,
    pub images: usize,
    pub accuracy: f64,
    pub mean_label_rate_hz: f64,
}

pub fn cmd_eval_hw(
    cfg: &RunConfig,
    split: &DatasetSplit,
    hw_config: &Path,
    subset: Option<usize>,
    iteration: usize,
    out: &Path,
) -> Result<EvalResult, CliError> {
    require(hw_config, "hardware configuration")?;
    let hw_cfg = HardwareNetworkConfig::load(hw_config)?;
    let hw = hardware(cfg)?;
    let itl = cfg.itl_config();
    let images: Vec<&Image> = match subset {
        Some(n) => eval_subset(split, n, seed::derive(itl.seed, "eval/subset"))
            .into_iter()
            .map(|i| &split.test[i])
            .collect(),
        None => split.test.iter().collect(),
    };
    let net = configure_iteration(&hw, &hw_cfg, &itl, iteration)?;
    let (acc, rate) = evaluate_net(&hw, &net, &images, cfg.phase_seed("eval"))?;
    let result = EvalResult {
        config: rel(cfg, hw_config),
        iteration,
        images: images.len(),
        accuracy: acc,
        mean_label_rate_hz: rate,
    };
    write_json(out, &result)?;
    println!(
        "substrate accuracy {acc:.4} on {} images (iteration {iteration})",
        images.len()
    );
    record(cfg, "eval-hw", &[out])?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct ItlSummary {
    pub conversion_subset: Option<f64>,
    pub final_subset: Option<f64>,
    pub near_diagonal: f64,
}

pub fn cmd_train_itl(
    cfg: &RunConfig,
    split: &DatasetSplit,
    sw_checkpoint: &Path,
    hw_config: &Path,
    metrics_out: &Path,
) -> Result<ItlSummary, CliError> {
    require(sw_checkpoint, "software checkpoint")?;
    require(hw_config, "hardware configuration")?;
    let ckpt = Checkpoint::load(sw_checkpoint)?;
    let template = HardwareNetworkConfig::load(hw_config)?;
    let hw = hardware(cfg)?;
    let itl = cfg.itl_config();
    let out = train_itl(ShadowState::new(ckpt.weights), &template, split, &hw, &itl)?;
    out.metrics.write_csv(create(metrics_out)?)?;
    let hists = weight_migration(&out.initial, &out.last)?;
    let migration = cfg.run_dir.join(MIGRATION);
    write_migration_csv(&hists, create(&migration)?)?;
    let shadow = cfg.run_dir.join(ITL_CHECKPOINT);
    Checkpoint {
        weights: out.state.weights.clone(),
        velocity: out.state.velocity.clone(),
        step: out.state.iteration as u64,
        seed: itl.seed,
    }
    .save(&shadow)?;
    let last = cfg.run_dir.join(ITL_CONFIG);
    out.last.save(&last)?;
    let summary = ItlSummary {
        conversion_subset: out.metrics.conversion_accuracy(),
        final_subset: out.metrics.final_accuracy(),
        near_diagonal: crate::loop_trainer::near_diagonal_fraction(&hists, 2),
    };
    let fmt = |a: Option<f64>| a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "ITL {} iterations: subset accuracy {} -> {}, {:.1}% of synapses within 2 steps",
        itl.iterations,
        fmt(summary.conversion_subset),
        fmt(summary.final_subset),
        100.0 * summary.near_diagonal
    );
    record(cfg, "train-itl", &[metrics_out, &migration, &shadow, &last])?;
    Ok(summary)
}

pub fn cmd_raster(
    cfg: &RunConfig,
    split: &DatasetSplit,
    hw_config: &Path,
    per_class: usize,
    iteration: usize,
) -> Result<(), CliError> {
    require(hw_config, "trained configuration")?;
    let hw_cfg = HardwareNetworkConfig::load(hw_config)?;
    let hw = hardware(cfg)?;
    let mut images: Vec<&Image> = Vec::new();
    for class in 0..split.classes.len() {
        images.extend(
            split
                .test
                .iter()
                .filter(|i| i.class == class)
                .take(per_class),
        );
    }
    let net = configure_iteration(&hw, &hw_cfg, &cfg.itl_config(), iteration)?;
    let rec = run_rates(
        &net,
        &hw.input_rates(&images),
        &hw.sim,
        cfg.phase_seed("raster"),
    )?;
    let raster = cfg.run_dir.join(RASTER);
    write_raster(&rec, create(&raster)?)?;
    let verdicts = cfg.run_dir.join(VERDICTS);
    let mut w = csv::Writer::from_writer(create(&verdicts)?);
    w.write_record([
        "sample_index",
        "digit",
        "class",
        "predicted_class",
        "correct",
    ])?;
    let rates = rates_from_record(&rec);
    let mut correct = 0;
    for (i, (img, layers)) in images.iter().zip(&rates).enumerate() {
        let predicted = classify_hw(layers.last().map(Vec::as_slice).unwrap_or(&[]));
        correct += usize::from(predicted == img.class);
        w.write_record(&[
            i.to_string(),
            img.digit.to_string(),
            img.class.to_string(),
            predicted.to_string(),
            u8::from(predicted == img.class).to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&verdicts, e))?;
    drop(w);
    println!(
        "raster of {} samples, {correct} classified correctly",
        images.len()
    );
    record(cfg, "raster", &[&raster, &verdicts])?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub fab_seed: u64,
    pub software_accuracy: f64,
    pub conversion_accuracy: f64,
    pub itl_accuracy: Option<f64>,
}

/// Phase A to C for one seed bundle.
pub fn pipeline_bundle(
    cfg: &RunConfig,
    split: &DatasetSplit,
    skip_itl: bool,
) -> Result<SummaryRow, CliError> {
    let dir = &cfg.run_dir;
    let software = cmd_train_sw(cfg, split).map_err(|e| e.phase("software"))?;
    cmd_calibrate(cfg).map_err(|e| e.phase("calibration"))?;
    let (ckpt, calib, hw_cfg) = (
        dir.join(SW_CHECKPOINT),
        dir.join(CALIBRATION),
        dir.join(HW_CONFIG),
    );
    cmd_convert(cfg, split, &ckpt, &calib, &hw_cfg).map_err(|e| e.phase("conversion"))?;
    let conversion = cmd_eval_hw(
        cfg,
        split,
        &hw_cfg,
        None,
        0,
        &dir.join("eval_conversion.json"),
    )
    .map_err(|e| e.phase("conversion"))?
    .accuracy;
    let itl_accuracy = if skip_itl {
        None
    } else {
        cmd_train_itl(cfg, split, &ckpt, &hw_cfg, &dir.join(ITL_METRICS))
            .map_err(|e| e.phase("itl"))?;
        let r = cmd_eval_hw(
            cfg,
            split,
            &dir.join(ITL_CONFIG),
            None,
            cfg.itl.iterations,
            &dir.join("eval_itl.json"),
        )
        .map_err(|e| e.phase("itl"))?;
        Some(r.accuracy)
    };
    Ok(SummaryRow {
        seed: cfg.seed,
        fab_seed: cfg.substrate.fab_seed,
        software_accuracy: software,
        conversion_accuracy: conversion,
        itl_accuracy,
    })
}

pub fn cmd_pipeline(
    cfg: &RunConfig,
    skip_itl: bool,
    seeds: u64,
) -> Result<Vec<SummaryRow>, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let split = cmd_prepare(cfg).map_err(|e| e.phase("data"))?;
    let mut rows = Vec::new();
    for k in 0..seeds {
        let bundle = if seeds == 1 {
            cfg.clone()
        } else {
            cfg.bundle(k)
        };
        rows.push(pipeline_bundle(&bundle, &split, skip_itl)?);
    }
    let path = cfg.run_dir.join(SUMMARY);
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    drop(w);
    println!();
    println!(
        "{:>6} {:>9} {:>9} {:>11} {:>9}",
        "seed", "fab_seed", "software", "conversion", "itl"
    );
    for r in &rows {
        println!(
            "{:>6} {:>9} {:>9.4} {:>11.4} {:>9}",
            r.seed,
            r.fab_seed,
            r.software_accuracy,
            r.conversion_accuracy,
            r.itl_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    record(cfg, "pipeline", &[&path])?;
    Ok(rows)
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Prepare { .. } => cmd_prepare(cfg).map(drop),
        Command::TrainSw { .. } => cmd_train_sw(cfg, &load_split(cfg)?).map(drop),
        Command::Calibrate { .. } => cmd_calibrate(cfg).map(drop),
        Command::CalibReport { calib, .. } => {
            cmd_calib_report(cfg, &in_path(cfg, calib.as_ref(), CALIBRATION)).map(drop)
        }
        Command::Convert {
            sw_checkpoint,
            calib,
            out,
            ..
        } => cmd_convert(
            cfg,
            &load_split(cfg)?,
            &in_path(cfg, sw_checkpoint.as_ref(), SW_CHECKPOINT),
            &in_path(cfg, calib.as_ref(), CALIBRATION),
            &out_path(cfg, out.as_ref(), HW_CONFIG),
        )
        .map(drop),
        Command::TrainItl {
            sw_checkpoint,
            hw_config,
            metrics_out,
            ..
        } => cmd_train_itl(
            cfg,
            &load_split(cfg)?,
            &in_path(cfg, sw_checkpoint.as_ref(), SW_CHECKPOINT),
            &in_path(cfg, hw_config.as_ref(), HW_CONFIG),
            &out_path(cfg, metrics_out.as_ref(), ITL_METRICS),
        )
        .map(drop),
        Command::EvalHw {
            hw_config,
            subset,
            iteration,
            out,
        } => cmd_eval_hw(
            cfg,
            &load_split(cfg)?,
            &in_path(cfg, hw_config.as_ref(), HW_CONFIG),
            *subset,
            *iteration,
            &out_path(cfg, Some(out), "eval_hw.json"),
        )
        .map(drop),
        Command::Pipeline {
            skip_itl, seeds, ..
        } => cmd_pipeline(cfg, *skip_itl, *seeds).map(drop),
        Command::Raster {
            hw_config,
            per_class,
            iteration,
        } => cmd_raster(
            cfg,
            &load_split(cfg)?,
            &in_path(cfg, hw_config.as_ref(), ITL_CONFIG),
            *per_class,
            iteration.unwrap_or(cfg.itl.iterations),
        ),
    }
}
