//! Files a run reads and writes: dataset archives, manifests and CSV tables.
//!
//! CSV schemas:
//! - `losses.csv`: `iteration,M,G,C,J`
//! - `led_pattern.csv`: `iteration,led_index,grid_row,grid_col,weight`
//! - eval output: `m,mean_M,mean_G,samples`
//! - `mi_report.csv`: `snapshot,bits,samples,bins`

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fpm_core::data::ComplexDataset;
use fpm_core::infotheory::MiReportRow;
use fpm_core::objective::LossReport;
use fpm_core::trainer::EvalSummary;
use fpm_core::{LedGeometry, OpticalConfig, Preset};
use serde::{Deserialize, Serialize};

use crate::failure::{io_failure, require_exists, CliResult, Failure};

pub const DATASET_FILE: &str = "dataset.fpmd";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LOSSES_FILE: &str = "losses.csv";
pub const LED_PATTERN_FILE: &str = "led_pattern.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_DIR: &str = "reports";

/// Resolves a preset id or a configuration file to `(id, config)`.
pub fn resolve_preset(arg: &str) -> CliResult<(String, OpticalConfig)> {
    if let Ok(p) = arg.parse::<Preset>() {
        return Ok((p.id().to_string(), p.config()));
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "preset {arg:?} is neither table1, table2, table3 nor a configuration file"
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(("custom".to_string(), OpticalConfig::from_toml_str(&text)?))
}

/// A dataset directory resolves to the archive inside it.
pub fn dataset_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(DATASET_FILE)
    } else {
        arg.to_path_buf()
    }
}

pub fn load_dataset(arg: &Path) -> CliResult<ComplexDataset> {
    let path = dataset_path(arg);
    require_exists(&path, "dataset")?;
    Ok(ComplexDataset::load(&path)?)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

pub fn write_manifest<T: Serialize>(path: &Path, manifest: &T) -> CliResult<()> {
    let text = toml::to_string(manifest).map_err(|e| Failure::runtime(format!("manifest: {e}")))?;
    write_text(path, &text)
}

pub fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    require_exists(path, "manifest")?;
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub command: String,
    pub dataset: String,
    pub encoder: String,
    pub preset: String,
    pub archive: String,
    pub objects: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub optics: OpticalConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainManifest {
    pub command: String,
    pub version: String,
    pub data: PathBuf,
    pub dataset: String,
    pub preset: String,
    pub case: u8,
    pub m: f64,
    pub seed: u64,
    pub iterations_requested: u64,
    pub iterations_completed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: bool,
    pub adversarial: bool,
    pub train_objects: usize,
    pub parameter_count: usize,
    pub status: String,
    pub losses: String,
    pub led_pattern: String,
    pub initial_checkpoint: String,
    pub final_checkpoint: String,
}

fn csv_writer(out: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            Box::new(fs::File::create(path).map_err(|e| io_failure(path, e))?)
        }
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn write_rows<T: Serialize>(out: Option<&Path>, rows: &[T], header: &[&str]) -> CliResult<()> {
    let mut w = csv_writer(out)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Failure::runtime(format!("csv: {e}")))
}

pub fn write_losses(path: &Path, reports: &[LossReport]) -> CliResult<()> {
    write_rows(Some(path), reports, &LossReport::CSV_HEADER)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedRow {
    pub iteration: u64,
    pub led_index: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub weight: f64,
}

pub const LED_HEADER: [&str; 5] = ["iteration", "led_index", "grid_row", "grid_col", "weight"];

pub fn led_rows(geometry: &LedGeometry, snapshots: &[(u64, Vec<f64>)]) -> Vec<LedRow> {
    snapshots
        .iter()
        .flat_map(|(it, w)| {
            w.iter().enumerate().map(move |(i, &weight)| LedRow {
                iteration: *it,
                led_index: i,
                grid_row: geometry.cells[i].0,
                grid_col: geometry.cells[i].1,
                weight,
            })
        })
        .collect()
}

pub fn write_led_pattern(path: &Path, rows: &[LedRow]) -> CliResult<()> {
    write_rows(Some(path), rows, &LED_HEADER)
}

/// Groups `led_pattern.csv` rows by iteration, weights in LED order.
pub fn read_led_pattern(path: &Path) -> CliResult<BTreeMap<u64, Vec<f64>>> {
    require_exists(path, "pattern file")?;
    let mut r = csv::Reader::from_path(path)?;
    let mut by_iter: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for row in r.deserialize() {
        let row: LedRow = row?;
        by_iter.entry(row.iteration).or_default().push((row.led_index, row.weight));
    }
    by_iter
        .into_iter()
        .map(|(it, mut w)| {
            w.sort_by_key(|&(i, _)| i);
            if w.iter().enumerate().any(|(k, &(i, _))| k != i) {
                return Err(Failure::usage(format!(
                    "{}: iteration {it} does not list LEDs 0..{} exactly once",
                    path.display(),
                    w.len()
                )));
            }
            Ok((it, w.into_iter().map(|(_, v)| v).collect()))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct EvalRow {
    m: f64,
    #[serde(rename = "mean_M")]
    mean_m: f64,
    #[serde(rename = "mean_G")]
    mean_g: f64,
    samples: usize,
}

pub fn write_eval(out: Option<&Path>, rows: &[EvalSummary]) -> CliResult<()> {
    let rows: Vec<EvalRow> = rows
        .iter()
        .map(|s| EvalRow {
            m: s.m,
            mean_m: s.mean_m,
            mean_g: s.mean_g,
            samples: s.samples,
        })
        .collect();
    write_rows(out, &rows, &["m", "mean_M", "mean_G", "samples"])
}

pub fn write_mi(out: Option<&Path>, rows: &[MiReportRow]) -> CliResult<()> {
    write_rows(out, rows, &["snapshot", "bits", "samples", "bins"])
}
