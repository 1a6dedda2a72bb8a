//! Output directories, run manifests and CSV writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use mitr_core::data::{generate_synthetic, load_archive, FeatureArchive};
use mitr_core::evalkit::{MetricReport, METRIC_COLUMNS};
use mitr_core::losses::{LossBreakdown, Setting};
use mitr_core::pipeline::{DataSource, EpochRecord, RunConfig};
use mitr_core::{Error, Result};

use crate::{DEFAULT_OUT_ROOT, OUT_ENV};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub version: String,
    pub wall_clock_secs: f64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `--out`, then the config's `out`, then `$MITR_OUT/<command>`, then
/// `runs/<command>`.
pub fn resolve_out(flag: Option<&Path>, config: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag.or(config) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    root.join(command)
}

/// Runs `body` and writes exactly one manifest into `out`, whatever the outcome.
pub fn with_manifest<E: From<Error> + std::fmt::Display>(
    command: &str,
    config: Option<&Path>,
    seeds: &[u64],
    out: &Path,
    body: impl FnOnce() -> std::result::Result<(), E>,
) -> std::result::Result<(), E> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let result = body();
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.map(Path::to_path_buf),
        seeds: seeds.to_vec(),
        out: out.to_path_buf(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    result
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a run config; an unreadable file counts as a configuration error.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read config {}: {source}", path.display())),
        other => other,
    })
}

pub fn load_data(source: &DataSource) -> Result<FeatureArchive> {
    let archive = match source {
        DataSource::Archive(dir) => load_archive(dir)?,
        DataSource::Synth(spec) => generate_synthetic(spec)?,
    };
    for w in archive.warnings() {
        log::warn!("{w}");
    }
    Ok(archive)
}

pub fn history_header() -> String {
    let mut cols = vec!["epoch"];
    cols.extend(LossBreakdown::COLUMNS);
    cols.push("val_mae");
    cols.join(",")
}

/// Per-epoch losses. In the complete setting only `task`, `total` and
/// `val_mae` are filled.
pub fn history_csv(history: &[EpochRecord], setting: Setting) -> String {
    let mut s = history_header();
    s.push('\n');
    for r in history {
        let b = &r.loss;
        let _ = write!(s, "{},{}", r.epoch, b.task);
        for v in &b.components()[1..] {
            match setting {
                Setting::Complete => s.push(','),
                Setting::Incomplete => {
                    let _ = write!(s, ",{v}");
                }
            }
        }
        let _ = writeln!(s, ",{},{}", b.total, r.val_mae);
    }
    s
}

pub fn metric_cells(m: &MetricReport) -> String {
    m.values().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

pub fn metric_header() -> String {
    METRIC_COLUMNS.join(",")
}

/// Reads a CSV written by this crate back as a header and rows of cells.
pub fn read_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines
        .next()
        .map(|l| l.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}
