//! Hand-rolled CSV for the three tabular sidecar files: the dataset
//! manifest, per-iteration training loss logs, and per-case metric
//! reports. Fields never contain commas, quotes, or newlines — writers
//! reject such values instead of quoting them — so the format stays
//! trivially parseable by anything.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};

/// One dataset case as listed in `manifest.csv`. Paths are stored as
/// written (normally relative to the manifest's directory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub domain: String,
    pub volume_path: String,
    pub organ_path: String,
    pub lesion_path: String,
}

impl ManifestEntry {
    /// Resolve a stored path against the manifest's directory.
    pub fn resolve(base: &Path, stored: &str) -> PathBuf {
        let p = Path::new(stored);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub const MANIFEST_HEADER: &str = "case_id,domain,volume_path,organ_path,lesion_path";

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case_id: String,
    pub stage: String,
    pub dsc: f64,
    pub asd: f64,
    pub hd95: f64,
    pub centroid_mm: f64,
    /// Set when any of the distance values is a standardized fallback.
    pub fallback: bool,
}

pub const METRICS_HEADER: &str = "case_id,stage,dsc,asd,hd95,centroid_mm,fallback_flag";

/// One row of the training loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub seg: f64,
    pub dis: f64,
    pub tran: f64,
    pub con: f64,
    pub cos: f64,
    pub all: f64,
    pub lr: f64,
}

pub const LOSS_HEADER: &str = "iter,seg,dis,tran,con,cos,all,lr";

fn check_field(v: &str) -> Result<()> {
    if v.contains([',', '"', '\n', '\r']) {
        return Err(Error::ConfigError(format!(
            "csv field {v:?} contains a delimiter or newline"
        )));
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Write the dataset manifest.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        for f in [
            &e.case_id,
            &e.domain,
            &e.volume_path,
            &e.organ_path,
            &e.lesion_path,
        ] {
            check_field(f)?;
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.case_id, e.domain, e.volume_path, e.organ_path, e.lesion_path
        ));
    }
    atomic_write(path, out.as_bytes())
}

fn split_rows(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::FormatError {
        path: path.display().to_string(),
        reason: format!("not utf-8: {e}"),
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header => {}
        other => {
            return Err(Error::FormatError {
                path: path.display().to_string(),
                reason: format!("bad header {other:?}, expected {expected_header:?}"),
            })
        }
    }
    let ncols = expected_header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != ncols {
            return Err(Error::FormatError {
                path: path.display().to_string(),
                reason: format!("row {} has {} fields, expected {ncols}", i + 2, fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// Read the dataset manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(split_rows(path, MANIFEST_HEADER)?
        .into_iter()
        .map(|f| ManifestEntry {
            case_id: f[0].clone(),
            domain: f[1].clone(),
            volume_path: f[2].clone(),
            organ_path: f[3].clone(),
            lesion_path: f[4].clone(),
        })
        .collect())
}

/// Write the per-case evaluation report.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        check_field(&r.case_id)?;
        check_field(&r.stage)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.case_id,
            r.stage,
            fmt(r.dsc),
            fmt(r.asd),
            fmt(r.hd95),
            fmt(r.centroid_mm),
            u8::from(r.fallback)
        ));
    }
    atomic_write(path, out.as_bytes())
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::FormatError {
        path: path.display().to_string(),
        reason: format!("bad number {s:?}"),
    })
}

/// Read an evaluation report back (used by tests and the experiment
/// driver).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    split_rows(path, METRICS_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(MetricsRow {
                case_id: f[0].clone(),
                stage: f[1].clone(),
                dsc: parse_f64(path, &f[2])?,
                asd: parse_f64(path, &f[3])?,
                hd95: parse_f64(path, &f[4])?,
                centroid_mm: parse_f64(path, &f[5])?,
                fallback: f[6] == "1",
            })
        })
        .collect()
}

/// Write the training loss log.
pub fn write_loss_log(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.8e}\n",
            r.iter,
            fmt(r.seg),
            fmt(r.dis),
            fmt(r.tran),
            fmt(r.con),
            fmt(r.cos),
            fmt(r.all),
            r.lr
        ));
    }
    atomic_write(path, out.as_bytes())
}
