//! File formats: DSV1 grids, checkpoints, run configs, and CSV reports.
//!
//! Every writer in this module is atomic: bytes go to a uniquely named
//! temporary file in the destination directory which is then renamed over
//! the target, so readers never observe a half-written file.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod dsv1;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent)
        .map_err(|e| Error::io(display.clone(), e))?;
    tmp.write_all(bytes)
        .map_err(|e| Error::io(display.clone(), e))?;
    tmp.flush().map_err(|e| Error::io(display.clone(), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(display, e.error))?;
    Ok(())
}

/// Read a whole file, annotating I/O errors with the path.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}
