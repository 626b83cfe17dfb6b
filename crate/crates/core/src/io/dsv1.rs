//! DSV1: the bit-exact grid container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DSV1"
//! 4       1     dtype: 1 = f32 volume, 2 = u8 mask, 3 = f32 distance map
//! 5       12    dims, three u32 (z, y, x)
//! 17      12    spacing, three f32 (mm, z, y, x)
//! 29      ...   payload, z-major: f32 per voxel (dtypes 1, 3) or u8 (dtype 2)
//! ```
//!
//! A 2×2×2 f32 volume is therefore 4+1+12+12+32 = 61 bytes. Values are
//! stored as f32, so writing quantizes; reading a file and writing it
//! again is byte-identical, and write→read is bit-equal for any grid
//! whose values are f32-representable (everything the phantom generator
//! and the file readers produce). Trailing bytes after the payload are
//! rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, Spacing, Volume};
use crate::io::{atomic_write, read_bytes};
use crate::sdt::DistanceMap;

const MAGIC: &[u8; 4] = b"DSV1";
const DTYPE_VOLUME: u8 = 1;
const DTYPE_MASK: u8 = 2;
const DTYPE_DISTANCE: u8 = 3;
const HEADER_LEN: usize = 4 + 1 + 12 + 12;

/// Any of the three grid classes a DSV1 file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum GridData {
    Volume(Volume),
    Mask(Mask),
    Distance(DistanceMap),
}

impl GridData {
    pub fn class_name(&self) -> &'static str {
        match self {
            GridData::Volume(_) => "volume(f32)",
            GridData::Mask(_) => "mask(u8)",
            GridData::Distance(_) => "distance(f32)",
        }
    }
}

fn dtype_name(code: u8) -> String {
    match code {
        DTYPE_VOLUME => "volume(f32)".into(),
        DTYPE_MASK => "mask(u8)".into(),
        DTYPE_DISTANCE => "distance(f32)".into(),
        other => format!("unknown({other})"),
    }
}

fn encode(dtype: u8, dims: Dims, spacing: Spacing, f32s: Option<&[f64]>, u8s: Option<&[u8]>) -> Result<Vec<u8>> {
    for (axis, n) in [("z", dims.z), ("y", dims.y), ("x", dims.x)] {
        if n == 0 || n > u32::MAX as usize {
            return Err(Error::ConfigError(format!(
                "dsv1 dims.{axis} = {n} not representable"
            )));
        }
    }
    let payload_len = match dtype {
        DTYPE_MASK => dims.len(),
        _ => dims.len() * 4,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    for n in dims.as_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in spacing.as_array() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    if let Some(vals) = f32s {
        for &v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(vals) = u8s {
        out.extend_from_slice(vals);
    }
    Ok(out)
}

/// Write an intensity volume (dtype 1).
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let bytes = encode(DTYPE_VOLUME, v.dims(), v.spacing(), Some(v.data()), None)?;
    atomic_write(path, &bytes)
}

/// Write a binary mask (dtype 2).
pub fn write_mask(m: &Mask, path: &Path) -> Result<()> {
    let bytes = encode(DTYPE_MASK, m.dims(), m.spacing(), None, Some(m.data()))?;
    atomic_write(path, &bytes)
}

/// Write a signed distance map (dtype 3). The cap is not stored; readers
/// recover it as the largest absolute value in the payload.
pub fn write_distance(d: &DistanceMap, path: &Path) -> Result<()> {
    let bytes = encode(DTYPE_DISTANCE, d.dims(), d.spacing(), Some(d.data()), None)?;
    atomic_write(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile {
                path: self.path.to_string(),
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read any DSV1 file, dispatching on the stored dtype.
pub fn read_any(path: &Path) -> Result<GridData> {
    let display = path.display().to_string();
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::FormatError {
            path: display.clone(),
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let dtype = r.take(1)?[0];
    let dims = Dims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if dims.is_empty() {
        return Err(Error::FormatError {
            path: display.clone(),
            reason: format!("zero-extent dims {dims:?}"),
        });
    }
    let sz = r.f32()? as f64;
    let sy = r.f32()? as f64;
    let sx = r.f32()? as f64;
    let spacing = Spacing::new(sz, sy, sx).map_err(|_| Error::FormatError {
        path: display.clone(),
        reason: format!("invalid spacing ({sz}, {sy}, {sx})"),
    })?;

    let n = dims.len();
    let out = match dtype {
        DTYPE_MASK => {
            let payload = r.take(n)?;
            if let Some(pos) = payload.iter().position(|&v| v > 1) {
                return Err(Error::FormatError {
                    path: display.clone(),
                    reason: format!("mask value {} at voxel {pos} is not 0/1", payload[pos]),
                });
            }
            GridData::Mask(Mask::new(dims, spacing, payload.to_vec()).expect("validated"))
        }
        DTYPE_VOLUME | DTYPE_DISTANCE => {
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let v = r.f32()? as f64;
                if !v.is_finite() {
                    return Err(Error::FormatError {
                        path: display.clone(),
                        reason: format!("non-finite value at voxel {i}"),
                    });
                }
                data.push(v);
            }
            if dtype == DTYPE_VOLUME {
                GridData::Volume(Volume::new(dims, spacing, data).expect("validated"))
            } else {
                let cap = data
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()))
                    .max(f64::from(f32::MIN_POSITIVE));
                GridData::Distance(
                    DistanceMap::new(dims, spacing, data, cap).expect("validated"),
                )
            }
        }
        other => {
            return Err(Error::FormatError {
                path: display.clone(),
                reason: format!("unknown dtype code {other}"),
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::FormatError {
            path: display.clone(),
            reason: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

/// Read a file that must contain an intensity volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_any(path)? {
        GridData::Volume(v) => Ok(v),
        other => Err(Error::TypeError {
            path: path.display().to_string(),
            expected: dtype_name(DTYPE_VOLUME),
            got: other.class_name().into(),
        }),
    }
}

/// Read a file that must contain a binary mask.
pub fn read_mask(path: &Path) -> Result<Mask> {
    match read_any(path)? {
        GridData::Mask(m) => Ok(m),
        other => Err(Error::TypeError {
            path: path.display().to_string(),
            expected: dtype_name(DTYPE_MASK),
            got: other.class_name().into(),
        }),
    }
}

/// Read a file that must contain a signed distance map.
pub fn read_distance(path: &Path) -> Result<DistanceMap> {
    match read_any(path)? {
        GridData::Distance(d) => Ok(d),
        other => Err(Error::TypeError {
            path: path.display().to_string(),
            expected: dtype_name(DTYPE_DISTANCE),
            got: other.class_name().into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn iso1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    /// f32-representable test values.
    fn vol223() -> Volume {
        let data: Vec<f64> = (0..8).map(|i| f64::from(i as f32 * 0.25)).collect();
        Volume::new(Dims::new(2, 2, 2), iso1(), data).unwrap()
    }

    #[test]
    fn two_cubed_volume_is_61_bytes() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v.dsv1");
        write_volume(&vol223(), &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 61);
    }

    #[test]
    fn volume_roundtrip_is_bit_equal() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v.dsv1");
        let v = vol223();
        write_volume(&v, &p).unwrap();
        let r = read_volume(&p).unwrap();
        assert_eq!(r, v);
        // File-level roundtrip: writing what was read reproduces the bytes.
        let p2 = dir.path().join("v2.dsv1");
        write_volume(&r, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mask_and_distance_roundtrip() {
        let dir = TempDir::new().unwrap();
        let dims = Dims::new(2, 3, 2);
        let m = Mask::new(dims, iso1(), vec![0, 1, 1, 0, 0, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        let pm = dir.path().join("m.dsv1");
        write_mask(&m, &pm).unwrap();
        assert_eq!(read_mask(&pm).unwrap(), m);

        let data: Vec<f64> = (0..dims.len())
            .map(|i| f64::from(i as f32 - 5.0))
            .collect();
        let d = crate::sdt::DistanceMap::new(dims, iso1(), data, 30.0).unwrap();
        let pd = dir.path().join("d.dsv1");
        write_distance(&d, &pd).unwrap();
        let rd = read_distance(&pd).unwrap();
        assert_eq!(rd.data(), d.data());
        // Cap is recovered as the largest absolute value.
        assert_eq!(rd.cap_mm(), 6.0);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v.dsv1");
        write_volume(&vol223(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_any(&p), Err(Error::FormatError { .. })));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v.dsv1");
        write_volume(&vol223(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_any(&p),
            Err(Error::TruncatedFile { needed: 3, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v.dsv1");
        write_volume(&vol223(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_any(&p), Err(Error::FormatError { .. })));
    }

    #[test]
    fn class_mismatch_is_type_error() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v.dsv1");
        write_volume(&vol223(), &p).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::TypeError { .. })));
        assert!(matches!(read_distance(&p), Err(Error::TypeError { .. })));
    }

    #[test]
    fn bad_mask_values_rejected_on_read() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("m.dsv1");
        let m = Mask::new(Dims::new(1, 1, 2), iso1(), vec![0, 1]).unwrap();
        write_mask(&m, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_any(&p), Err(Error::FormatError { .. })));
    }
}
