//! DSCK: the named-tensor checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DSCK"
//! 4       1     version, currently 1
//! 5       4     meta length u32
//! 9       ...   meta: UTF-8 `key = value` lines (network config + seed)
//! ...     4     tensor count u32
//! ```
//!
//! then per tensor, in network parameter order:
//!
//! ```text
//! 2     name length u16
//! ...   name, UTF-8 (e.g. "stem.conv.w")
//! 1     dtype code 4 (f64 tensor)
//! 12    dims, three u32: (len, 1, 1) — parameters are flat vectors
//! 8·len payload, f64 little-endian
//! ```
//!
//! Parameters stay f64, so save→load is bit-exact and training can
//! resume without drift. Loading rebuilds the network from the stored
//! config and then overwrites every parameter; count, name, or length
//! mismatches are rejected. Trailing bytes are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};
use crate::net::{Network, NetworkConfig};

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u8 = 1;
const DTYPE_TENSOR: u8 = 4;

fn meta_text(cfg: &NetworkConfig) -> String {
    let mut s = String::new();
    writeln!(s, "net.levels = {}", cfg.levels).unwrap();
    writeln!(s, "net.base_channels = {}", cfg.base_channels).unwrap();
    writeln!(s, "net.blocks_per_level = {}", cfg.blocks_per_level).unwrap();
    writeln!(s, "net.head_width = {}", cfg.head_width).unwrap();
    writeln!(s, "net.proj_dim = {}", cfg.proj_dim).unwrap();
    writeln!(s, "net.dropout = {:?}", cfg.dropout).unwrap();
    writeln!(s, "seed = {}", cfg.seed).unwrap();
    s
}

fn parse_meta(text: &str, path: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig {
        levels: 0,
        base_channels: 0,
        blocks_per_level: 0,
        head_width: 0,
        proj_dim: 0,
        dropout: f64::NAN,
        seed: 0,
    };
    let mut seen = 0u32;
    for line in text.lines() {
        let (key, value) = line.split_once('=').ok_or_else(|| Error::FormatError {
            path: path.to_string(),
            reason: format!("meta line {line:?} is not `key = value`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::FormatError {
            path: path.to_string(),
            reason: format!("meta key {key}: cannot parse {value:?} as {what}"),
        };
        match key {
            "net.levels" => cfg.levels = value.parse().map_err(|_| bad("an integer"))?,
            "net.base_channels" => {
                cfg.base_channels = value.parse().map_err(|_| bad("an integer"))?
            }
            "net.blocks_per_level" => {
                cfg.blocks_per_level = value.parse().map_err(|_| bad("an integer"))?
            }
            "net.head_width" => cfg.head_width = value.parse().map_err(|_| bad("an integer"))?,
            "net.proj_dim" => cfg.proj_dim = value.parse().map_err(|_| bad("an integer"))?,
            "net.dropout" => cfg.dropout = value.parse().map_err(|_| bad("a number"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("an integer"))?,
            other => {
                return Err(Error::FormatError {
                    path: path.to_string(),
                    reason: format!("unknown meta key {other:?}"),
                })
            }
        }
        seen += 1;
    }
    if seen != 7 {
        return Err(Error::FormatError {
            path: path.to_string(),
            reason: format!("meta has {seen} keys, expected 7"),
        });
    }
    Ok(cfg)
}

/// Serialize the network (config + every parameter) to `path`.
pub fn save_checkpoint(net: &mut Network, path: &Path) -> Result<()> {
    let meta = meta_text(net.config());
    let params = net.export_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, values) in &params {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::ConfigError(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(DTYPE_TENSOR);
        for d in [values.len() as u32, 1, 1] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &out)
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

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuild a network from a checkpoint, bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let display = path.display().to_string();
    let bytes = read_bytes(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: &display };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::FormatError {
            path: display.clone(),
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::FormatError {
            path: display.clone(),
            reason: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|e| Error::FormatError {
        path: display.clone(),
        reason: format!("meta is not UTF-8: {e}"),
    })?;
    let cfg = parse_meta(meta, &display)?;
    let mut net = Network::build(&cfg)?;

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::FormatError {
                path: display.clone(),
                reason: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_TENSOR {
            return Err(Error::FormatError {
                path: display.clone(),
                reason: format!("tensor {name}: dtype {dtype}, expected {DTYPE_TENSOR}"),
            });
        }
        let len = r.u32()? as usize;
        let (d1, d2) = (r.u32()?, r.u32()?);
        if (d1, d2) != (1, 1) {
            return Err(Error::FormatError {
                path: display.clone(),
                reason: format!("tensor {name}: dims ({len}, {d1}, {d2}) are not flat"),
            });
        }
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::FormatError {
                    path: display.clone(),
                    reason: format!("tensor {name}: non-finite value at index {i}"),
                });
            }
            values.push(v);
        }
        params.push((name, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::FormatError {
            path: display.clone(),
            reason: format!("{} trailing bytes after tensors", bytes.len() - r.pos),
        });
    }
    net.import_params(&params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing, Volume};
    use rand::{Rng, SeedableRng};
    use tempfile::TempDir;

    fn tiny_net() -> Network {
        let cfg = NetworkConfig {
            levels: 2,
            base_channels: 2,
            blocks_per_level: 1,
            head_width: 2,
            proj_dim: 2,
            dropout: 0.1,
            seed: 5,
        };
        Network::build(&cfg).unwrap()
    }

    fn probe(net: &mut Network) -> crate::net::BranchOutputs {
        let dims = Dims::new(4, 8, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data = (0..dims.len()).map(|_| rng.random::<f64>()).collect();
        let vol = Volume::new(dims, Spacing::isotropic(1.0).unwrap(), data).unwrap();
        net.set_mode(crate::net::Mode::Eval);
        net.forward(&vol).unwrap().0
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("net.dsck");
        let mut net = tiny_net();
        let before = probe(&mut net);
        save_checkpoint(&mut net, &p).unwrap();
        let mut back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.export_params(), net.export_params());
        let after = probe(&mut back);
        assert_eq!(after.seg_prob.data(), before.seg_prob.data());
        assert_eq!(after.dist_pred.data(), before.dist_pred.data());
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let (p1, p2) = (dir.path().join("a.dsck"), dir.path().join("b.dsck"));
        let mut net = tiny_net();
        save_checkpoint(&mut net, &p1).unwrap();
        save_checkpoint(&mut net, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_version_and_trailing_bytes_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("net.dsck");
        save_checkpoint(&mut tiny_net(), &p).unwrap();
        let orig = std::fs::read(&p).unwrap();

        let mut bad = orig.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::FormatError { .. })));

        let mut bad = orig.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::FormatError { .. })));

        let mut bad = orig.clone();
        bad.push(0);
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::FormatError { .. })));

        std::fs::write(&p, &orig[..orig.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn non_finite_parameter_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("net.dsck");
        let mut net = tiny_net();
        net.for_each_param(&mut |_, w, _| {
            w[0] = f64::NAN;
        });
        save_checkpoint(&mut net, &p).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::FormatError { .. })));
    }
}
