//! Signed Euclidean distance maps and distance→mask conversion.
//!
//! A signed map assigns each background voxel the Euclidean millimetre
//! distance from its center to the nearest foreground voxel center, and
//! each foreground voxel the negative distance to the nearest background
//! voxel center; values are clamped to `[-cap, +cap]`. The fast path is an
//! exact per-axis lower-envelope (parabola) distance transform that
//! supports anisotropic spacing; [`signed_distance_map_naive`] is an
//! independent exhaustive-pairwise oracle kept solely to cross-check it.
//!
//! Converting a map back to a mask thresholds at zero (inclusive:
//! `value <= 0` is foreground), so mask → map → mask is the identity.
//! [`soft_conversion`] is the differentiable version of that threshold,
//! `sigmoid(-k * value)`, used when segmentation labels supervise the
//! distance-regression head.

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask, Spacing, Volume};

/// Signed distance map in millimetres with values clamped to `[-cap, +cap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
    cap_mm: f64,
}

impl DistanceMap {
    /// Build a map, checking that every value is finite and within the cap.
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>, cap_mm: f64) -> Result<Self> {
        if !(cap_mm.is_finite() && cap_mm > 0.0) {
            return Err(Error::ConfigError(format!(
                "distance cap must be finite and > 0, got {cap_mm}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::ShapeError {
                context: format!("distance map data length {} != dims product", data.len()),
                expected: dims,
                got: Dims::new(0, 0, data.len()),
            });
        }
        if let Some(pos) = data
            .iter()
            .position(|v| !v.is_finite() || v.abs() > cap_mm)
        {
            return Err(Error::ConfigError(format!(
                "distance value {} at flat index {pos} outside [-{cap_mm}, {cap_mm}]",
                data[pos]
            )));
        }
        Ok(DistanceMap {
            dims,
            spacing,
            data,
            cap_mm,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cap_mm(&self) -> f64 {
        self.cap_mm
    }
}

/// One-dimensional squared-distance transform over parabola lower
/// envelopes. `f` holds squared distances at sample positions `i * s`
/// (`f64::INFINITY` where no seed has been seen); the result is written
/// back into `f`.
fn dt1d(f: &mut [f64], s: f64, sites: &mut Vec<usize>, bounds: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    sites.clear();
    bounds.clear();
    out.clear();
    out.resize(n, f64::INFINITY);

    // Build the lower envelope over parabolas rooted at finite entries.
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = q as f64 * s;
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pp = p as f64 * s;
                    // Abscissa where the parabola at q overtakes the one at p.
                    let cut = ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2.0 * (pq - pp));
                    if cut <= *bounds.last().unwrap() {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(cut);
                        break;
                    }
                }
            }
        }
    }

    if sites.is_empty() {
        f.copy_from_slice(out);
        return;
    }

    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let pi = i as f64 * s;
        while k + 1 < sites.len() && bounds[k + 1] < pi {
            k += 1;
        }
        let pj = sites[k] as f64 * s;
        *o = (pi - pj) * (pi - pj) + f[sites[k]];
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean millimetre distance from every voxel center to the
/// nearest seed voxel center. Voxels with no seed anywhere are
/// `f64::INFINITY`. Shared by the signed transform and surface metrics.
pub(crate) fn edt_sq(dims: Dims, spacing: Spacing, seed: &[bool]) -> Vec<f64> {
    let mut d: Vec<f64> = seed
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let (nz, ny, nx) = (dims.z, dims.y, dims.x);
    let mut sites = Vec::new();
    let mut bounds = Vec::new();
    let mut scratch = Vec::new();
    let mut row = Vec::new();

    // x axis: rows are contiguous.
    for zy in 0..nz * ny {
        let start = zy * nx;
        dt1d(
            &mut d[start..start + nx],
            spacing.x,
            &mut sites,
            &mut bounds,
            &mut scratch,
        );
    }
    // y axis.
    for z in 0..nz {
        for x in 0..nx {
            row.clear();
            row.extend((0..ny).map(|y| d[dims.index(z, y, x)]));
            dt1d(&mut row, spacing.y, &mut sites, &mut bounds, &mut scratch);
            for y in 0..ny {
                d[dims.index(z, y, x)] = row[y];
            }
        }
    }
    // z axis.
    for y in 0..ny {
        for x in 0..nx {
            row.clear();
            row.extend((0..nz).map(|z| d[dims.index(z, y, x)]));
            dt1d(&mut row, spacing.z, &mut sites, &mut bounds, &mut scratch);
            for z in 0..nz {
                d[dims.index(z, y, x)] = row[z];
            }
        }
    }
    d
}

fn combine_signed(m: &Mask, d_to_fg: &[f64], d_to_bg: &[f64], cap: f64) -> Vec<f64> {
    m.data()
        .iter()
        .zip(d_to_fg.iter().zip(d_to_bg))
        .map(|(&inside, (&to_fg, &to_bg))| {
            let v = if inside == 1 {
                -to_bg.sqrt()
            } else {
                to_fg.sqrt()
            };
            v.clamp(-cap, cap)
        })
        .collect()
}

/// Signed distance map of a mask: positive outside (distance to the
/// nearest foreground voxel center), negative inside (distance to the
/// nearest background voxel center), clamped to `[-cap, +cap]`. An empty
/// mask maps to `+cap` everywhere, a full mask to `-cap` everywhere.
pub fn signed_distance_map(m: &Mask, cap: f64) -> Result<DistanceMap> {
    if !(cap.is_finite() && cap > 0.0) {
        return Err(Error::ConfigError(format!(
            "distance cap must be finite and > 0, got {cap}"
        )));
    }
    let fg: Vec<bool> = m.data().iter().map(|&v| v == 1).collect();
    let bg: Vec<bool> = m.data().iter().map(|&v| v == 0).collect();
    let d_to_fg = edt_sq(m.dims(), m.spacing(), &fg);
    let d_to_bg = edt_sq(m.dims(), m.spacing(), &bg);
    let data = combine_signed(m, &d_to_fg, &d_to_bg, cap);
    DistanceMap::new(m.dims(), m.spacing(), data, cap)
}

/// Exhaustive-pairwise oracle for [`signed_distance_map`]: same contract,
/// computed by scanning every opposite-class voxel. Quadratic; use only on
/// small grids and in tests.
pub fn signed_distance_map_naive(m: &Mask, cap: f64) -> Result<DistanceMap> {
    if !(cap.is_finite() && cap > 0.0) {
        return Err(Error::ConfigError(format!(
            "distance cap must be finite and > 0, got {cap}"
        )));
    }
    let dims = m.dims();
    let sp = m.spacing();
    let mut fg_pts = Vec::new();
    let mut bg_pts = Vec::new();
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let p = (z as f64 * sp.z, y as f64 * sp.y, x as f64 * sp.x);
                if m.get(z, y, x) == 1 {
                    fg_pts.push(p);
                } else {
                    bg_pts.push(p);
                }
            }
        }
    }
    let min_sq = |p: (f64, f64, f64), pts: &[(f64, f64, f64)]| -> f64 {
        let mut best = f64::INFINITY;
        for q in pts {
            let dz = p.0 - q.0;
            let dy = p.1 - q.1;
            let dx = p.2 - q.2;
            let d = dz * dz + dy * dy + dx * dx;
            if d < best {
                best = d;
            }
        }
        best
    };
    let mut data = Vec::with_capacity(dims.len());
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let p = (z as f64 * sp.z, y as f64 * sp.y, x as f64 * sp.x);
                let v = if m.get(z, y, x) == 1 {
                    -min_sq(p, &bg_pts).sqrt()
                } else {
                    min_sq(p, &fg_pts).sqrt()
                };
                data.push(v.clamp(-cap, cap));
            }
        }
    }
    DistanceMap::new(dims, sp, data, cap)
}

/// Threshold a signed map back to a mask: `value <= 0` is foreground.
pub fn distmap_to_mask(d: &DistanceMap) -> Mask {
    let data = d.data.iter().map(|&v| u8::from(v <= 0.0)).collect();
    Mask::new(d.dims, d.spacing, data).expect("thresholded values are always 0/1")
}

/// Scalar form of [`soft_conversion`]: `sigmoid(-k * value)`.
#[inline]
pub fn soft_conversion_value(v: f64, k: f64) -> f64 {
    sigmoid(-k * v)
}

/// Differentiable distance→probability conversion: `sigmoid(-k * value)`.
/// Zero distance maps to 0.5; deep inside (negative) saturates toward 1.
pub fn soft_conversion(d: &DistanceMap, k: f64) -> Result<Volume> {
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::ConfigError(format!(
            "soft conversion steepness must be finite and > 0, got {k}"
        )));
    }
    let data = d.data.iter().map(|&v| sigmoid(-k * v)).collect();
    Volume::new(d.dims, d.spacing, data)
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
