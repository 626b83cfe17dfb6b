//! Voxel-grid primitives shared by every other module.
//!
//! Grids are dense, z-major (`index = (z * ny + y) * nx + x`), and carry
//! physical voxel spacing in millimetres per axis. Images hold `f64`
//! intensities in memory; binary masks hold `u8` values restricted to
//! `{0, 1}`. All geometry here is axis-aligned: bounding boxes are inclusive
//! voxel index ranges and resampling maps voxel index `i` in the output to
//! coordinate `i * (spacing_out / spacing_in)` in the input, so a resample
//! onto the same spacing is an exact copy.

use crate::error::{Error, Result};

/// Grid extent per axis, ordered `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims {
    pub fn new(z: usize, y: usize, x: usize) -> Self {
        Dims { z, y, x }
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat z-major index of voxel `(z, y, x)`.
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.x;
        let y = (idx / self.x) % self.y;
        let z = idx / (self.x * self.y);
        (z, y, x)
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        z < self.z && y < self.y && x < self.x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.z, self.y, self.x]
    }
}

/// Physical voxel spacing in millimetres, ordered `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Result<Self> {
        for (axis, v) in [("z", z), ("y", y), ("x", x)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::ConfigError(format!(
                    "spacing.{axis} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(Spacing { z, y, x })
    }

    /// Uniform spacing on all three axes.
    pub fn isotropic(s: f64) -> Result<Self> {
        Spacing::new(s, s, s)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }
}

/// Dense scalar image with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    /// Build a volume, checking length and that every value is finite.
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeError {
                context: format!("volume data length {} != dims product", data.len()),
                expected: dims,
                got: Dims::new(0, 0, data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::ConfigError(format!(
                "volume contains non-finite value at flat index {pos}"
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    /// Volume filled with a single value.
    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        Volume::new(dims, spacing, vec![value; dims.len()])
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Minimum and maximum voxel value. Empty grids are rejected at
    /// construction elsewhere, but guard anyway.
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// Dense binary mask with physical spacing. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeError {
                context: format!("mask data length {} != dims product", data.len()),
                expected: dims,
                got: Dims::new(0, 0, data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::ConfigError(format!(
                "mask value {} at flat index {pos} is not 0 or 1",
                data[pos]
            )));
        }
        Ok(Mask {
            dims,
            spacing,
            data,
        })
    }

    /// All-zero mask.
    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Mask {
            dims,
            spacing,
            data: vec![0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Number of foreground voxels.
    pub fn count_fg(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn is_all_one(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }
}

/// Inclusive axis-aligned voxel index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    /// Smallest contained index per axis, `(z, y, x)`.
    pub min: [usize; 3],
    /// Largest contained index per axis, `(z, y, x)`.
    pub max: [usize; 3],
}

impl BBox {
    /// Validate `min <= max` per axis and containment in `dims`.
    pub fn checked(min: [usize; 3], max: [usize; 3], dims: Dims) -> Result<Self> {
        let d = dims.as_array();
        for a in 0..3 {
            if min[a] > max[a] || max[a] >= d[a] {
                return Err(Error::InvalidBBox { min, max, dims });
            }
        }
        Ok(BBox { min, max })
    }

    /// Extent of the box per axis (inclusive range, so `max - min + 1`).
    pub fn dims(&self) -> Dims {
        Dims::new(
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        )
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    /// Grow by `margin` voxels per side, clamped to the grid.
    pub fn expanded(&self, margin: usize, dims: Dims) -> BBox {
        let d = dims.as_array();
        let mut min = self.min;
        let mut max = self.max;
        for a in 0..3 {
            min[a] = min[a].saturating_sub(margin);
            max[a] = (max[a] + margin).min(d[a] - 1);
        }
        BBox { min, max }
    }

    /// Clamp this box so it lies inside `outer` (intersection; caller must
    /// ensure the boxes overlap, which holds whenever this box was derived
    /// from content found inside `outer`).
    pub fn clamped_within(&self, outer: &BBox) -> BBox {
        let mut min = self.min;
        let mut max = self.max;
        for a in 0..3 {
            min[a] = min[a].max(outer.min[a]);
            max[a] = max[a].min(outer.max[a]);
        }
        BBox { min, max }
    }
}

/// Per-slice presence labels along z: `labels[z] = 1` when slice `z`
/// contains at least one foreground voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceLabels {
    pub labels: Vec<u8>,
}

/// Voxel neighbourhood used by connected-component analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge, and corner neighbours.
    TwentySix,
}

/// Map intensities through the window `[lo, hi]` to `[0, 1]`, clamping
/// values outside the window to the respective end.
pub fn window_normalize(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let span = hi - lo;
    let data = v
        .data
        .iter()
        .map(|&t| ((t - lo) / span).clamp(0.0, 1.0))
        .collect();
    Volume::new(v.dims, v.spacing, data)
}

/// Output extent when resampling `n` voxels from spacing `s_in` to `s_out`:
/// nearest integer to `n * s_in / s_out`, at least 1. Halves round away
/// from zero (`f64::round`).
fn resampled_extent(n: usize, s_in: f64, s_out: f64) -> usize {
    ((n as f64 * s_in / s_out).round() as usize).max(1)
}

/// Shared resampling kernel. `nearest` selects nearest-neighbour lookup
/// (used for masks) instead of trilinear interpolation.
fn resample_data(
    dims_in: Dims,
    spacing_in: Spacing,
    data: &[f64],
    dims_out: Dims,
    spacing_out: Spacing,
    nearest: bool,
) -> Vec<f64> {
    let scale = [
        spacing_out.z / spacing_in.z,
        spacing_out.y / spacing_in.y,
        spacing_out.x / spacing_in.x,
    ];
    let din = dims_in.as_array();
    let mut out = Vec::with_capacity(dims_out.len());
    for z in 0..dims_out.z {
        let sz = (z as f64 * scale[0]).clamp(0.0, (din[0] - 1) as f64);
        for y in 0..dims_out.y {
            let sy = (y as f64 * scale[1]).clamp(0.0, (din[1] - 1) as f64);
            for x in 0..dims_out.x {
                let sx = (x as f64 * scale[2]).clamp(0.0, (din[2] - 1) as f64);
                out.push(sample_at(dims_in, data, sz, sy, sx, nearest));
            }
        }
    }
    out
}

/// Sample `data` at fractional coordinate `(sz, sy, sx)` (already clamped
/// to the valid index range).
#[inline]
fn sample_at(dims: Dims, data: &[f64], sz: f64, sy: f64, sx: f64, nearest: bool) -> f64 {
    if nearest {
        let z = (sz + 0.5).floor() as usize;
        let y = (sy + 0.5).floor() as usize;
        let x = (sx + 0.5).floor() as usize;
        let z = z.min(dims.z - 1);
        let y = y.min(dims.y - 1);
        let x = x.min(dims.x - 1);
        return data[dims.index(z, y, x)];
    }
    let z0 = sz.floor() as usize;
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let fz = sz - z0 as f64;
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    // Exact grid hit: return the stored value untouched so that identity
    // resampling is a bit-for-bit copy.
    if fz == 0.0 && fy == 0.0 && fx == 0.0 {
        return data[dims.index(z0, y0, x0)];
    }
    let z1 = (z0 + 1).min(dims.z - 1);
    let y1 = (y0 + 1).min(dims.y - 1);
    let x1 = (x0 + 1).min(dims.x - 1);
    let c = |z: usize, y: usize, x: usize| data[dims.index(z, y, x)];
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let v00 = lerp(c(z0, y0, x0), c(z0, y0, x1), fx);
    let v01 = lerp(c(z0, y1, x0), c(z0, y1, x1), fx);
    let v10 = lerp(c(z1, y0, x0), c(z1, y0, x1), fx);
    let v11 = lerp(c(z1, y1, x0), c(z1, y1, x1), fx);
    let v0 = lerp(v00, v01, fy);
    let v1 = lerp(v10, v11, fy);
    lerp(v0, v1, fz)
}

/// Trilinearly resample an image onto a new spacing. The output extent per
/// axis is the nearest integer to `n * s_in / s_out` (minimum 1); output
/// voxel `i` samples input coordinate `i * s_out / s_in`. Resampling onto
/// the identical spacing returns a bit-for-bit copy.
pub fn resample_trilinear(v: &Volume, spacing_out: Spacing) -> Result<Volume> {
    let dims_out = Dims::new(
        resampled_extent(v.dims.z, v.spacing.z, spacing_out.z),
        resampled_extent(v.dims.y, v.spacing.y, spacing_out.y),
        resampled_extent(v.dims.x, v.spacing.x, spacing_out.x),
    );
    let data = resample_data(v.dims, v.spacing, &v.data, dims_out, spacing_out, false);
    Volume::new(dims_out, spacing_out, data)
}

/// Trilinearly resample an image onto an explicit target grid. Used to map
/// coarse-stage predictions back onto the full-resolution grid.
pub fn resample_to(v: &Volume, dims_out: Dims, spacing_out: Spacing) -> Result<Volume> {
    let data = resample_data(v.dims, v.spacing, &v.data, dims_out, spacing_out, false);
    Volume::new(dims_out, spacing_out, data)
}

/// Resample a binary mask with nearest-neighbour lookup so the result
/// stays binary. Same geometry conventions as [`resample_trilinear`].
pub fn resample_mask(m: &Mask, spacing_out: Spacing) -> Result<Mask> {
    let dims_out = Dims::new(
        resampled_extent(m.dims.z, m.spacing.z, spacing_out.z),
        resampled_extent(m.dims.y, m.spacing.y, spacing_out.y),
        resampled_extent(m.dims.x, m.spacing.x, spacing_out.x),
    );
    resample_mask_to(m, dims_out, spacing_out)
}

/// [`resample_mask`] onto an explicit target grid. Needed when mapping a
/// coarse mask back to a full-resolution grid whose extent the rounding
/// rule would not reproduce exactly.
pub fn resample_mask_to(m: &Mask, dims_out: Dims, spacing_out: Spacing) -> Result<Mask> {
    let f: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
    let data = resample_data(m.dims, m.spacing, &f, dims_out, spacing_out, true);
    Mask::new(
        dims_out,
        spacing_out,
        data.into_iter().map(|v| v as u8).collect(),
    )
}

/// Tight bounding box of the foreground, grown by `margin` voxels per side
/// and clamped to the grid. Errors on an empty mask.
pub fn bbox_of(m: &Mask, margin: usize) -> Result<BBox> {
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for z in 0..m.dims.z {
        for y in 0..m.dims.y {
            for x in 0..m.dims.x {
                if m.get(z, y, x) == 1 {
                    any = true;
                    let p = [z, y, x];
                    for a in 0..3 {
                        min[a] = min[a].min(p[a]);
                        max[a] = max[a].max(p[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask {
            context: "bbox_of".into(),
        });
    }
    Ok(BBox { min, max }.expanded(margin, m.dims))
}

/// Copy the subgrid covered by `b` out of an image. Spacing is preserved.
pub fn crop_volume(v: &Volume, b: &BBox) -> Result<Volume> {
    BBox::checked(b.min, b.max, v.dims)?;
    let d = b.dims();
    let mut data = Vec::with_capacity(d.len());
    for z in b.min[0]..=b.max[0] {
        for y in b.min[1]..=b.max[1] {
            for x in b.min[2]..=b.max[2] {
                data.push(v.get(z, y, x));
            }
        }
    }
    Volume::new(d, v.spacing, data)
}

/// Copy the subgrid covered by `b` out of a mask. Spacing is preserved.
pub fn crop_mask(m: &Mask, b: &BBox) -> Result<Mask> {
    BBox::checked(b.min, b.max, m.dims)?;
    let d = b.dims();
    let mut data = Vec::with_capacity(d.len());
    for z in b.min[0]..=b.max[0] {
        for y in b.min[1]..=b.max[1] {
            for x in b.min[2]..=b.max[2] {
                data.push(m.get(z, y, x));
            }
        }
    }
    Mask::new(d, m.spacing, data)
}

/// Write `src` into `dst` with `src`'s voxel `(0,0,0)` landing at
/// `origin`. The source must fit inside the destination.
pub fn paste_mask(dst: &mut Mask, src: &Mask, origin: [usize; 3]) -> Result<()> {
    let dd = dst.dims.as_array();
    let sd = src.dims.as_array();
    for a in 0..3 {
        if origin[a] + sd[a] > dd[a] {
            return Err(Error::InvalidBBox {
                min: origin,
                max: [
                    origin[0] + sd[0] - 1,
                    origin[1] + sd[1] - 1,
                    origin[2] + sd[2] - 1,
                ],
                dims: dst.dims,
            });
        }
    }
    for z in 0..src.dims.z {
        for y in 0..src.dims.y {
            for x in 0..src.dims.x {
                let idx = dst
                    .dims
                    .index(origin[0] + z, origin[1] + y, origin[2] + x);
                dst.data[idx] = src.get(z, y, x);
            }
        }
    }
    Ok(())
}

/// Keep only the largest connected foreground component. Ties on voxel
/// count are broken by the component whose first voxel comes earliest in
/// z-major scan order. An empty mask maps to an empty mask.
pub fn largest_component(m: &Mask, conn: Connectivity) -> Mask {
    let dims = m.dims;
    let mut label = vec![0u32; dims.len()];
    let mut next = 0u32;
    let mut best: Option<(usize, usize, u32)> = None; // (count, first_idx, label)
    let mut stack = Vec::new();

    let offsets: Vec<(isize, isize, isize)> = match conn {
        Connectivity::Six => vec![
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ],
        Connectivity::TwentySix => {
            let mut v = Vec::with_capacity(26);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if (dz, dy, dx) != (0, 0, 0) {
                            v.push((dz, dy, dx));
                        }
                    }
                }
            }
            v
        }
    };

    for start in 0..dims.len() {
        if m.data[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        let id = next;
        let mut count = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(idx) = stack.pop() {
            count += 1;
            let (z, y, x) = dims.coords(idx);
            for &(dz, dy, dx) in &offsets {
                let nz = z as isize + dz;
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if nz < 0 || ny < 0 || nx < 0 {
                    continue;
                }
                let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                if !dims.contains(nz, ny, nx) {
                    continue;
                }
                let nidx = dims.index(nz, ny, nx);
                if m.data[nidx] == 1 && label[nidx] == 0 {
                    label[nidx] = id;
                    stack.push(nidx);
                }
            }
        }
        let better = match best {
            None => true,
            // Components are discovered in z-major order of their first
            // voxel, so a later component only wins with a strictly
            // larger count.
            Some((bc, _, _)) => count > bc,
        };
        if better {
            best = Some((count, start, id));
        }
    }

    let mut out = vec![0u8; dims.len()];
    if let Some((_, _, id)) = best {
        for (o, &l) in out.iter_mut().zip(&label) {
            if l == id {
                *o = 1;
            }
        }
    }
    Mask {
        dims,
        spacing: m.spacing,
        data: out,
    }
}

/// Per-slice foreground presence along z.
pub fn slice_labels(m: &Mask) -> SliceLabels {
    let mut labels = vec![0u8; m.dims.z];
    for z in 0..m.dims.z {
        'slice: for y in 0..m.dims.y {
            for x in 0..m.dims.x {
                if m.get(z, y, x) == 1 {
                    labels[z] = 1;
                    break 'slice;
                }
            }
        }
    }
    SliceLabels { labels }
}
