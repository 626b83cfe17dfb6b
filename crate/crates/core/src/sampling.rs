//! Feature-grid cell classification and contrastive sample drawing.
//!
//! The coarsest feature map of the network covers the input patch at a
//! stride of `factor` voxels per cell. Cells are classified from the
//! ground-truth patch label into tumor cells (entirely tumor even after
//! a one-voxel erosion), near-tumor normal cells (no tumor, but within a
//! three-cell Chebyshev ring of tumor-touching cells), and void cells
//! that take no part in the contrastive term. Sample drawing picks the
//! same cell indices from both augmentation branches so that positives
//! describe the same anatomy under different appearance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask};

/// Chebyshev radius, in cells, of the near-tumor ring.
pub const RING_RADIUS_CELLS: usize = 3;

/// Dense multi-channel field on the coarse cell grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    dims: Dims,
    /// Voxels per cell along every axis.
    factor: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, dims: Dims, factor: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || factor == 0 {
            return Err(Error::ConfigError(format!(
                "feature map needs channels > 0 and factor > 0, got {channels} and {factor}"
            )));
        }
        if data.len() != channels * dims.len() {
            return Err(Error::ConfigError(format!(
                "feature map data length {} != channels {channels} x cells {}",
                data.len(),
                dims.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::ConfigError(format!(
                "feature map contains non-finite value {v}"
            )));
        }
        Ok(FeatureMap { channels, dims, factor, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector of one cell, gathered across channels.
    pub fn vector_at(&self, cell_flat: usize) -> Vec<f64> {
        let stride = self.dims.len();
        (0..self.channels)
            .map(|c| self.data[c * stride + cell_flat])
            .collect()
    }
}

/// Role of one coarse cell in the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    /// Entirely tumor after a one-voxel erosion of the tumor mask.
    Pos,
    /// Tumor-free but within the Chebyshev ring of tumor-touching cells.
    NegRing,
    /// Neither; excluded from sampling.
    Void,
}

/// Classification of every cell of a coarse grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGrid {
    dims: Dims,
    classes: Vec<CellClass>,
}

impl CellGrid {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> &[CellClass] {
        &self.classes
    }

    fn of_class(&self, class: CellClass) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Erode a binary field by one voxel under 6-connectivity; out-of-grid
/// neighbours count as background.
fn erode6(dims: Dims, m: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; m.len()];
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let i = dims.index(z, y, x);
                if m[i] == 0 {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < dims.z
                    && y > 0
                    && y + 1 < dims.y
                    && x > 0
                    && x + 1 < dims.x
                    && m[dims.index(z - 1, y, x)] == 1
                    && m[dims.index(z + 1, y, x)] == 1
                    && m[dims.index(z, y - 1, x)] == 1
                    && m[dims.index(z, y + 1, x)] == 1
                    && m[dims.index(z, y, x - 1)] == 1
                    && m[dims.index(z, y, x + 1)] == 1;
                if interior {
                    out[i] = 1;
                }
            }
        }
    }
    out
}

/// Classify the coarse cells of a patch label.
///
/// Cell `(cz, cy, cx)` covers voxels `[cz*factor, (cz+1)*factor) x ...`
/// intersected with the patch; edge cells may be partial. A cell is
/// `Pos` when every covered voxel belongs to the eroded tumor mask (so
/// every `Pos` cell maps back to voxels that are 100% tumor), `NegRing`
/// when it covers no tumor voxel but lies within
/// [`RING_RADIUS_CELLS`] Chebyshev cells of some tumor-touching cell,
/// and `Void` otherwise.
pub fn cell_classes(label: &Mask, factor: usize) -> Result<CellGrid> {
    if factor == 0 {
        return Err(Error::ConfigError("cell factor must be positive".into()));
    }
    let vd = label.dims();
    let cd = Dims::new(vd.z.div_ceil(factor), vd.y.div_ceil(factor), vd.x.div_ceil(factor));
    let eroded = erode6(vd, label.data());

    let mut touches = vec![false; cd.len()];
    let mut all_eroded = vec![true; cd.len()];
    for z in 0..vd.z {
        for y in 0..vd.y {
            for x in 0..vd.x {
                let ci = cd.index(z / factor, y / factor, x / factor);
                let vi = vd.index(z, y, x);
                if label.data()[vi] == 1 {
                    touches[ci] = true;
                }
                if eroded[vi] == 0 {
                    all_eroded[ci] = false;
                }
            }
        }
    }

    let mut classes = vec![CellClass::Void; cd.len()];
    for (i, class) in classes.iter_mut().enumerate() {
        if all_eroded[i] {
            *class = CellClass::Pos;
        }
    }
    // Ring pass: tumor-free cells near any tumor-touching cell.
    let r = RING_RADIUS_CELLS as isize;
    for cz in 0..cd.z {
        for cy in 0..cd.y {
            for cx in 0..cd.x {
                let ci = cd.index(cz, cy, cx);
                if touches[ci] {
                    continue;
                }
                let mut near = false;
                'scan: for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (nz, ny, nx) =
                                (cz as isize + dz, cy as isize + dy, cx as isize + dx);
                            if nz < 0
                                || ny < 0
                                || nx < 0
                                || nz >= cd.z as isize
                                || ny >= cd.y as isize
                                || nx >= cd.x as isize
                            {
                                continue;
                            }
                            if touches[cd.index(nz as usize, ny as usize, nx as usize)] {
                                near = true;
                                break 'scan;
                            }
                        }
                    }
                }
                if near {
                    classes[ci] = CellClass::NegRing;
                }
            }
        }
    }
    Ok(CellGrid { dims: cd, classes })
}

/// Which augmentation branch a sample was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Phi,
    Varphi,
}

/// One drawn feature vector with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub vector: Vec<f64>,
    /// True for tumor-class samples, false for normal-class.
    pub tumor: bool,
    pub branch: Branch,
    /// Flat cell index on the coarse grid, for scattering gradients back.
    pub cell_flat: usize,
}

/// The full draw for one patch: up to `4 * per_class` vectors in a fixed
/// order (tumor phi, tumor varphi, normal phi, normal varphi).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub per_class: usize,
    pub entries: Vec<Sample>,
}

/// Draw `per_class` cells per class and read their vectors from both
/// branches.
///
/// Cells are drawn without replacement when enough are eligible, with
/// replacement otherwise. Both branches contribute the *same* cell
/// indices. A patch with no `Pos` cell is an error; a patch with no
/// `NegRing` cell yields tumor samples only.
pub fn draw_samples(
    fm_phi: &FeatureMap,
    fm_varphi: &FeatureMap,
    cells: &CellGrid,
    per_class: usize,
    seed: u64,
) -> Result<SampleSet> {
    if per_class == 0 {
        return Err(Error::ConfigError("per_class must be positive".into()));
    }
    for (name, fm) in [("phi", fm_phi), ("varphi", fm_varphi)] {
        if fm.dims() != cells.dims() {
            return Err(Error::ShapeError {
                context: format!("feature map {name} vs cell grid"),
                expected: cells.dims(),
                got: fm.dims(),
            });
        }
    }
    if fm_phi.channels() != fm_varphi.channels() {
        return Err(Error::ConfigError(format!(
            "branch feature maps disagree on channels: {} vs {}",
            fm_phi.channels(),
            fm_varphi.channels()
        )));
    }

    let pos = cells.of_class(CellClass::Pos);
    if pos.is_empty() {
        return Err(Error::NoTumorInPatch);
    }
    let neg = cells.of_class(CellClass::NegRing);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |eligible: &[usize]| -> Vec<usize> {
        if eligible.len() >= per_class {
            // Partial Fisher-Yates: the first `per_class` slots of a
            // seeded shuffle, i.e. a draw without replacement.
            let mut pool = eligible.to_vec();
            for i in 0..per_class {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(per_class);
            pool
        } else {
            (0..per_class)
                .map(|_| eligible[rng.random_range(0..eligible.len())])
                .collect()
        }
    };
    let pos_draw = draw(&pos);
    let neg_draw = if neg.is_empty() { Vec::new() } else { draw(&neg) };

    let mut entries = Vec::new();
    for (cells_drawn, tumor) in [(&pos_draw, true), (&neg_draw, false)] {
        for &branch in &[Branch::Phi, Branch::Varphi] {
            let fm = match branch {
                Branch::Phi => fm_phi,
                Branch::Varphi => fm_varphi,
            };
            for &cell_flat in cells_drawn.iter() {
                entries.push(Sample {
                    vector: fm.vector_at(cell_flat),
                    tumor,
                    branch,
                    cell_flat,
                });
            }
        }
    }
    Ok(SampleSet { per_class, entries })
}
