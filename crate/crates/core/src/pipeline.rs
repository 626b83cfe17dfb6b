//! Patch-wise inference and the two-stage coarse-to-fine cascade.
//!
//! [`infer_patchwise`] tiles a volume with a fixed-order sliding window,
//! averages overlapping predictions with equal weights, and auto-pads
//! volumes smaller than the patch. [`run_two_stage`] chains four models:
//! an organ localizer on a downsampled grid, an organ refiner inside the
//! organ region, then a lesion localizer and refiner inside nested
//! regions of interest. Anything implementing [`Predictor`] can stand in
//! for a trained network, which is how the ground-truth-backed oracle
//! tests pin the plumbing down exactly.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::grid::{
    bbox_of, crop_volume, largest_component, paste_mask, resample_mask_to, resample_trilinear,
    BBox, Connectivity, Dims, Mask, Spacing, Volume,
};
use crate::net::{BranchOutputs, Network};

/// A per-patch prediction source. `origin` is the patch's offset inside
/// the volume handed to [`infer_patchwise`] (not global coordinates).
pub trait Predictor {
    fn predict_patch(&mut self, patch: &Volume, origin: [usize; 3]) -> Result<BranchOutputs>;
}

/// Networks predict in eval mode so inference never consumes dropout
/// randomness.
impl Predictor for Network {
    fn predict_patch(&mut self, patch: &Volume, _origin: [usize; 3]) -> Result<BranchOutputs> {
        self.set_mode(crate::net::Mode::Eval);
        let (out, _) = self.forward(patch)?;
        Ok(out)
    }
}

/// Stitched full-grid predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutputs {
    pub seg_prob: Volume,
    pub dist_pred: Volume,
    pub slice_prob: Vec<f64>,
}

/// Tile origins along one axis: multiples of `stride` while a full patch
/// fits, plus a final tile clamped to end exactly at the boundary.
fn tile_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(patch <= n && stride >= 1);
    let mut starts = Vec::new();
    let mut o = 0usize;
    loop {
        if o + patch >= n {
            let last = n - patch;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            break;
        }
        starts.push(o);
        o += stride;
    }
    starts
}

/// Slide a patch over the volume and average per-voxel (and per-slice)
/// predictions over all covering tiles with equal weights.
///
/// `overlap` in `[0, 0.9]` sets the stride to
/// `max(1, round(patch * (1 - overlap)))`. Tiles are visited in z, y, x
/// order. A volume smaller than the patch is padded at the far side with
/// its minimum value and the result is cropped back.
pub fn infer_patchwise(
    predictor: &mut dyn Predictor,
    vol: &Volume,
    patch: Dims,
    overlap: f64,
) -> Result<GridOutputs> {
    if patch.z == 0 || patch.y == 0 || patch.x == 0 {
        return Err(Error::ConfigError(format!("patch {patch:?} has a zero axis")));
    }
    if !(0.0..=0.9).contains(&overlap) {
        return Err(Error::ConfigError(format!("overlap = {overlap} out of [0, 0.9]")));
    }
    let orig_dims = vol.dims();
    let work_dims = Dims::new(
        orig_dims.z.max(patch.z),
        orig_dims.y.max(patch.y),
        orig_dims.x.max(patch.x),
    );
    let work: Volume = if work_dims == orig_dims {
        vol.clone()
    } else {
        let (lo, _) = vol.min_max();
        let mut data = vec![lo; work_dims.len()];
        for z in 0..orig_dims.z {
            for y in 0..orig_dims.y {
                for x in 0..orig_dims.x {
                    data[work_dims.index(z, y, x)] = vol.data()[orig_dims.index(z, y, x)];
                }
            }
        }
        Volume::new(work_dims, vol.spacing(), data)?
    };

    let stride = |p: usize| ((p as f64 * (1.0 - overlap)).round() as usize).max(1);
    let zs = tile_starts(work_dims.z, patch.z, stride(patch.z));
    let ys = tile_starts(work_dims.y, patch.y, stride(patch.y));
    let xs = tile_starts(work_dims.x, patch.x, stride(patch.x));

    let n = work_dims.len();
    let mut seg_sum = vec![0.0f64; n];
    let mut dist_sum = vec![0.0f64; n];
    let mut cnt = vec![0u32; n];
    let mut slice_sum = vec![0.0f64; work_dims.z];
    let mut slice_cnt = vec![0u32; work_dims.z];
    for &oz in &zs {
        for &oy in &ys {
            for &ox in &xs {
                let bbox = BBox::checked(
                    [oz, oy, ox],
                    [oz + patch.z - 1, oy + patch.y - 1, ox + patch.x - 1],
                    work_dims,
                )?;
                let tile = crop_volume(&work, &bbox)?;
                let out = predictor.predict_patch(&tile, [oz, oy, ox])?;
                if out.seg_prob.dims() != patch {
                    return Err(Error::ShapeError {
                        context: "predictor output".into(),
                        expected: patch,
                        got: out.seg_prob.dims(),
                    });
                }
                for pz in 0..patch.z {
                    for py in 0..patch.y {
                        for px in 0..patch.x {
                            let wi = work_dims.index(oz + pz, oy + py, ox + px);
                            let pi = patch.index(pz, py, px);
                            seg_sum[wi] += out.seg_prob.data()[pi];
                            dist_sum[wi] += out.dist_pred.data()[pi];
                            cnt[wi] += 1;
                        }
                    }
                    slice_sum[oz + pz] += out.slice_prob[pz];
                    slice_cnt[oz + pz] += 1;
                }
            }
        }
    }
    for i in 0..n {
        debug_assert!(cnt[i] > 0, "uncovered voxel");
        seg_sum[i] /= cnt[i] as f64;
        dist_sum[i] /= cnt[i] as f64;
    }
    for z in 0..work_dims.z {
        slice_sum[z] /= slice_cnt[z] as f64;
    }

    let mut seg = Volume::new(work_dims, vol.spacing(), seg_sum)?;
    let mut dist = Volume::new(work_dims, vol.spacing(), dist_sum)?;
    if work_dims != orig_dims {
        let back = BBox::checked(
            [0, 0, 0],
            [orig_dims.z - 1, orig_dims.y - 1, orig_dims.x - 1],
            work_dims,
        )?;
        seg = crop_volume(&seg, &back)?;
        dist = crop_volume(&dist, &back)?;
        slice_sum.truncate(orig_dims.z);
    }
    Ok(GridOutputs { seg_prob: seg, dist_pred: dist, slice_prob: slice_sum })
}

/// Threshold probabilities into a mask; `prob >= threshold` is
/// foreground (inclusive).
pub fn binarize(v: &Volume, threshold: f64) -> Result<Mask> {
    if !(threshold.is_finite() && (0.0..=1.0).contains(&threshold)) {
        return Err(Error::ConfigError(format!("threshold = {threshold} out of [0, 1]")));
    }
    let data = v.data().iter().map(|&p| u8::from(p >= threshold)).collect();
    Mask::new(v.dims(), v.spacing(), data)
}

/// Where the lesion search region comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiMode {
    /// Predict the organ with the two organ models.
    Seg,
    /// Substitute a provided ground-truth organ mask.
    Mask,
}

impl RoiMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoiMode::Seg => "seg",
            RoiMode::Mask => "mask",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(RoiMode::Seg),
            "mask" => Ok(RoiMode::Mask),
            other => Err(Error::ConfigError(format!(
                "unknown region mode {other:?} (expected seg|mask)"
            ))),
        }
    }
}

/// Knobs of the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub patch: Dims,
    pub overlap: f64,
    pub threshold: f64,
    /// Spacing multiplier of the coarse organ stage.
    pub downsample: f64,
    /// Region-of-interest margin in voxels per side.
    pub margin: usize,
    pub roi: RoiMode,
}

impl PipelineConfig {
    pub fn desk_default() -> Self {
        PipelineConfig {
            patch: Dims::new(8, 24, 24),
            overlap: 0.25,
            threshold: 0.5,
            downsample: 2.0,
            margin: 8,
            roi: RoiMode::Seg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(Error::ConfigError(format!("overlap = {} out of [0, 0.9]", self.overlap)));
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(Error::ConfigError(format!(
                "threshold = {} out of [0, 1]",
                self.threshold
            )));
        }
        if !(self.downsample.is_finite() && self.downsample >= 1.0) {
            return Err(Error::ConfigError(format!(
                "downsample = {} must be >= 1",
                self.downsample
            )));
        }
        if self.patch.z == 0 || self.patch.y == 0 || self.patch.x == 0 {
            return Err(Error::ConfigError(format!("patch {:?} has a zero axis", self.patch)));
        }
        Ok(())
    }
}

/// Wall-clock record of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub seconds: f64,
    /// Region the stage operated on, in full-grid voxel coordinates.
    pub roi: BBox,
}

/// Final masks plus provenance of the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub organ: Mask,
    pub lesion: Mask,
    pub organ_roi: BBox,
    pub lesion_roi: BBox,
    /// True when the coarse organ stage found nothing and the search
    /// fell back to the whole volume.
    pub organ_fallback: bool,
    /// True when the coarse lesion stage found nothing and the fine
    /// stage searched the whole organ region.
    pub lesion_roi_fallback: bool,
    pub stages: Vec<StageReport>,
}

fn whole(dims: Dims) -> BBox {
    BBox::checked([0, 0, 0], [dims.z - 1, dims.y - 1, dims.x - 1], dims)
        .expect("whole-grid box is always valid")
}

fn shift(local: &BBox, origin: [usize; 3], dims: Dims) -> Result<BBox> {
    BBox::checked(
        [origin[0] + local.min[0], origin[1] + local.min[1], origin[2] + local.min[2]],
        [origin[0] + local.max[0], origin[1] + local.max[1], origin[2] + local.max[2]],
        dims,
    )
}

/// Run the coarse-to-fine cascade.
///
/// In [`RoiMode::Mask`] the organ models are skipped and `gt_organ`
/// (required) becomes the organ output; lesion predictions then stay
/// inside regions derived from it. The lesion result is the coarse
/// in-region prediction with the fine prediction replacing it inside the
/// lesion region; it is not additionally masked by the organ.
pub fn run_two_stage(
    vol: &Volume,
    organ_coarse: &mut dyn Predictor,
    organ_fine: &mut dyn Predictor,
    lesion_coarse: &mut dyn Predictor,
    lesion_fine: &mut dyn Predictor,
    gt_organ: Option<&Mask>,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let dims = vol.dims();
    let mut stages = Vec::new();
    let mut organ_fallback = false;

    let (organ, organ_roi) = match cfg.roi {
        RoiMode::Mask => {
            let gt = gt_organ.ok_or_else(|| {
                Error::ConfigError("mask region mode needs a ground-truth organ mask".into())
            })?;
            if gt.dims() != dims {
                return Err(Error::ShapeError {
                    context: "organ mask".into(),
                    expected: dims,
                    got: gt.dims(),
                });
            }
            let t = Instant::now();
            let roi = if gt.count_fg() == 0 {
                organ_fallback = true;
                whole(dims)
            } else {
                bbox_of(gt, cfg.margin)?
            };
            stages.push(StageReport {
                stage: "organ_mask_substitute".into(),
                seconds: t.elapsed().as_secs_f64(),
                roi,
            });
            (gt.clone(), roi)
        }
        RoiMode::Seg => {
            // Coarse pass on a downsampled grid.
            let t = Instant::now();
            let s = vol.spacing();
            let ds = Spacing::new(
                s.z * cfg.downsample,
                s.y * cfg.downsample,
                s.x * cfg.downsample,
            )?;
            let vol_ds = resample_trilinear(vol, ds)?;
            let coarse = infer_patchwise(organ_coarse, &vol_ds, cfg.patch, cfg.overlap)?;
            let coarse_mask = binarize(&coarse.seg_prob, cfg.threshold)?;
            let roi = if coarse_mask.count_fg() == 0 {
                organ_fallback = true;
                whole(dims)
            } else {
                let lc = largest_component(&coarse_mask, Connectivity::Six);
                let full = resample_mask_to(&lc, dims, s)?;
                if full.count_fg() == 0 {
                    organ_fallback = true;
                    whole(dims)
                } else {
                    bbox_of(&full, cfg.margin)?
                }
            };
            stages.push(StageReport {
                stage: "organ_coarse".into(),
                seconds: t.elapsed().as_secs_f64(),
                roi: whole(vol_ds.dims()),
            });

            // Fine pass inside the region.
            let t = Instant::now();
            let roi_vol = crop_volume(vol, &roi)?;
            let fine = infer_patchwise(organ_fine, &roi_vol, cfg.patch, cfg.overlap)?;
            let fine_mask = binarize(&fine.seg_prob, cfg.threshold)?;
            let organ_local = if fine_mask.count_fg() == 0 {
                fine_mask
            } else {
                largest_component(&fine_mask, Connectivity::Six)
            };
            let mut organ = Mask::zeros(dims, vol.spacing());
            paste_mask(&mut organ, &organ_local, roi.min)?;
            stages.push(StageReport {
                stage: "organ_fine".into(),
                seconds: t.elapsed().as_secs_f64(),
                roi,
            });
            (organ, roi)
        }
    };

    // Lesion coarse pass inside the organ region.
    let t = Instant::now();
    let organ_roi_vol = crop_volume(vol, &organ_roi)?;
    let lc_out = infer_patchwise(lesion_coarse, &organ_roi_vol, cfg.patch, cfg.overlap)?;
    let lc_mask = binarize(&lc_out.seg_prob, cfg.threshold)?;
    stages.push(StageReport {
        stage: "lesion_coarse".into(),
        seconds: t.elapsed().as_secs_f64(),
        roi: organ_roi,
    });

    let mut lesion_roi_fallback = false;
    let lesion_roi = if lc_mask.count_fg() == 0 {
        lesion_roi_fallback = true;
        organ_roi
    } else {
        // The local box is clamped to the organ region by construction.
        shift(&bbox_of(&lc_mask, cfg.margin)?, organ_roi.min, dims)?
    };

    // Lesion fine pass; its output replaces the coarse prediction inside
    // the lesion region.
    let t = Instant::now();
    let lesion_roi_vol = crop_volume(vol, &lesion_roi)?;
    let lf_out = infer_patchwise(lesion_fine, &lesion_roi_vol, cfg.patch, cfg.overlap)?;
    let lf_mask = binarize(&lf_out.seg_prob, cfg.threshold)?;
    let mut lesion = Mask::zeros(dims, vol.spacing());
    paste_mask(&mut lesion, &lc_mask, organ_roi.min)?;
    let mut data = lesion.data().to_vec();
    for z in lesion_roi.min[0]..=lesion_roi.max[0] {
        for y in lesion_roi.min[1]..=lesion_roi.max[1] {
            for x in lesion_roi.min[2]..=lesion_roi.max[2] {
                data[dims.index(z, y, x)] = 0;
            }
        }
    }
    let mut lesion = Mask::new(dims, vol.spacing(), data)?;
    paste_mask(&mut lesion, &lf_mask, lesion_roi.min)?;
    stages.push(StageReport {
        stage: "lesion_fine".into(),
        seconds: t.elapsed().as_secs_f64(),
        roi: lesion_roi,
    });

    Ok(PipelineResult {
        organ,
        lesion,
        organ_roi,
        lesion_roi,
        organ_fallback,
        lesion_roi_fallback,
        stages,
    })
}
