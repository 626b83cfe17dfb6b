//! The training loop: patch sampling, augmentation, the dual forward
//! pass, loss composition per arm, Adam, and the decaying learning rate.
//!
//! One iteration, in order: draw a case, crop a foreground-biased patch,
//! apply geometric augmentation to image and label together, build the
//! appearance-augmented branch pair, run both branches, derive the patch
//! distance map and slice labels, compose the arm's loss, push gradients
//! through both branches, and take one Adam step. Ablation arms change
//! only which loss terms contribute — the data flow is identical for
//! every arm.
//!
//! The default learning-rate schedule is the compounding recurrence
//! `lr <- lr * (1 - i / max_iter)^0.9` applied at the start of iteration
//! `i`; iteration 0 leaves the rate unchanged and an update at
//! `i = max_iter` would reach exactly zero. The conventional polynomial
//! decay from the initial rate is available as an alternative mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{crop_mask, crop_volume, slice_labels, BBox, Dims, Mask, Volume};
use crate::io::csv::LossRow;
use crate::net::Network;
use crate::objective::{total_loss, LossParams, Toggles};
use crate::sampling::{cell_classes, draw_samples};
use crate::sdt::signed_distance_map;
use crate::texaug::{geometric_augment, make_pair};

/// Exponent of the learning-rate decay.
pub const LR_POWER: f64 = 0.9;

/// Training arm: which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Supervised segmentation only.
    Bl,
    /// Baseline plus distance regression.
    Idr,
    /// Baseline plus distance regression and distance-to-mask transfer.
    Dtl,
    /// Baseline plus the self-supervised pair (contrast + consistency).
    Dsl,
    /// Everything.
    Full,
}

impl Arm {
    pub fn toggles(self) -> Toggles {
        match self {
            Arm::Bl => Toggles { seg: true, dis: false, tran: false, con: false, cos: false },
            Arm::Idr => Toggles { seg: true, dis: true, tran: false, con: false, cos: false },
            Arm::Dtl => Toggles { seg: true, dis: true, tran: true, con: false, cos: false },
            Arm::Dsl => Toggles { seg: true, dis: false, tran: false, con: true, cos: true },
            Arm::Full => Toggles::all_on(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Bl => "bl",
            Arm::Idr => "idr",
            Arm::Dtl => "dtl",
            Arm::Dsl => "dsl",
            Arm::Full => "full",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "bl" => Ok(Arm::Bl),
            "idr" => Ok(Arm::Idr),
            "dtl" => Ok(Arm::Dtl),
            "dsl" => Ok(Arm::Dsl),
            "full" => Ok(Arm::Full),
            other => Err(Error::ConfigError(format!(
                "unknown arm {other:?} (expected bl|idr|dtl|dsl|full)"
            ))),
        }
    }
}

/// How the learning rate evolves across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrMode {
    /// The compounding recurrence (default).
    Compound,
    /// Conventional polynomial decay from the initial rate.
    Poly,
}

impl LrMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LrMode::Compound => "compound",
            LrMode::Poly => "poly",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "compound" => Ok(LrMode::Compound),
            "poly" => Ok(LrMode::Poly),
            other => Err(Error::ConfigError(format!(
                "unknown lr mode {other:?} (expected compound|poly)"
            ))),
        }
    }
}

/// One step of the compounding recurrence:
/// `lr * (1 - current_iter / max_iter)^0.9`. At `current_iter = 0` the
/// rate is unchanged; at `current_iter = max_iter` it is exactly zero.
pub fn lr_step(lr: f64, current_iter: usize, max_iter: usize) -> f64 {
    let frac = 1.0 - current_iter as f64 / max_iter as f64;
    if frac <= 0.0 {
        return 0.0;
    }
    lr * frac.powf(LR_POWER)
}

/// Conventional polynomial decay evaluated from the initial rate.
pub fn lr_poly(lr0: f64, current_iter: usize, max_iter: usize) -> f64 {
    let frac = 1.0 - current_iter as f64 / max_iter as f64;
    if frac <= 0.0 {
        return 0.0;
    }
    lr0 * frac.powf(LR_POWER)
}

/// One Adam update on a flat tensor. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam moments for every network tensor, in visitation order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(net: &mut Network, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = Vec::new();
        net.for_each_param(&mut |_, p, _| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        AdamState { m, v, t: 0, beta1, beta2, eps }
    }

    /// Apply one step from the accumulated gradients. A non-finite
    /// gradient aborts with the offending tensor named; parameters are
    /// untouched in that case.
    pub fn step(&mut self, net: &mut Network, lr: f64, iter: usize) -> Result<()> {
        let mut bad: Option<String> = None;
        net.for_each_param(&mut |name, _, g| {
            if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(param) = bad {
            return Err(Error::NonFiniteGradient { param, iter });
        }
        self.t += 1;
        let t = self.t;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut k = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.for_each_param(&mut |_, p, g| {
            adam_update(p, g, &mut ms[k], &mut vs[k], t, lr, b1, b2, eps);
            k += 1;
        });
        Ok(())
    }
}

/// One training case: an image and the target mask for this model
/// (organ or lesion, the caller decides).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCase {
    pub id: String,
    pub volume: Volume,
    pub label: Mask,
}

/// Everything the loop needs besides the network and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arm: Arm,
    pub lr: f64,
    pub max_iter: usize,
    /// When set, overrides `max_iter` with `epochs * cases`.
    pub epochs: Option<usize>,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_mode: LrMode,
    pub patch: Dims,
    /// Probability of centering a patch on a foreground voxel.
    pub fg_bias: f64,
    pub samples_per_class: usize,
    /// Cap of the patch signed-distance targets, in mm.
    pub cap_mm: f64,
    pub loss: LossParams,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default(arm: Arm, seed: u64) -> Self {
        TrainConfig {
            arm,
            lr: 1e-4,
            max_iter: 300,
            epochs: None,
            batch: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_mode: LrMode::Compound,
            patch: Dims::new(8, 24, 24),
            fg_bias: 0.7,
            samples_per_class: 4,
            cap_mm: 30.0,
            loss: LossParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::ConfigError(format!("lr = {} must be positive", self.lr)));
        }
        if self.max_iter == 0 && self.epochs.is_none() {
            return Err(Error::ConfigError("max_iter must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::ConfigError("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::ConfigError(format!(
                "fg_bias = {} out of [0, 1]",
                self.fg_bias
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::ConfigError("samples_per_class must be positive".into()));
        }
        if !(self.cap_mm > 0.0 && self.cap_mm.is_finite()) {
            return Err(Error::ConfigError(format!("cap_mm = {} must be positive", self.cap_mm)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::ConfigError(format!("{k} = {b} out of [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Crop a patch around a (biased) random center, clamped to the volume.
fn crop_patch(
    case: &TrainCase,
    patch: Dims,
    fg: &[usize],
    fg_bias: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Mask)> {
    let dims = case.volume.dims();
    let center = if !fg.is_empty() && rng.random::<f64>() < fg_bias {
        fg[rng.random_range(0..fg.len())]
    } else {
        rng.random_range(0..dims.len())
    };
    let (cz, cy, cx) = dims.coords(center);
    let origin = |c: usize, p: usize, d: usize| c.saturating_sub(p / 2).min(d - p);
    let min = [
        origin(cz, patch.z, dims.z),
        origin(cy, patch.y, dims.y),
        origin(cx, patch.x, dims.x),
    ];
    let max = [min[0] + patch.z - 1, min[1] + patch.y - 1, min[2] + patch.x - 1];
    let bbox = BBox::checked(min, max, dims)?;
    Ok((crop_volume(&case.volume, &bbox)?, crop_mask(&case.label, &bbox)?))
}

/// Train `net` in place; returns one loss row per iteration.
pub fn train(net: &mut Network, cases: &[TrainCase], cfg: &TrainConfig) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::ConfigError("no training cases".into()));
    }
    let factor = net.config().factor();
    for (axis, p) in [("z", cfg.patch.z), ("y", cfg.patch.y), ("x", cfg.patch.x)] {
        if p % factor != 0 || p == 0 {
            return Err(Error::ConfigError(format!(
                "patch.{axis} = {p} must be a positive multiple of {factor}"
            )));
        }
    }
    for c in cases {
        let d = c.volume.dims();
        if d.z < cfg.patch.z || d.y < cfg.patch.y || d.x < cfg.patch.x {
            return Err(Error::ConfigError(format!(
                "case {} ({:?}) is smaller than the patch {:?}",
                c.id, d, cfg.patch
            )));
        }
        if c.label.dims() != d {
            return Err(Error::ShapeError {
                context: format!("case {} label", c.id),
                expected: d,
                got: c.label.dims(),
            });
        }
    }
    let max_iter = match cfg.epochs {
        Some(e) => e * cases.len(),
        None => cfg.max_iter,
    };
    if max_iter == 0 {
        return Err(Error::ConfigError("zero total iterations".into()));
    }

    // Foreground voxel lists, once per case.
    let fg_lists: Vec<Vec<usize>> = cases
        .iter()
        .map(|c| {
            c.label
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let toggles = cfg.arm.toggles();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut lr = cfg.lr;
    let mut rows = Vec::with_capacity(max_iter);
    net.set_mode(crate::net::Mode::Train);
    let result = (|| -> Result<()> {
        for iter in 0..max_iter {
            lr = match cfg.lr_mode {
                LrMode::Compound => lr_step(lr, iter, max_iter),
                LrMode::Poly => lr_poly(cfg.lr, iter, max_iter),
            };
            net.zero_grads();
            let mut sums = [0.0f64; 6]; // seg, dis, tran, con, cos, all
            for _ in 0..cfg.batch {
                let ci = rng.random_range(0..cases.len());
                let (patch_vol, patch_label) =
                    crop_patch(&cases[ci], cfg.patch, &fg_lists[ci], cfg.fg_bias, &mut rng)?;
                let geo_seed: u64 = rng.random();
                let pair_seed: u64 = rng.random();
                let sample_seed: u64 = rng.random();
                let (aug_vol, aug_label) = geometric_augment(&patch_vol, &patch_label, geo_seed)?;
                let pair = make_pair(&aug_vol, pair_seed)?;
                let (out_phi, tape_phi) = net.forward(&pair.x_phi)?;
                let (out_varphi, tape_varphi) = net.forward(&pair.x_varphi)?;
                let m = signed_distance_map(&aug_label, cfg.cap_mm)?;
                let c = slice_labels(&aug_label);
                let samples = if toggles.con {
                    let cells = cell_classes(&aug_label, factor)?;
                    match draw_samples(
                        &out_phi.features,
                        &out_varphi.features,
                        &cells,
                        cfg.samples_per_class,
                        sample_seed,
                    ) {
                        Ok(s) => Some(s),
                        Err(Error::NoTumorInPatch) => None,
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                };
                let (report, mut grads) = total_loss(
                    &out_phi,
                    &out_varphi,
                    &aug_label,
                    &c,
                    &m,
                    samples.as_ref(),
                    &toggles,
                    &cfg.loss,
                )?;
                if cfg.batch > 1 {
                    let s = 1.0 / cfg.batch as f64;
                    for buf in [
                        &mut grads.phi.seg,
                        &mut grads.phi.dist,
                        &mut grads.phi.slice,
                        &mut grads.phi.features,
                        &mut grads.varphi.seg,
                        &mut grads.varphi.dist,
                        &mut grads.varphi.slice,
                        &mut grads.varphi.features,
                    ] {
                        for v in buf.iter_mut() {
                            *v *= s;
                        }
                    }
                }
                net.backward(&tape_phi, &grads.phi)?;
                net.backward(&tape_varphi, &grads.varphi)?;
                for (s, v) in sums.iter_mut().zip([
                    report.seg,
                    report.dis,
                    report.tran,
                    report.con,
                    report.cos,
                    report.all,
                ]) {
                    *s += v;
                }
            }
            adam.step(net, lr, iter)?;
            let b = cfg.batch as f64;
            rows.push(LossRow {
                iter,
                seg: sums[0] / b,
                dis: sums[1] / b,
                tran: sums[2] / b,
                con: sums[3] / b,
                cos: sums[4] / b,
                all: sums[5] / b,
                lr,
            });
        }
        Ok(())
    })();
    net.set_mode(crate::net::Mode::Eval);
    result?;
    Ok(rows)
}
