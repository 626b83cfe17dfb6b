//! The composite training objective and its analytic gradients.
//!
//! Five task terms — supervised segmentation (volume + slice), distance
//! regression, distance-to-segmentation transfer, cross-branch feature
//! contrast, and cross-branch consistency — each return their value plus
//! gradients w.r.t. the relevant branch outputs. [`total_loss`] composes
//! whichever terms a training arm enables and reports the exact sum;
//! disabled terms contribute zero loss and zero gradient, nothing else
//! changes.

use crate::error::{Error, Result};
use crate::grid::{Mask, SliceLabels};
use crate::net::{BranchOutputs, OutputGrads};
use crate::sampling::{Branch, SampleSet};
use crate::sdt::DistanceMap;

/// Numeric knobs of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    /// Clamp floor inside the binary cross-entropy logs and the Dice
    /// denominator guard.
    pub eps: f64,
    /// Steepness (per mm) of the distance-to-probability conversion.
    pub steepness: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { eps: 1e-7, steepness: 4.0, tau: 0.1 }
    }
}

/// Which loss terms participate; the supervised segmentation term is
/// part of every training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub seg: bool,
    pub dis: bool,
    pub tran: bool,
    pub con: bool,
    pub cos: bool,
}

impl Toggles {
    pub fn all_on() -> Self {
        Toggles { seg: true, dis: true, tran: true, con: true, cos: true }
    }

    pub fn baseline() -> Self {
        Toggles { seg: true, dis: false, tran: false, con: false, cos: false }
    }
}

/// Loss values of one pair pass. `ssl = con + cos` and
/// `all = seg + dis + tran + ssl`, both exact sums of the fields.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub dis: f64,
    pub tran: f64,
    pub con: f64,
    pub cos: f64,
    pub ssl: f64,
    pub all: f64,
    /// True when the contrastive term was enabled but had no admissible
    /// cross-class pair (then `con = 0`).
    pub con_skipped: bool,
}

/// Gradients for both branches of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads {
    pub phi: OutputGrads,
    pub varphi: OutputGrads,
}

/// Dice-plus-binary-cross-entropy of a prediction in `[0, 1]` against a
/// binary target, with the gradient w.r.t. the prediction.
///
/// Dice uses raw predictions with `eps` guarding the denominator; the
/// cross-entropy clamps predictions to `[eps, 1-eps]` inside the logs
/// and its gradient is the exact derivative of that clamped expression
/// (zero where the clamp is active).
pub fn dice_bce(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ConfigError(format!(
            "dice_bce needs matching non-empty inputs, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::ConfigError(format!("dice_bce eps = {eps} out of (0, 0.5)")));
    }
    let n = pred.len() as f64;
    let mut s_xy = 0.0;
    let mut s_y = 0.0;
    let mut s_p = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        debug_assert!((0.0..=1.0).contains(&p), "prediction outside [0, 1]");
        debug_assert!(y == 0.0 || y == 1.0, "target not binary");
        s_xy += y * p;
        s_y += y;
        s_p += p;
    }
    let d = s_y + s_p + eps;
    let dice = 1.0 - 2.0 * s_xy / d;

    let mut bce = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
        let pc = p.clamp(eps, 1.0 - eps);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        // Dice part: d/dp [ -2*s_xy/d ].
        let g_dice = -2.0 * (y * d - s_xy) / (d * d);
        // BCE part is flat where the clamp engaged.
        let g_bce = if p > eps && p < 1.0 - eps {
            -(y / pc - (1.0 - y) / (1.0 - pc)) / n
        } else {
            0.0
        };
        grad[i] = g_dice + g_bce;
    }
    Ok((dice + bce / n, grad))
}

fn binary_as_f64(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| f64::from(b)).collect()
}

/// Supervised segmentation loss: the sum of four Dice-BCE terms — the
/// voxel prediction of each branch against the mask and the slice
/// prediction of each branch against the per-slice labels.
pub fn seg_loss(
    phi: &BranchOutputs,
    varphi: &BranchOutputs,
    y: &Mask,
    c: &SliceLabels,
    params: &LossParams,
    grads: &mut PairGrads,
) -> Result<f64> {
    let yv = binary_as_f64(y.data());
    let cv = binary_as_f64(&c.labels);
    let mut total = 0.0;
    for (out, g) in [(phi, &mut grads.phi), (varphi, &mut grads.varphi)] {
        let (lv, gv) = dice_bce(out.seg_prob.data(), &yv, params.eps)?;
        total += lv;
        for (dst, s) in g.seg.iter_mut().zip(&gv) {
            *dst += s;
        }
        let (ls, gs) = dice_bce(&out.slice_prob, &cv, params.eps)?;
        total += ls;
        for (dst, s) in g.slice.iter_mut().zip(&gs) {
            *dst += s;
        }
    }
    Ok(total)
}

/// Mean absolute error of both branches' distance predictions against
/// the reference map, averaged over `2 * voxels`. Ties (`pred == ref`)
/// take subgradient zero.
pub fn dist_loss(
    phi: &BranchOutputs,
    varphi: &BranchOutputs,
    m: &DistanceMap,
    grads: &mut PairGrads,
) -> Result<f64> {
    let n = m.data().len() as f64;
    let mut total = 0.0;
    for (out, g) in [(phi, &mut grads.phi), (varphi, &mut grads.varphi)] {
        if out.dist_pred.data().len() != m.data().len() {
            return Err(Error::ShapeError {
                context: "distance loss".into(),
                expected: m.dims(),
                got: out.dist_pred.dims(),
            });
        }
        for (i, (&p, &r)) in out.dist_pred.data().iter().zip(m.data()).enumerate() {
            let d = p - r;
            total += d.abs();
            g.dist[i] += d.signum() / (2.0 * n); // signum(0) = 0
        }
    }
    Ok(total / (2.0 * n))
}

/// Transfer loss: convert each branch's distance prediction to a soft
/// mask with a logistic of the negated distance and score it against the
/// mask with Dice-BCE; the two branch terms are averaged.
pub fn tran_loss(
    phi: &BranchOutputs,
    varphi: &BranchOutputs,
    y: &Mask,
    params: &LossParams,
    grads: &mut PairGrads,
) -> Result<f64> {
    let yv = binary_as_f64(y.data());
    let k = params.steepness;
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::ConfigError(format!("steepness = {k} must be positive")));
    }
    let mut total = 0.0;
    for (out, g) in [(phi, &mut grads.phi), (varphi, &mut grads.varphi)] {
        let soft: Vec<f64> = out
            .dist_pred
            .data()
            .iter()
            .map(|&v| crate::sdt::soft_conversion_value(v, k))
            .collect();
        let (l, gs) = dice_bce(&soft, &yv, params.eps)?;
        total += 0.5 * l;
        for (i, (&gsoft, &s)) in gs.iter().zip(&soft).enumerate() {
            // d soft / d dist = -k * s * (1 - s).
            g.dist[i] += 0.5 * gsoft * (-k * s * (1.0 - s));
        }
    }
    Ok(total)
}

/// Output of [`contrastive_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOut {
    pub loss: f64,
    /// Gradient w.r.t. each sample vector, aligned with
    /// `samples.entries`.
    pub grads: Vec<Vec<f64>>,
    /// True when no admissible cross-class pair existed.
    pub skipped: bool,
}

/// Cosine-similarity contrast over drawn samples.
///
/// For every unordered same-class pair `(i, j)` with `i < j`, one term
/// anchored at `i` compares the pair's similarity against all samples of
/// the other class:
/// `-s(i,j)/tau + ln sum_k exp(s(i,k)/tau)` with `k` ranging over the
/// opposite class. The total is the term sum divided by `2 * pairs`.
/// With no opposite-class sample the term is undefined, so the loss is
/// skipped (zero, flagged). Zero-magnitude vectors are an error.
pub fn contrastive_loss(samples: &SampleSet, tau: f64) -> Result<ContrastiveOut> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::ConfigError(format!("tau = {tau} must be positive")));
    }
    let vs = &samples.entries;
    let zero = ContrastiveOut {
        loss: 0.0,
        grads: vs.iter().map(|s| vec![0.0; s.vector.len()]).collect(),
        skipped: true,
    };
    let have_t = vs.iter().any(|s| s.tumor);
    let have_n = vs.iter().any(|s| !s.tumor);
    if !have_t || !have_n {
        return Ok(zero);
    }

    let norms: Vec<f64> = vs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                Err(Error::DegenerateFeature { context: format!("sample {i}") })
            } else {
                Ok(n)
            }
        })
        .collect::<Result<_>>()?;
    let sim = |i: usize, j: usize| -> f64 {
        let dot: f64 = vs[i].vector.iter().zip(&vs[j].vector).map(|(a, b)| a * b).sum();
        dot / (norms[i] * norms[j])
    };
    // d s(i,j) / d v_i, accumulated scaled by `w` into `out`.
    let add_dsim = |out: &mut [f64], w: f64, i: usize, j: usize, s: f64| {
        for (c, o) in out.iter_mut().enumerate() {
            *o += w
                * (vs[j].vector[c] / (norms[i] * norms[j])
                    - s * vs[i].vector[c] / (norms[i] * norms[i]));
        }
    };

    let mut grads: Vec<Vec<f64>> = vs.iter().map(|s| vec![0.0; s.vector.len()]).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            if vs[i].tumor != vs[j].tumor {
                continue;
            }
            pairs += 1;
            let opp: Vec<usize> =
                (0..vs.len()).filter(|&k| vs[k].tumor != vs[i].tumor).collect();
            let s_ij = sim(i, j);
            let sims: Vec<f64> = opp.iter().map(|&k| sim(i, k)).collect();
            let m = sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
            let exps: Vec<f64> = sims.iter().map(|&s| (s / tau - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            sum += -s_ij / tau + m + z.ln();

            // Pair similarity path.
            let mut gi = vec![0.0; vs[i].vector.len()];
            add_dsim(&mut gi, -1.0 / tau, i, j, s_ij);
            let mut gj = vec![0.0; vs[j].vector.len()];
            add_dsim(&mut gj, -1.0 / tau, j, i, s_ij);
            // Log-sum-exp path.
            for ((&k, &s_ik), &e) in opp.iter().zip(&sims).zip(&exps) {
                let w = e / (z * tau);
                add_dsim(&mut gi, w, i, k, s_ik);
                let mut gk = vec![0.0; vs[k].vector.len()];
                add_dsim(&mut gk, w, k, i, s_ik);
                for (dst, v) in grads[k].iter_mut().zip(&gk) {
                    *dst += v;
                }
            }
            for (dst, v) in grads[i].iter_mut().zip(&gi) {
                *dst += v;
            }
            for (dst, v) in grads[j].iter_mut().zip(&gj) {
                *dst += v;
            }
        }
    }
    if pairs == 0 {
        return Ok(zero);
    }
    let scale = 1.0 / (2.0 * pairs as f64);
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(ContrastiveOut { loss: sum * scale, grads, skipped: false })
}

/// Cross-branch consistency: mean squared disagreement of the two
/// branches' voxel probabilities plus their distance predictions.
pub fn consistency_loss(
    phi: &BranchOutputs,
    varphi: &BranchOutputs,
    grads: &mut PairGrads,
) -> Result<f64> {
    let n = phi.seg_prob.data().len() as f64;
    if varphi.seg_prob.data().len() != phi.seg_prob.data().len() {
        return Err(Error::ShapeError {
            context: "consistency loss".into(),
            expected: phi.seg_prob.dims(),
            got: varphi.seg_prob.dims(),
        });
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in phi.seg_prob.data().iter().zip(varphi.seg_prob.data()).enumerate() {
        let d = a - b;
        total += d * d;
        grads.phi.seg[i] += 2.0 * d / n;
        grads.varphi.seg[i] -= 2.0 * d / n;
    }
    for (i, (&a, &b)) in phi.dist_pred.data().iter().zip(varphi.dist_pred.data()).enumerate() {
        let d = a - b;
        total += d * d;
        grads.phi.dist[i] += 2.0 * d / n;
        grads.varphi.dist[i] -= 2.0 * d / n;
    }
    Ok(total / n)
}

/// Compose the enabled loss terms for one augmented pair.
///
/// `samples` feeds the contrastive term; passing `None` while that term
/// is enabled (e.g. the patch had no tumor cell) records a skip instead
/// of failing. Gradients land in one [`PairGrads`]; the contrastive
/// gradients are scattered back to the feature-map layout through the
/// sample provenance.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    phi: &BranchOutputs,
    varphi: &BranchOutputs,
    y: &Mask,
    c: &SliceLabels,
    m: &DistanceMap,
    samples: Option<&SampleSet>,
    toggles: &Toggles,
    params: &LossParams,
) -> Result<(LossReport, PairGrads)> {
    if y.dims() != phi.seg_prob.dims() {
        return Err(Error::ShapeError {
            context: "label vs prediction".into(),
            expected: phi.seg_prob.dims(),
            got: y.dims(),
        });
    }
    let mut grads = PairGrads {
        phi: OutputGrads::zeros_like(phi),
        varphi: OutputGrads::zeros_like(varphi),
    };
    let mut report = LossReport {
        seg: 0.0,
        dis: 0.0,
        tran: 0.0,
        con: 0.0,
        cos: 0.0,
        ssl: 0.0,
        all: 0.0,
        con_skipped: false,
    };
    if toggles.seg {
        report.seg = seg_loss(phi, varphi, y, c, params, &mut grads)?;
    }
    if toggles.dis {
        report.dis = dist_loss(phi, varphi, m, &mut grads)?;
    }
    if toggles.tran {
        report.tran = tran_loss(phi, varphi, y, params, &mut grads)?;
    }
    if toggles.con {
        match samples {
            None => report.con_skipped = true,
            Some(set) => {
                let out = contrastive_loss(set, params.tau)?;
                report.con = out.loss;
                report.con_skipped = out.skipped;
                let cells = phi.features.dims().len();
                for (sample, g) in set.entries.iter().zip(&out.grads) {
                    let dst = match sample.branch {
                        Branch::Phi => &mut grads.phi.features,
                        Branch::Varphi => &mut grads.varphi.features,
                    };
                    for (ch, &gv) in g.iter().enumerate() {
                        dst[ch * cells + sample.cell_flat] += gv;
                    }
                }
            }
        }
    }
    if toggles.cos {
        report.cos = consistency_loss(phi, varphi, &mut grads)?;
    }
    report.ssl = report.con + report.cos;
    report.all = report.seg + report.dis + report.tran + report.ssl;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing, Volume};
    use crate::sampling::{FeatureMap, Sample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-7;

    fn dims() -> Dims {
        Dims::new(2, 2, 2)
    }

    fn iso() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    /// Branch outputs with every field filled from one RNG, predictions
    /// kept away from the BCE clamp boundaries.
    fn rand_branch(seed: u64) -> BranchOutputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims().len();
        let seg: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let dist: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let slice: Vec<f64> = (0..dims().z).map(|_| rng.random_range(0.05..0.95)).collect();
        let fdims = Dims::new(1, 1, 1);
        let feat: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        BranchOutputs {
            seg_prob: Volume::new(dims(), iso(), seg).unwrap(),
            dist_pred: DistanceMap::new(dims(), iso(), dist, 10.0).unwrap(),
            slice_prob: slice,
            features: FeatureMap::new(3, fdims, 2, feat).unwrap(),
        }
    }

    fn label() -> Mask {
        Mask::new(dims(), iso(), vec![1, 0, 0, 1, 0, 0, 1, 0]).unwrap()
    }

    #[test]
    fn dice_bce_matches_worked_example() {
        let pred = [0.5, 0.5, 0.0, 0.0];
        let target = [1.0, 0.0, 0.0, 0.0];
        let (loss, _) = dice_bce(&pred, &target, EPS).unwrap();
        let dice = 1.0 - 2.0 * 0.5 / (1.0 + 1.0 + EPS);
        let bce = (2.0 * std::f64::consts::LN_2 - 2.0 * (1.0 - EPS).ln()) / 4.0;
        assert!((loss - (dice + bce)).abs() < 1e-12);
        assert!((loss - 0.846574).abs() < 1e-5);
    }

    #[test]
    fn dice_bce_is_zero_gradient_inside_clamp() {
        let pred = [0.0, 1.0];
        let target = [0.0, 1.0];
        let (loss, grad) = dice_bce(&pred, &target, EPS).unwrap();
        // Perfect prediction: tiny loss from eps, BCE grads clamped off.
        assert!(loss < 1e-6);
        // Dice part still contributes at the fg voxel.
        assert!(grad[1].is_finite());
    }

    fn fd_vs_analytic(pred: &[f64], target: &[f64]) {
        let (_, grad) = dice_bce(pred, target, EPS).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred.to_vec();
            p[i] += h;
            let (lp, _) = dice_bce(&p, target, EPS).unwrap();
            p[i] -= 2.0 * h;
            let (lm, _) = dice_bce(&p, target, EPS).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * (1.0 + fd.abs()),
                "i={i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn dice_bce_gradient_matches_finite_differences() {
        fd_vs_analytic(&[0.3, 0.8, 0.5, 0.11], &[1.0, 1.0, 0.0, 0.0]);
        fd_vs_analytic(&[0.9, 0.2], &[0.0, 1.0]);
    }

    /// Finite-difference check of any composite loss over both branches'
    /// seg/dist/slice buffers.
    fn fd_check_pair(
        eval: &dyn Fn(&BranchOutputs, &BranchOutputs) -> f64,
        grads: &PairGrads,
        phi: &BranchOutputs,
        varphi: &BranchOutputs,
    ) {
        let h = 1e-6;
        let perturb_seg = |o: &BranchOutputs, i: usize, d: f64| {
            let mut v = o.seg_prob.data().to_vec();
            v[i] += d;
            BranchOutputs {
                seg_prob: Volume::new(o.seg_prob.dims(), iso(), v).unwrap(),
                ..o.clone()
            }
        };
        let perturb_dist = |o: &BranchOutputs, i: usize, d: f64| {
            let mut v = o.dist_pred.data().to_vec();
            v[i] += d;
            BranchOutputs {
                dist_pred: DistanceMap::new(o.dist_pred.dims(), iso(), v, 100.0).unwrap(),
                ..o.clone()
            }
        };
        let perturb_slice = |o: &BranchOutputs, i: usize, d: f64| {
            let mut v = o.slice_prob.clone();
            v[i] += d;
            BranchOutputs { slice_prob: v, ..o.clone() }
        };
        for i in 0..phi.seg_prob.data().len() {
            let fd = (eval(&perturb_seg(phi, i, h), varphi) - eval(&perturb_seg(phi, i, -h), varphi))
                / (2.0 * h);
            assert!((fd - grads.phi.seg[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "phi.seg[{i}]");
            let fd = (eval(phi, &perturb_seg(varphi, i, h)) - eval(phi, &perturb_seg(varphi, i, -h)))
                / (2.0 * h);
            assert!((fd - grads.varphi.seg[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "varphi.seg[{i}]");
        }
        for i in 0..phi.dist_pred.data().len() {
            let fd = (eval(&perturb_dist(phi, i, h), varphi)
                - eval(&perturb_dist(phi, i, -h), varphi))
                / (2.0 * h);
            assert!((fd - grads.phi.dist[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "phi.dist[{i}]");
        }
        for i in 0..phi.slice_prob.len() {
            let fd = (eval(&perturb_slice(phi, i, h), varphi)
                - eval(&perturb_slice(phi, i, -h), varphi))
                / (2.0 * h);
            assert!((fd - grads.phi.slice[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "phi.slice[{i}]");
        }
    }

    #[test]
    fn seg_loss_gradients_match_finite_differences() {
        let phi = rand_branch(1);
        let varphi = rand_branch(2);
        let y = label();
        let c = crate::grid::slice_labels(&y);
        let params = LossParams::default();
        let mut grads = PairGrads {
            phi: OutputGrads::zeros_like(&phi),
            varphi: OutputGrads::zeros_like(&varphi),
        };
        seg_loss(&phi, &varphi, &y, &c, &params, &mut grads).unwrap();
        let eval = |a: &BranchOutputs, b: &BranchOutputs| {
            let mut g = PairGrads {
                phi: OutputGrads::zeros_like(a),
                varphi: OutputGrads::zeros_like(b),
            };
            seg_loss(a, b, &y, &c, &params, &mut g).unwrap()
        };
        fd_check_pair(&eval, &grads, &phi, &varphi);
    }

    #[test]
    fn dist_loss_value_and_gradients() {
        let phi = rand_branch(3);
        let varphi = rand_branch(4);
        let m = crate::sdt::signed_distance_map(&label(), 30.0).unwrap();
        let mut grads = PairGrads {
            phi: OutputGrads::zeros_like(&phi),
            varphi: OutputGrads::zeros_like(&varphi),
        };
        let loss = dist_loss(&phi, &varphi, &m, &mut grads).unwrap();
        let expect: f64 = phi
            .dist_pred
            .data()
            .iter()
            .chain(varphi.dist_pred.data())
            .zip(m.data().iter().chain(m.data()))
            .map(|(p, r)| (p - r).abs())
            .sum::<f64>()
            / (2.0 * m.data().len() as f64);
        assert!((loss - expect).abs() < 1e-12);
        let eval = |a: &BranchOutputs, b: &BranchOutputs| {
            let mut g = PairGrads {
                phi: OutputGrads::zeros_like(a),
                varphi: OutputGrads::zeros_like(b),
            };
            dist_loss(a, b, &m, &mut g).unwrap()
        };
        fd_check_pair(&eval, &grads, &phi, &varphi);
    }

    #[test]
    fn tran_loss_near_floor_for_exact_distance_map() {
        // Predictions equal to the true signed map with a large
        // steepness give an almost perfect soft mask.
        let y = label();
        let m = crate::sdt::signed_distance_map(&y, 30.0).unwrap();
        let out = BranchOutputs {
            seg_prob: Volume::new(dims(), iso(), vec![0.5; 8]).unwrap(),
            dist_pred: m.clone(),
            slice_prob: vec![0.5; 2],
            features: FeatureMap::new(1, Dims::new(1, 1, 1), 2, vec![1.0]).unwrap(),
        };
        let params = LossParams { steepness: 40.0, ..Default::default() };
        let mut grads = PairGrads {
            phi: OutputGrads::zeros_like(&out),
            varphi: OutputGrads::zeros_like(&out),
        };
        let loss = tran_loss(&out, &out, &y, &params, &mut grads).unwrap();
        // The floor is the eps-guarded Dice of a perfect prediction.
        let yv: Vec<f64> = y.data().iter().map(|&b| f64::from(b)).collect();
        let (floor, _) = dice_bce(&yv, &yv, params.eps).unwrap();
        assert!(loss < floor + 1e-6, "loss {loss} vs floor {floor}");
    }

    #[test]
    fn tran_loss_gradients_match_finite_differences() {
        let phi = rand_branch(5);
        let varphi = rand_branch(6);
        let y = label();
        let params = LossParams::default();
        let mut grads = PairGrads {
            phi: OutputGrads::zeros_like(&phi),
            varphi: OutputGrads::zeros_like(&varphi),
        };
        tran_loss(&phi, &varphi, &y, &params, &mut grads).unwrap();
        let eval = |a: &BranchOutputs, b: &BranchOutputs| {
            let mut g = PairGrads {
                phi: OutputGrads::zeros_like(a),
                varphi: OutputGrads::zeros_like(b),
            };
            tran_loss(a, b, &y, &params, &mut g).unwrap()
        };
        fd_check_pair(&eval, &grads, &phi, &varphi);
    }

    #[test]
    fn consistency_gradients_match_finite_differences() {
        let phi = rand_branch(7);
        let varphi = rand_branch(8);
        let mut grads = PairGrads {
            phi: OutputGrads::zeros_like(&phi),
            varphi: OutputGrads::zeros_like(&varphi),
        };
        consistency_loss(&phi, &varphi, &mut grads).unwrap();
        let eval = |a: &BranchOutputs, b: &BranchOutputs| {
            let mut g = PairGrads {
                phi: OutputGrads::zeros_like(a),
                varphi: OutputGrads::zeros_like(b),
            };
            consistency_loss(a, b, &mut g).unwrap()
        };
        fd_check_pair(&eval, &grads, &phi, &varphi);
    }

    #[test]
    fn consistency_is_zero_for_identical_branches() {
        let phi = rand_branch(9);
        let mut grads = PairGrads {
            phi: OutputGrads::zeros_like(&phi),
            varphi: OutputGrads::zeros_like(&phi),
        };
        let loss = consistency_loss(&phi, &phi.clone(), &mut grads).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.phi.seg.iter().all(|&g| g == 0.0));
    }

    fn sample(vector: Vec<f64>, tumor: bool, branch: Branch, cell: usize) -> Sample {
        Sample { vector, tumor, branch, cell_flat: cell }
    }

    #[test]
    fn contrastive_matches_worked_example() {
        // Two tumor vectors aligned, two normal vectors opposed; tau 1.
        let set = SampleSet {
            per_class: 1,
            entries: vec![
                sample(vec![1.0, 0.0], true, Branch::Phi, 0),
                sample(vec![1.0, 0.0], true, Branch::Varphi, 0),
                sample(vec![0.0, 1.0], false, Branch::Phi, 1),
                sample(vec![0.0, -1.0], false, Branch::Varphi, 1),
            ],
        };
        let out = contrastive_loss(&set, 1.0).unwrap();
        assert!(!out.skipped);
        // Pair terms: (-1 + ln 2) and (1 + ln 2); total = 2 ln 2 / 4.
        let expect = std::f64::consts::LN_2 / 2.0;
        assert!((out.loss - expect).abs() < 1e-12, "{} vs {expect}", out.loss);
    }

    #[test]
    fn contrastive_can_be_negative() {
        // One dominant aligned tumor pair with a far-away negative gives
        // a pair term below zero.
        let set = SampleSet {
            per_class: 1,
            entries: vec![
                sample(vec![1.0, 0.0], true, Branch::Phi, 0),
                sample(vec![1.0, 0.001], true, Branch::Varphi, 0),
                sample(vec![-1.0, 0.0], false, Branch::Phi, 1),
                sample(vec![-1.0, 0.001], false, Branch::Varphi, 1),
            ],
        };
        let out = contrastive_loss(&set, 0.1).unwrap();
        assert!(out.loss < 0.0, "loss {}", out.loss);
    }

    #[test]
    fn contrastive_single_class_is_skipped() {
        let set = SampleSet {
            per_class: 1,
            entries: vec![
                sample(vec![1.0, 0.0], true, Branch::Phi, 0),
                sample(vec![0.5, 0.5], true, Branch::Varphi, 0),
            ],
        };
        let out = contrastive_loss(&set, 0.1).unwrap();
        assert!(out.skipped);
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn contrastive_zero_vector_is_an_error() {
        let set = SampleSet {
            per_class: 1,
            entries: vec![
                sample(vec![0.0, 0.0], true, Branch::Phi, 0),
                sample(vec![1.0, 0.0], true, Branch::Varphi, 0),
                sample(vec![0.0, 1.0], false, Branch::Phi, 1),
            ],
        };
        let r = contrastive_loss(&set, 0.1);
        assert!(matches!(r, Err(Error::DegenerateFeature { .. })));
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut entries = Vec::new();
        for i in 0..8 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            entries.push(sample(v, i % 2 == 0, Branch::Phi, i));
        }
        let set = SampleSet { per_class: 4, entries };
        let out = contrastive_loss(&set, 0.1).unwrap();
        let h = 1e-6;
        for e in 0..set.entries.len() {
            for c in 0..3 {
                let mut sp = set.clone();
                sp.entries[e].vector[c] += h;
                let lp = contrastive_loss(&sp, 0.1).unwrap().loss;
                sp.entries[e].vector[c] -= 2.0 * h;
                let lm = contrastive_loss(&sp, 0.1).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - out.grads[e][c]).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "entry {e} ch {c}: {fd} vs {}",
                    out.grads[e][c]
                );
            }
        }
    }

    #[test]
    fn total_loss_components_add_exactly_and_toggles_zero_terms() {
        let phi = rand_branch(10);
        let varphi = rand_branch(11);
        let y = label();
        let c = crate::grid::slice_labels(&y);
        let m = crate::sdt::signed_distance_map(&y, 30.0).unwrap();
        let set = SampleSet {
            per_class: 1,
            entries: vec![
                sample(vec![1.0, 0.0, 0.2], true, Branch::Phi, 0),
                sample(vec![0.9, 0.1, 0.2], true, Branch::Varphi, 0),
                sample(vec![0.0, 1.0, -0.3], false, Branch::Phi, 0),
                sample(vec![0.1, 0.9, -0.3], false, Branch::Varphi, 0),
            ],
        };
        let params = LossParams::default();
        let (full, _) = total_loss(
            &phi,
            &varphi,
            &y,
            &c,
            &m,
            Some(&set),
            &Toggles::all_on(),
            &params,
        )
        .unwrap();
        assert_eq!(full.ssl, full.con + full.cos);
        assert_eq!(full.all, full.seg + full.dis + full.tran + full.ssl);
        assert!(!full.con_skipped);
        assert!(full.seg > 0.0 && full.dis > 0.0 && full.tran > 0.0 && full.cos > 0.0);

        let (bl, bl_grads) = total_loss(
            &phi,
            &varphi,
            &y,
            &c,
            &m,
            Some(&set),
            &Toggles::baseline(),
            &params,
        )
        .unwrap();
        assert_eq!(bl.dis, 0.0);
        assert_eq!(bl.tran, 0.0);
        assert_eq!(bl.ssl, 0.0);
        assert_eq!(bl.all, bl.seg);
        assert_eq!(bl.seg, full.seg);
        assert!(bl_grads.phi.dist.iter().all(|&g| g == 0.0));
        assert!(bl_grads.phi.features.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_loss_without_samples_flags_skip() {
        let phi = rand_branch(12);
        let varphi = rand_branch(13);
        let y = label();
        let c = crate::grid::slice_labels(&y);
        let m = crate::sdt::signed_distance_map(&y, 30.0).unwrap();
        let (rep, _) = total_loss(
            &phi,
            &varphi,
            &y,
            &c,
            &m,
            None,
            &Toggles::all_on(),
            &LossParams::default(),
        )
        .unwrap();
        assert!(rep.con_skipped);
        assert_eq!(rep.con, 0.0);
        assert!(rep.cos > 0.0, "consistency must not be affected by the skip");
    }

    #[test]
    fn contrastive_grads_scatter_to_feature_layout() {
        let phi = rand_branch(14);
        let varphi = rand_branch(15);
        let y = label();
        let c = crate::grid::slice_labels(&y);
        let m = crate::sdt::signed_distance_map(&y, 30.0).unwrap();
        // Features live on a 1x1x1 grid with 3 channels -> cell 0 only.
        let set = SampleSet {
            per_class: 1,
            entries: vec![
                sample(phi.features.vector_at(0), true, Branch::Phi, 0),
                sample(varphi.features.vector_at(0), true, Branch::Varphi, 0),
                sample(vec![0.3, -0.4, 0.1], false, Branch::Phi, 0),
            ],
        };
        let toggles = Toggles { seg: false, dis: false, tran: false, con: true, cos: false };
        let (rep, grads) = total_loss(
            &phi,
            &varphi,
            &y,
            &c,
            &m,
            Some(&set),
            &toggles,
            &LossParams::default(),
        )
        .unwrap();
        assert!(!rep.con_skipped);
        let direct = contrastive_loss(&set, LossParams::default().tau).unwrap();
        // Both phi-branch entries (0 and 2) share cell 0, so their
        // gradients accumulate channel-major.
        for ch in 0..3 {
            assert_eq!(grads.phi.features[ch], direct.grads[0][ch] + direct.grads[2][ch]);
        }
        for ch in 0..3 {
            assert_eq!(grads.varphi.features[ch], direct.grads[1][ch]);
        }
    }
}
