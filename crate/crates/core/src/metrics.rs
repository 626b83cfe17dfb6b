//! Overlap and surface-distance metrics with their exhaustive oracles.
//!
//! Surfaces are foreground voxels with at least one background face
//! neighbour, where the grid border counts as background. Surface
//! distances are voxel-center Euclidean millimetre distances; ASD is the
//! mean and HD95 the nearest-rank 95th percentile of the *pooled*
//! multiset of both directed nearest-surface distances. When exactly one
//! of the two masks is empty the standardized fallbacks 40.0 mm (ASD) and
//! 100.0 mm (HD95) are returned; when both are empty the scores reward
//! the correct empty prediction (DSC 100, distances 0).
//!
//! The fast paths ride on the exact Euclidean distance transform. The
//! `*_naive` twins recompute everything by exhaustive pairwise scans and
//! exist only to cross-check the fast paths; keep them in sync by
//! contract, never by sharing code.

use crate::error::{Error, Result};
use crate::grid::{Mask, Spacing};
use crate::sdt::edt_sq;

/// ASD value reported when exactly one surface is empty.
pub const ASD_FALLBACK_MM: f64 = 40.0;
/// HD95 value reported when exactly one surface is empty.
pub const HD95_FALLBACK_MM: f64 = 100.0;

fn check_aligned(a: &Mask, b: &Mask, context: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeError {
            context: context.into(),
            expected: a.dims(),
            got: b.dims(),
        });
    }
    Ok(())
}

/// Dice similarity coefficient in percent. Both masks empty scores 100,
/// exactly one empty scores 0.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_aligned(a, b, "dsc")?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        na += va as usize;
        nb += vb as usize;
        inter += (va & vb) as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (na + nb) as f64)
}

/// Boundary voxels of a mask: foreground with a background 6-neighbour,
/// treating everything beyond the grid border as background. Returned in
/// z-major scan order.
pub fn surface(m: &Mask) -> Vec<[usize; 3]> {
    let dims = m.dims();
    let mut out = Vec::new();
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                if m.get(z, y, x) != 1 {
                    continue;
                }
                let exposed = [
                    z == 0 || m.get(z - 1, y, x) == 0,
                    z + 1 == dims.z || m.get(z + 1, y, x) == 0,
                    y == 0 || m.get(z, y - 1, x) == 0,
                    y + 1 == dims.y || m.get(z, y + 1, x) == 0,
                    x == 0 || m.get(z, y, x - 1) == 0,
                    x + 1 == dims.x || m.get(z, y, x + 1) == 0,
                ];
                if exposed.iter().any(|&e| e) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Pooled multiset of directed nearest-surface distances in both
/// directions, computed via the exact distance transform. `None` when at
/// least one surface is empty.
fn pooled_surface_distances(a: &Mask, b: &Mask, spacing: Spacing) -> Option<Vec<f64>> {
    let sa = surface(a);
    let sb = surface(b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dims = a.dims();
    let seed_grid = |pts: &[[usize; 3]]| {
        let mut g = vec![false; dims.len()];
        for p in pts {
            g[dims.index(p[0], p[1], p[2])] = true;
        }
        g
    };
    let to_b = edt_sq(dims, spacing, &seed_grid(&sb));
    let to_a = edt_sq(dims, spacing, &seed_grid(&sa));
    let mut pooled = Vec::with_capacity(sa.len() + sb.len());
    for p in &sa {
        pooled.push(to_b[dims.index(p[0], p[1], p[2])].sqrt());
    }
    for p in &sb {
        pooled.push(to_a[dims.index(p[0], p[1], p[2])].sqrt());
    }
    Some(pooled)
}

/// Average symmetric surface distance in millimetres. The pooled
/// distances are sorted before summation so the result is bit-identical
/// under argument swap.
pub fn asd(a: &Mask, b: &Mask, spacing: Spacing) -> Result<f64> {
    check_aligned(a, b, "asd")?;
    match pooled_surface_distances(a, b, spacing) {
        Some(mut d) => {
            d.sort_by(|p, q| p.partial_cmp(q).expect("distances are finite"));
            Ok(d.iter().sum::<f64>() / d.len() as f64)
        }
        None => Ok(fallback(a, b, ASD_FALLBACK_MM)),
    }
}

/// 95th-percentile Hausdorff distance in millimetres (nearest-rank over
/// the pooled symmetric distance multiset).
pub fn hd95(a: &Mask, b: &Mask, spacing: Spacing) -> Result<f64> {
    check_aligned(a, b, "hd95")?;
    match pooled_surface_distances(a, b, spacing) {
        Some(mut d) => {
            d.sort_by(|p, q| p.partial_cmp(q).expect("distances are finite"));
            Ok(d[nearest_rank_95(d.len()) - 1])
        }
        None => Ok(fallback(a, b, HD95_FALLBACK_MM)),
    }
}

/// Nearest-rank index (1-based) of the 95th percentile: `ceil(0.95 * n)`
/// in integer arithmetic.
fn nearest_rank_95(n: usize) -> usize {
    (95 * n).div_ceil(100)
}

fn fallback(a: &Mask, b: &Mask, value: f64) -> f64 {
    if a.is_all_zero() && b.is_all_zero() {
        0.0
    } else {
        value
    }
}

/// Euclidean millimetre distance between foreground centroids (means of
/// voxel center positions). Errors when either mask is empty.
pub fn centroid_distance(a: &Mask, b: &Mask, spacing: Spacing) -> Result<f64> {
    check_aligned(a, b, "centroid_distance")?;
    let centroid = |m: &Mask, name: &str| -> Result<[f64; 3]> {
        let dims = m.dims();
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for z in 0..dims.z {
            for y in 0..dims.y {
                for x in 0..dims.x {
                    if m.get(z, y, x) == 1 {
                        sum[0] += z as f64 * spacing.z;
                        sum[1] += y as f64 * spacing.y;
                        sum[2] += x as f64 * spacing.x;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyMask {
                context: format!("centroid_distance: {name} mask"),
            });
        }
        Ok([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
    };
    let ca = centroid(a, "first")?;
    let cb = centroid(b, "second")?;
    let d2 = (0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum::<f64>();
    Ok(d2.sqrt())
}

/// Exhaustive-pairwise oracle for [`asd`]: same contract, quadratic scan
/// over surface point pairs. Test use only.
pub fn asd_naive(a: &Mask, b: &Mask, spacing: Spacing) -> Result<f64> {
    check_aligned(a, b, "asd_naive")?;
    match pooled_naive(a, b, spacing) {
        Some(mut d) => {
            d.sort_by(|p, q| p.partial_cmp(q).expect("distances are finite"));
            Ok(d.iter().sum::<f64>() / d.len() as f64)
        }
        None => Ok(fallback(a, b, ASD_FALLBACK_MM)),
    }
}

/// Exhaustive-pairwise oracle for [`hd95`]. Test use only.
pub fn hd95_naive(a: &Mask, b: &Mask, spacing: Spacing) -> Result<f64> {
    check_aligned(a, b, "hd95_naive")?;
    match pooled_naive(a, b, spacing) {
        Some(mut d) => {
            d.sort_by(|p, q| p.partial_cmp(q).expect("distances are finite"));
            Ok(d[nearest_rank_95(d.len()) - 1])
        }
        None => Ok(fallback(a, b, HD95_FALLBACK_MM)),
    }
}

fn pooled_naive(a: &Mask, b: &Mask, spacing: Spacing) -> Option<Vec<f64>> {
    let sa = surface(a);
    let sb = surface(b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let mm = |p: &[usize; 3]| {
        [
            p[0] as f64 * spacing.z,
            p[1] as f64 * spacing.y,
            p[2] as f64 * spacing.x,
        ]
    };
    let pa: Vec<[f64; 3]> = sa.iter().map(mm).collect();
    let pb: Vec<[f64; 3]> = sb.iter().map(mm).collect();
    let nearest = |p: &[f64; 3], pts: &[[f64; 3]]| {
        pts.iter()
            .map(|q| {
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut pooled = Vec::with_capacity(pa.len() + pb.len());
    for p in &pa {
        pooled.push(nearest(p, &pb));
    }
    for p in &pb {
        pooled.push(nearest(p, &pa));
    }
    Some(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Mask, Spacing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    fn single(dims: Dims, z: usize, y: usize, x: usize) -> Mask {
        let mut data = vec![0u8; dims.len()];
        data[dims.index(z, y, x)] = 1;
        Mask::new(dims, iso1(), data).unwrap()
    }

    #[test]
    fn dsc_basic_cases() {
        let dims = Dims::new(1, 1, 4);
        let a = Mask::new(dims, iso1(), vec![1, 1, 0, 0]).unwrap();
        let b = Mask::new(dims, iso1(), vec![0, 1, 1, 0]).unwrap();
        assert_eq!(dsc(&a, &a).unwrap(), 100.0);
        assert_eq!(dsc(&a, &b).unwrap(), 50.0);
        let c = Mask::new(dims, iso1(), vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &c).unwrap(), 0.0);
        let e = Mask::zeros(dims, iso1());
        assert_eq!(dsc(&e, &e).unwrap(), 100.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
    }

    #[test]
    fn dsc_rejects_mismatched_grids() {
        let a = Mask::zeros(Dims::new(1, 1, 4), iso1());
        let b = Mask::zeros(Dims::new(1, 1, 5), iso1());
        assert!(matches!(dsc(&a, &b), Err(Error::ShapeError { .. })));
    }

    #[test]
    fn surface_of_solid_block_is_shell() {
        let dims = Dims::new(3, 3, 3);
        let m = Mask::new(dims, iso1(), vec![1; dims.len()]).unwrap();
        let s = surface(&m);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[1, 1, 1]));
        let one = single(dims, 1, 1, 1);
        assert_eq!(surface(&one), vec![[1, 1, 1]]);
        assert!(surface(&Mask::zeros(dims, iso1())).is_empty());
    }

    #[test]
    fn asd_examples_and_fallbacks() {
        let dims = Dims::new(1, 1, 7);
        let a = single(dims, 0, 0, 1);
        let b = single(dims, 0, 0, 4);
        assert_eq!(asd(&a, &b, iso1()).unwrap(), 3.0);
        assert_eq!(asd(&a, &a, iso1()).unwrap(), 0.0);
        let e = Mask::zeros(dims, iso1());
        assert_eq!(asd(&e, &a, iso1()).unwrap(), ASD_FALLBACK_MM);
        assert_eq!(asd(&a, &e, iso1()).unwrap(), ASD_FALLBACK_MM);
        assert_eq!(asd(&e, &e, iso1()).unwrap(), 0.0);
    }

    #[test]
    fn hd95_examples_and_fallbacks() {
        let dims = Dims::new(1, 1, 7);
        let a = single(dims, 0, 0, 1);
        let b = single(dims, 0, 0, 4);
        assert_eq!(hd95(&a, &b, iso1()).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, iso1()).unwrap(), 0.0);
        let e = Mask::zeros(dims, iso1());
        assert_eq!(hd95(&e, &a, iso1()).unwrap(), HD95_FALLBACK_MM);
        assert_eq!(hd95(&e, &e, iso1()).unwrap(), 0.0);
    }

    #[test]
    fn nearest_rank_examples() {
        assert_eq!(nearest_rank_95(1), 1);
        assert_eq!(nearest_rank_95(2), 2);
        assert_eq!(nearest_rank_95(20), 19);
        assert_eq!(nearest_rank_95(100), 95);
        assert_eq!(nearest_rank_95(101), 96);
    }

    #[test]
    fn centroid_distance_examples() {
        let dims = Dims::new(3, 3, 5);
        let a = single(dims, 0, 0, 0);
        let b = single(dims, 0, 0, 4);
        assert_eq!(centroid_distance(&a, &b, iso1()).unwrap(), 4.0);
        assert_eq!(centroid_distance(&a, &a, iso1()).unwrap(), 0.0);
        // Equal shifts of both masks leave the value unchanged.
        let a2 = single(dims, 1, 1, 0);
        let b2 = single(dims, 1, 1, 4);
        assert_eq!(centroid_distance(&a2, &b2, iso1()).unwrap(), 4.0);
        let e = Mask::zeros(dims, iso1());
        assert!(matches!(
            centroid_distance(&a, &e, iso1()),
            Err(Error::EmptyMask { .. })
        ));
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: Dims) -> Mask {
        let p: f64 = rng.random_range(0.1..0.6);
        let data = (0..dims.len())
            .map(|_| u8::from(rng.random::<f64>() < p))
            .collect();
        Mask::new(dims, iso1(), data).unwrap()
    }

    #[test]
    fn fast_and_naive_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let dims = Dims::new(
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let spacing = Spacing::new(
                rng.random_range(0.5..=3.0),
                rng.random_range(0.5..=3.0),
                rng.random_range(0.5..=3.0),
            )
            .unwrap();
            let a = random_mask(&mut rng, dims);
            let b = random_mask(&mut rng, dims);
            let fa = asd(&a, &b, spacing).unwrap();
            let na = asd_naive(&a, &b, spacing).unwrap();
            assert!((fa - na).abs() <= 1e-9, "asd {fa} vs {na}");
            let fh = hd95(&a, &b, spacing).unwrap();
            let nh = hd95_naive(&a, &b, spacing).unwrap();
            assert!((fh - nh).abs() <= 1e-9, "hd95 {fh} vs {nh}");
        }
    }

    #[test]
    fn distance_metrics_are_symmetric_and_hd95_bounds_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let dims = Dims::new(4, 6, 6);
            let a = random_mask(&mut rng, dims);
            let b = random_mask(&mut rng, dims);
            assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            assert_eq!(
                asd(&a, &b, iso1()).unwrap(),
                asd(&b, &a, iso1()).unwrap()
            );
            assert_eq!(
                hd95(&a, &b, iso1()).unwrap(),
                hd95(&b, &a, iso1()).unwrap()
            );
            if let Some(mut d) = pooled_surface_distances(&a, &b, iso1()) {
                d.sort_by(|p, q| p.partial_cmp(q).unwrap());
                let median = d[(d.len() - 1) / 2];
                assert!(hd95(&a, &b, iso1()).unwrap() >= median);
            }
        }
    }
}
