//! Synthetic multi-domain dataset generator.
//!
//! Each case is an "organ" ellipsoid with an embedded "lesion" blob,
//! rendered under a per-domain texture style. Geometry is driven purely
//! by the case seed, so the organ and lesion masks are identical across
//! styles; only intensities change. The three shipped styles differ in
//! value-noise statistics, contrast, bias, and — crucially — the sign of
//! the lesion-vs-organ contrast: domains A and B show dark lesions,
//! domain C bright ones, which is what makes cross-domain generalization
//! measurable at desk scale.
//!
//! Intensities are clamped to [0, 1] and rounded to f32-representable
//! values so that cases survive the f32 file format bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{largest_component, Connectivity, Dims, Mask, Spacing, Volume};
use crate::io::csv::{write_manifest, ManifestEntry};
use crate::io::dsv1;
use crate::sdt::signed_distance_map;

/// Texture amplitude shared by all styles; per-style variation comes from
/// octaves, frequency, contrast, and bias.
const TEX_AMP: f64 = 0.16;

/// Base intensity of background tissue before style modulation.
const BG_LEVEL: f64 = 0.32;
/// Base intensity of organ tissue before style modulation.
const ORGAN_LEVEL: f64 = 0.55;

/// Organ volume fraction bounds relative to the grid.
const ORGAN_FRACTION: (f64, f64) = (0.10, 0.25);
/// Lesion volume fraction bounds relative to the organ.
const LESION_FRACTION: (f64, f64) = (0.02, 0.10);

/// Rejection-sampling attempt limit per case.
const MAX_ATTEMPTS: usize = 20;

/// Rendering style of one acquisition domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    pub name: String,
    /// Value-noise octave count.
    pub octaves: u32,
    /// Base lattice frequency in cycles per voxel.
    pub frequency: f64,
    /// Contrast gain applied around mid-grey.
    pub contrast: f64,
    /// Additive intensity bias.
    pub bias: f64,
    /// Lesion intensity minus organ intensity (sign encodes polarity).
    pub lesion_delta: f64,
    /// Standard deviation of per-voxel additive Gaussian noise.
    pub noise_sigma: f64,
}

impl DomainStyle {
    pub fn domain_a() -> Self {
        DomainStyle {
            name: "A".into(),
            octaves: 3,
            frequency: 0.09,
            contrast: 1.0,
            bias: 0.0,
            lesion_delta: -0.22,
            noise_sigma: 0.012,
        }
    }

    pub fn domain_b() -> Self {
        DomainStyle {
            name: "B".into(),
            octaves: 2,
            frequency: 0.05,
            contrast: 0.92,
            bias: 0.03,
            lesion_delta: -0.15,
            noise_sigma: 0.018,
        }
    }

    /// Domain C flips the lesion contrast polarity relative to A and B.
    pub fn domain_c() -> Self {
        DomainStyle {
            name: "C".into(),
            octaves: 4,
            frequency: 0.14,
            contrast: 1.05,
            bias: 0.05,
            lesion_delta: 0.20,
            noise_sigma: 0.015,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "A" => Ok(Self::domain_a()),
            "B" => Ok(Self::domain_b()),
            "C" => Ok(Self::domain_c()),
            other => Err(Error::ConfigError(format!("unknown domain style {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("frequency", self.frequency),
            ("contrast", self.contrast),
            ("bias", self.bias),
            ("lesion_delta", self.lesion_delta),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() {
                return Err(Error::ConfigError(format!("style {}.{k} not finite", self.name)));
            }
        }
        if self.octaves == 0 || self.frequency <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::ConfigError(format!(
                "style {} has degenerate noise parameters",
                self.name
            )));
        }
        Ok(())
    }
}

/// One generated case: image plus organ and lesion ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub volume: Volume,
    pub organ: Mask,
    pub lesion: Mask,
    pub domain: String,
    pub seed: u64,
}

/// 64-bit FNV-1a over a byte string; used to derive per-style texture
/// seeds that are stable across runs and platforms.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates derived seeds and lattice hashes.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a lattice point of a given octave to a value in [-1, 1].
fn lattice_value(stream: u64, octave: u32, iz: i64, iy: i64, ix: i64) -> f64 {
    let mut h = stream ^ splitmix64(octave as u64);
    h = splitmix64(h ^ (iz as u64));
    h = splitmix64(h ^ (iy as u64).rotate_left(21));
    h = splitmix64(h ^ (ix as u64).rotate_left(42));
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * unit - 1.0
}

/// Multi-octave trilinear value noise in [-1, 1], evaluated at a voxel.
fn value_noise(stream: u64, octaves: u32, frequency: f64, z: f64, y: f64, x: f64) -> f64 {
    let mut total = 0.0;
    let mut amp_sum = 0.0;
    for o in 0..octaves {
        let amp = 0.5f64.powi(o as i32);
        let f = frequency * 2.0f64.powi(o as i32);
        let (pz, py, px) = (z * f, y * f, x * f);
        let (iz, iy, ix) = (pz.floor(), py.floor(), px.floor());
        let (fz, fy, fx) = (pz - iz, py - iy, px - ix);
        let (iz, iy, ix) = (iz as i64, iy as i64, ix as i64);
        let corner = |dz: i64, dy: i64, dx: i64| {
            lattice_value(stream, o, iz + dz, iy + dy, ix + dx)
        };
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let v00 = lerp(corner(0, 0, 0), corner(0, 0, 1), fx);
        let v01 = lerp(corner(0, 1, 0), corner(0, 1, 1), fx);
        let v10 = lerp(corner(1, 0, 0), corner(1, 0, 1), fx);
        let v11 = lerp(corner(1, 1, 0), corner(1, 1, 1), fx);
        let v0 = lerp(v00, v01, fy);
        let v1 = lerp(v10, v11, fy);
        total += amp * lerp(v0, v1, fz);
        amp_sum += amp;
    }
    total / amp_sum
}

/// Draw the organ ellipsoid. Per-axis semi-extent fractions are chosen so
/// the analytic volume fraction lands inside [`ORGAN_FRACTION`].
fn draw_organ(rng: &mut ChaCha8Rng, dims: Dims, spacing: Spacing) -> Mask {
    // (4/3)*pi*u^3 spans [0.102, 0.249] for u in [0.29, 0.39].
    let u = [
        rng.random_range(0.29..=0.39),
        rng.random_range(0.29..=0.39),
        rng.random_range(0.29..=0.39),
    ];
    let d = dims.as_array();
    let semi: Vec<f64> = (0..3).map(|a| u[a] * d[a] as f64).collect();
    let center: Vec<f64> = (0..3)
        .map(|a| {
            let lo = semi[a] + 1.0;
            let hi = d[a] as f64 - 2.0 - semi[a];
            rng.random_range(lo..=hi.max(lo))
        })
        .collect();
    let mut data = vec![0u8; dims.len()];
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let q = [z as f64, y as f64, x as f64];
                let r: f64 = (0..3)
                    .map(|a| ((q[a] - center[a]) / semi[a]).powi(2))
                    .sum();
                if r <= 1.0 {
                    data[dims.index(z, y, x)] = 1;
                }
            }
        }
    }
    Mask::new(dims, spacing, data).expect("binary by construction")
}

/// Draw the lesion blob inside the organ: a noise-modulated sphere around
/// a center drawn uniformly from the organ's deep interior. Returns
/// `None` when this attempt produced degenerate geometry.
fn draw_lesion(rng: &mut ChaCha8Rng, organ: &Mask, seed: u64) -> Option<Mask> {
    let dims = organ.dims();
    let organ_vox = organ.count_fg();
    let frac = rng.random_range(0.03..=0.085);
    let r = (3.0 * frac * organ_vox as f64 / (4.0 * std::f64::consts::PI)).cbrt();

    // Interior depth in voxel units (unit spacing on purpose: the blob
    // radius is in voxels too).
    let depth = signed_distance_map(
        &Mask::new(dims, Spacing::isotropic(1.0).unwrap(), organ.data().to_vec()).unwrap(),
        1e6,
    )
    .expect("cap valid");
    let need = 1.45 * r + 1.0;
    let eligible: Vec<usize> = depth
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| -v >= need)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let center_idx = eligible[rng.random_range(0..eligible.len())];
    let (cz, cy, cx) = dims.coords(center_idx);
    let (cz, cy, cx) = (cz as f64, cy as f64, cx as f64);

    // Surface modulation from a geometry-stream noise field.
    let stream = splitmix64(seed ^ fnv1a64(b"lesion-shape"));
    let freq = 0.9 / r;
    let reach = (1.35 * r).ceil() as isize;
    let mut data = vec![0u8; dims.len()];
    let mut count = 0usize;
    for z in ((cz as isize - reach).max(0))..=((cz as isize + reach).min(dims.z as isize - 1)) {
        for y in ((cy as isize - reach).max(0))..=((cy as isize + reach).min(dims.y as isize - 1))
        {
            for x in
                ((cx as isize - reach).max(0))..=((cx as isize + reach).min(dims.x as isize - 1))
            {
                let (fz, fy, fx) = (z as f64, y as f64, x as f64);
                let dist = ((fz - cz).powi(2) + (fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                let n = value_noise(stream, 2, freq, fz, fy, fx);
                let radius = r * (1.0 + 0.35 * n);
                if dist <= radius {
                    data[dims.index(z as usize, y as usize, x as usize)] = 1;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return None;
    }
    let lesion = Mask::new(dims, organ.spacing(), data).expect("binary");

    // Containment, connectivity, and size checks; any failure rejects
    // the attempt.
    for (l, o) in lesion.data().iter().zip(organ.data()) {
        if *l == 1 && *o == 0 {
            return None;
        }
    }
    if largest_component(&lesion, Connectivity::TwentySix) != lesion {
        return None;
    }
    let f = count as f64 / organ_vox as f64;
    if !(LESION_FRACTION.0..=LESION_FRACTION.1).contains(&f) {
        return None;
    }
    Some(lesion)
}

/// Generate one case. Deterministic per (style, seed); masks depend only
/// on the seed, never the style.
pub fn gen_case(style: &DomainStyle, seed: u64, dims: Dims, spacing: Spacing) -> Result<PhantomCase> {
    style.validate()?;
    for (axis, n) in [("z", dims.z), ("y", dims.y), ("x", dims.x)] {
        if n < 32 {
            return Err(Error::ConfigError(format!(
                "phantom dims.{axis} = {n} below the minimum of 32"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found = None;
    for _attempt in 0..MAX_ATTEMPTS {
        let organ = draw_organ(&mut rng, dims, spacing);
        let frac = organ.count_fg() as f64 / dims.len() as f64;
        if !(ORGAN_FRACTION.0..=ORGAN_FRACTION.1).contains(&frac) {
            continue;
        }
        if let Some(lesion) = draw_lesion(&mut rng, &organ, seed) {
            found = Some((organ, lesion));
            break;
        }
    }
    let (organ, lesion) = found.ok_or(Error::GenerationFailed {
        attempts: MAX_ATTEMPTS,
        reason: "no admissible organ/lesion geometry".into(),
    })?;

    // Texture: a per-style hashed lattice field plus sequential Gaussian
    // noise from a style-and-seed derived stream.
    let tex_stream = splitmix64(seed) ^ fnv1a64(style.name.as_bytes());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(splitmix64(tex_stream));
    let normal = Normal::new(0.0, style.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite");
    let mut data = Vec::with_capacity(dims.len());
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let i = dims.index(z, y, x);
                let base = if lesion.data()[i] == 1 {
                    ORGAN_LEVEL + style.lesion_delta
                } else if organ.data()[i] == 1 {
                    ORGAN_LEVEL
                } else {
                    BG_LEVEL
                };
                let tex = value_noise(
                    tex_stream,
                    style.octaves,
                    style.frequency,
                    z as f64,
                    y as f64,
                    x as f64,
                );
                let mut v = 0.5
                    + style.bias
                    + style.contrast * (base + TEX_AMP * tex - 0.5);
                if style.noise_sigma > 0.0 {
                    v += normal.sample(&mut noise_rng);
                }
                // Quantize to f32 so disk round trips are bit-exact.
                data.push(f64::from(v.clamp(0.0, 1.0) as f32));
            }
        }
    }
    let volume = Volume::new(dims, spacing, data)?;
    Ok(PhantomCase {
        volume,
        organ,
        lesion,
        domain: style.name.clone(),
        seed,
    })
}

/// Generate `counts[i]` cases of `styles[i]` and write them with a
/// manifest into `out_dir`. Per-case seeds are derived from `seed` and
/// the case's position, so regeneration is byte-identical.
pub fn gen_dataset(
    styles: &[DomainStyle],
    counts: &[usize],
    seed: u64,
    dims: Dims,
    spacing: Spacing,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    if styles.len() != counts.len() {
        return Err(Error::ConfigError(format!(
            "{} styles but {} counts",
            styles.len(),
            counts.len()
        )));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (style, &count) in styles.iter().zip(counts) {
        for i in 0..count {
            let case_seed = splitmix64(
                seed ^ fnv1a64(style.name.as_bytes()).rotate_left(17) ^ (i as u64),
            );
            let case = gen_case(style, case_seed, dims, spacing)?;
            let case_id = format!("{}_{i:03}", style.name);
            let volume_path = format!("{case_id}_vol.dsv1");
            let organ_path = format!("{case_id}_organ.dsv1");
            let lesion_path = format!("{case_id}_lesion.dsv1");
            dsv1::write_volume(&case.volume, &out_dir.join(&volume_path))?;
            dsv1::write_mask(&case.organ, &out_dir.join(&organ_path))?;
            dsv1::write_mask(&case.lesion, &out_dir.join(&lesion_path))?;
            entries.push(ManifestEntry {
                case_id,
                domain: style.name.clone(),
                volume_path,
                organ_path,
                lesion_path,
            });
        }
    }
    write_manifest(&entries, &out_dir.join("manifest.csv"))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn desk_dims() -> Dims {
        Dims::new(32, 64, 64)
    }

    fn iso1() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    #[test]
    fn case_is_deterministic() {
        let s = DomainStyle::domain_a();
        let a = gen_case(&s, 11, desk_dims(), iso1()).unwrap();
        let b = gen_case(&s, 11, desk_dims(), iso1()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn geometry_invariants_hold_across_seeds() {
        let s = DomainStyle::domain_b();
        for seed in 0..12u64 {
            let c = gen_case(&s, seed, desk_dims(), iso1()).unwrap();
            let organ_frac = c.organ.count_fg() as f64 / desk_dims().len() as f64;
            assert!(
                (ORGAN_FRACTION.0..=ORGAN_FRACTION.1).contains(&organ_frac),
                "organ fraction {organ_frac} seed {seed}"
            );
            let lesion_frac = c.lesion.count_fg() as f64 / c.organ.count_fg() as f64;
            assert!(
                (LESION_FRACTION.0..=LESION_FRACTION.1).contains(&lesion_frac),
                "lesion fraction {lesion_frac} seed {seed}"
            );
            // Containment.
            for (l, o) in c.lesion.data().iter().zip(c.organ.data()) {
                assert!(*l == 0 || *o == 1);
            }
            // Intensity range.
            let (lo, hi) = c.volume.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn masks_are_style_invariant_but_textures_shift() {
        let a = gen_case(&DomainStyle::domain_a(), 21, desk_dims(), iso1()).unwrap();
        let c = gen_case(&DomainStyle::domain_c(), 21, desk_dims(), iso1()).unwrap();
        assert_eq!(a.organ, c.organ);
        assert_eq!(a.lesion, c.lesion);
        let moved = a
            .volume
            .data()
            .iter()
            .zip(c.volume.data())
            .filter(|(p, q)| (*p - *q).abs() > 0.05)
            .count();
        let frac = moved as f64 / a.volume.data().len() as f64;
        assert!(frac >= 0.30, "only {frac:.3} of voxels shifted > 0.05");
    }

    #[test]
    fn lesion_polarity_differs_between_a_and_c() {
        let a = gen_case(&DomainStyle::domain_a(), 33, desk_dims(), iso1()).unwrap();
        let c = gen_case(&DomainStyle::domain_c(), 33, desk_dims(), iso1()).unwrap();
        let mean_in = |case: &PhantomCase, m: &Mask, inside: bool| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (i, v) in case.volume.data().iter().enumerate() {
                let in_lesion = case.lesion.data()[i] == 1;
                let in_organ = m.data()[i] == 1;
                if inside && in_lesion {
                    sum += v;
                    n += 1;
                } else if !inside && in_organ && !in_lesion {
                    sum += v;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let a_lesion = mean_in(&a, &a.organ, true);
        let a_organ = mean_in(&a, &a.organ, false);
        let c_lesion = mean_in(&c, &c.organ, true);
        let c_organ = mean_in(&c, &c.organ, false);
        assert!(a_lesion < a_organ, "domain A lesions should be dark");
        assert!(c_lesion > c_organ, "domain C lesions should be bright");
    }

    #[test]
    fn small_dims_rejected() {
        let s = DomainStyle::domain_a();
        let r = gen_case(&s, 1, Dims::new(16, 64, 64), iso1());
        assert!(matches!(r, Err(Error::ConfigError(_))));
    }

    #[test]
    fn dataset_writes_counts_and_roundtrips() {
        let dir = TempDir::new().unwrap();
        let styles = [DomainStyle::domain_a(), DomainStyle::domain_c()];
        let entries = gen_dataset(&styles, &[2, 1], 5, desk_dims(), iso1(), dir.path()).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries.iter().filter(|e| e.domain == "A").count(), 2);
        assert_eq!(entries.iter().filter(|e| e.domain == "C").count(), 1);
        let back = crate::io::csv::read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, entries);
        // Files exist and parse.
        for e in &back {
            let vp = ManifestEntry::resolve(dir.path(), &e.volume_path);
            let v = dsv1::read_volume(&vp).unwrap();
            assert_eq!(v.dims(), desk_dims());
            let om = dsv1::read_mask(&ManifestEntry::resolve(dir.path(), &e.organ_path)).unwrap();
            assert!(om.count_fg() > 0);
        }
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let styles = [DomainStyle::domain_a()];
        gen_dataset(&styles, &[1], 9, desk_dims(), iso1(), d1.path()).unwrap();
        gen_dataset(&styles, &[1], 9, desk_dims(), iso1(), d2.path()).unwrap();
        for name in ["A_000_vol.dsv1", "A_000_organ.dsv1", "A_000_lesion.dsv1"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn volume_survives_file_roundtrip_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let case = gen_case(&DomainStyle::domain_a(), 2, desk_dims(), iso1()).unwrap();
        let p = dir.path().join("v.dsv1");
        dsv1::write_volume(&case.volume, &p).unwrap();
        assert_eq!(dsv1::read_volume(&p).unwrap(), case.volume);
    }
}
