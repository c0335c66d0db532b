//! Synthetic short-axis slices with analytically known motion, strain and TOS.
//!
//! The left-ventricular wall is an annulus. Every sector shortens
//! circumferentially from its onset frame on, ramping linearly over
//! [`RAMP_FRAMES`] DENSE frames to a stretch deficit of `peak_contraction`.
//! Sector deficits are blended over angle with a periodic Gaussian kernel and
//! realised as
//!
//! ```text
//! (r, α) ↦ (s·r, ψ(α)),   s = mean_α λ(α),   ψ'(α) = λ(α) / s
//! ```
//!
//! where `λ = 1 − deficit` is the circumferential stretch. The ring contracts
//! radially toward its centre by the common factor `s` and material slides
//! tangentially so that the circumferential stretch at angle `α` is exactly
//! `λ(α)`. With uniform onsets this reduces to the radial scaling
//! `x ↦ c + (1 − ε)(x − c)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::strain::{
    build_partition, build_strain_matrix, display_angle, wrap_angle, DisplacementField, Image,
    ImageSequence, Modality, MyocardiumMask, SectorPartition, StrainMatrix, TosCurve,
};

/// Frames from onset to full contraction.
/// Narrowest onset step that survives the angular blending exactly.
pub const MIN_STEP_SECTORS: usize = 5;

pub const RAMP_FRAMES: f64 = 5.0;
/// Blending kernel full width at half maximum, in sector widths.
pub const BLEND_FWHM_SECTORS: f64 = 3.0;
/// Insertion point angles (degrees, counter-clockwise as displayed).
pub const INSERTION_ANGLES_DEG: [f64; 2] = [150.0, 210.0];

const ANGLE_TABLE: usize = 8192;
const TAPER_START: f64 = 2.0;
const TAPER_WIDTH: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_size: usize,
    pub n_sectors: usize,
    pub t_cine: usize,
    pub t_dense: usize,
    pub cine_dt_ms: f64,
    pub dense_dt_ms: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub peak_contraction: f64,
    /// Per-sector onset frame (1-based, DENSE time base).
    pub tos_pattern: Vec<u32>,
    pub texture_seed: u64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_size: 64,
            n_sectors: 128,
            t_cine: 40,
            t_dense: 20,
            cine_dt_ms: 40.0,
            dense_dt_ms: 17.0,
            inner_radius: 12.0,
            outer_radius: 22.0,
            peak_contraction: 0.2,
            tos_pattern: vec![1; 128],
            texture_seed: 0,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let half = self.grid_size as f64 / 2.0;
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius && self.outer_radius < half) {
            return Err(Error::invalid(format!(
                "radii must satisfy 0 < inner ({}) < outer ({}) < grid_size/2 ({half})",
                self.inner_radius, self.outer_radius
            )));
        }
        if !(0.0..0.3).contains(&self.peak_contraction) {
            return Err(Error::invalid(format!(
                "peak_contraction {} outside [0, 0.3)",
                self.peak_contraction
            )));
        }
        if self.n_sectors < 4 {
            return Err(Error::invalid("n_sectors must be at least 4"));
        }
        if self.tos_pattern.len() != self.n_sectors {
            return Err(Error::invalid(format!(
                "tos_pattern has {} entries, expected n_sectors = {}",
                self.tos_pattern.len(),
                self.n_sectors
            )));
        }
        if self.t_dense < 3 || self.t_cine < 2 {
            return Err(Error::invalid("need t_dense ≥ 3 and t_cine ≥ 2"));
        }
        let last = self.t_dense as u32 - 2;
        if let Some((n, &o)) = self.tos_pattern.iter().enumerate().find(|(_, &o)| o < 1 || o > last) {
            return Err(Error::invalid(format!(
                "tos_pattern[{n}] = {o} outside 1..={last} (onset must leave two frames of shortening)"
            )));
        }
        if !(self.cine_dt_ms > 0.0 && self.dense_dt_ms > 0.0) {
            return Err(Error::invalid("frame intervals must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn centre(&self) -> [f64; 2] {
        let c = (self.grid_size as f64 - 1.0) / 2.0;
        [c, c]
    }

    pub fn gt_tos(&self) -> TosCurve {
        TosCurve::new(self.tos_pattern.iter().map(|&o| self.dense_dt_ms * o as f64).collect())
    }
}

/// One synthetic slice with all of its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub cine: ImageSequence,
    pub dense: ImageSequence,
    pub gt_displacements_dense: Vec<DisplacementField>,
    pub gt_strain: StrainMatrix,
    pub gt_tos: TosCurve,
    pub myocardium: MyocardiumMask,
}

impl PhantomCase {
    pub fn partition(&self) -> Result<SectorPartition> {
        build_partition(&self.myocardium, self.spec.n_sectors)
    }
}

/// Frame-1 myocardium mask with insertion points on the epicardial boundary.
pub fn myocardium_mask(spec: &PhantomSpec) -> MyocardiumMask {
    let g = spec.grid_size;
    let c = spec.centre();
    let mask: Vec<bool> = (0..g * g)
        .map(|i| {
            let (dx, dy) = ((i % g) as f64 - c[0], (i / g) as f64 - c[1]);
            let r = (dx * dx + dy * dy).sqrt();
            r >= spec.inner_radius && r <= spec.outer_radius
        })
        .collect();
    let mut m = MyocardiumMask {
        h: g,
        w: g,
        centroid: MyocardiumMask::pixel_centroid(&mask, g),
        mask,
        insertion_points: [[0.0; 2]; 2],
    };
    for (k, deg) in INSERTION_ANGLES_DEG.iter().enumerate() {
        let target = deg.to_radians();
        let mut best = (f64::INFINITY, [0.0; 2]);
        for r in 0..g {
            for col in 0..g {
                if !m.is_boundary(r, col) {
                    continue;
                }
                let p = [col as f64, r as f64];
                let rad = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                if rad < 0.5 * (spec.inner_radius + spec.outer_radius) {
                    continue;
                }
                let d = wrap_angle(display_angle(p, m.centroid) - target);
                let d = d.min(2.0 * PI - d);
                if d < best.0 {
                    best = (d, p);
                }
            }
        }
        m.insertion_points[k] = best.1;
    }
    m
}

#[inline]
fn ramp(s: f64) -> f64 {
    (s / RAMP_FRAMES).clamp(0.0, 1.0)
}

/// Angular motion profile at one instant.
struct RingMotion {
    scale: f64,
    /// ψ(α) − α sampled on `ANGLE_TABLE` points over `[0, 2π)` starting at angle 0.
    slide: Vec<f64>,
}

impl RingMotion {
    fn at(spec: &PhantomSpec, reference_angle: f64, tau: f64) -> Option<Self> {
        let n = spec.n_sectors;
        let deficits: Vec<f64> = spec
            .tos_pattern
            .iter()
            .map(|&o| spec.peak_contraction * ramp(tau - o as f64))
            .collect();
        if deficits.iter().all(|&d| d == 0.0) {
            return None;
        }
        let width = 2.0 * PI / n as f64;
        let sigma = BLEND_FWHM_SECTORS / (8.0 * 2f64.ln()).sqrt() * width;
        let reach = (4.0 * sigma / width).ceil() as i64;
        let stretch: Vec<f64> = (0..ANGLE_TABLE)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / ANGLE_TABLE as f64;
                // sector coordinate of this angle
                let pos = wrap_angle(a - reference_angle) / width;
                let nearest = pos.round() as i64;
                let (mut num, mut den) = (0.0, 0.0);
                for m in nearest - reach..=nearest + reach {
                    let d = (pos - m as f64) * width;
                    let k = (-0.5 * (d / sigma).powi(2)).exp();
                    num += k * deficits[m.rem_euclid(n as i64) as usize];
                    den += k;
                }
                1.0 - num / den
            })
            .collect();
        let scale = stretch.iter().sum::<f64>() / ANGLE_TABLE as f64;
        // cumulative trapezoid of (λ/s − 1)
        let h = 2.0 * PI / ANGLE_TABLE as f64;
        let mut slide = Vec::with_capacity(ANGLE_TABLE);
        let mut acc = 0.0;
        for j in 0..ANGLE_TABLE {
            slide.push(acc);
            let next = stretch[(j + 1) % ANGLE_TABLE];
            acc += 0.5 * h * ((stretch[j] + next) / scale - 2.0);
        }
        let mean = slide.iter().sum::<f64>() / ANGLE_TABLE as f64;
        for v in &mut slide {
            *v -= mean;
        }
        Some(RingMotion { scale, slide })
    }

    fn slide_at(&self, a: f64) -> f64 {
        let pos = wrap_angle(a) / (2.0 * PI) * ANGLE_TABLE as f64;
        let j = pos.floor() as usize % ANGLE_TABLE;
        let f = pos - pos.floor();
        let next = if j + 1 == ANGLE_TABLE {
            // the slide is periodic up to round-off
            self.slide[0]
        } else {
            self.slide[j + 1]
        };
        self.slide[j] * (1.0 - f) + next * f
    }

    fn displacement(&self, spec: &PhantomSpec, x: f64, y: f64) -> [f64; 2] {
        let c = spec.centre();
        let (dx, dy) = (x - c[0], y - c[1]);
        let r = (dx * dx + dy * dy).sqrt();
        if r == 0.0 {
            return [0.0, 0.0];
        }
        let a = (-dy).atan2(dx);
        let psi = a + self.slide_at(a);
        let rho = self.scale * r;
        let u = [rho * psi.cos() - dx, -rho * psi.sin() - dy];
        let edge = spec.outer_radius + TAPER_START;
        let weight = if r <= edge {
            1.0
        } else if r >= edge + TAPER_WIDTH {
            0.0
        } else {
            0.5 * (1.0 + (PI * (r - edge) / TAPER_WIDTH).cos())
        };
        [weight * u[0], weight * u[1]]
    }
}

/// Lagrangian displacement at a continuous DENSE-frame time `tau` (frame 1 is `tau = 1`).
fn motion_at_time(spec: &PhantomSpec, mask: &MyocardiumMask, tau: f64) -> DisplacementField {
    let g = spec.grid_size;
    match RingMotion::at(spec, mask.reference_angle(), tau) {
        None => DisplacementField::zeros(g, g),
        Some(m) => DisplacementField::from_fn(g, g, |x, y| m.displacement(spec, x, y)),
    }
}

/// Analytic Lagrangian displacement of DENSE frame `dense_frame` (1-based).
pub fn motion_at(spec: &PhantomSpec, dense_frame: usize) -> Result<DisplacementField> {
    spec.validate()?;
    if dense_frame < 1 || dense_frame > spec.t_dense {
        return Err(Error::invalid(format!(
            "frame {dense_frame} outside 1..={}",
            spec.t_dense
        )));
    }
    Ok(motion_at_time(spec, &myocardium_mask(spec), dense_frame as f64))
}

/// Band-limited reference-frame intensity pattern.
struct Texture {
    centre: [f64; 2],
    inner: f64,
    outer: f64,
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn new(spec: &PhantomSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let waves = (0..48)
            .map(|_| {
                let wavelength: f64 = rng.gen_range(4.0..12.0);
                let dir: f64 = rng.gen_range(0.0..2.0 * PI);
                let k = 2.0 * PI / wavelength;
                (k * dir.cos(), k * dir.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Texture {
            centre: spec.centre(),
            inner: spec.inner_radius,
            outer: spec.outer_radius,
            waves,
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let norm = (2.0 / self.waves.len() as f64).sqrt();
        let noise: f64 = self.waves.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).cos()).sum::<f64>() * norm;
        let r = ((x - self.centre[0]).powi(2) + (y - self.centre[1]).powi(2)).sqrt();
        let soft = |d: f64| 0.5 * (1.0 + (d / 0.8).tanh());
        let band = soft(r - self.inner) * soft(self.outer - r);
        (0.2 + 0.45 * band + (0.06 + 0.1 * band) * noise).clamp(0.0, 1.0)
    }
}

fn render(texture: &Texture, field: &DisplacementField, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (field.h, field.w);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let zero = field.is_zero();
    Image::from_fn(h, w, |r, c| {
        let (yx, yy) = (c as f64, r as f64);
        // invert φ by fixed-point iteration: x = y − u(x)
        let (mut px, mut py) = (yx, yy);
        if !zero {
            for _ in 0..40 {
                let (ux, uy) = sample_field(field, px, py);
                px = yx - ux;
                py = yy - uy;
            }
        }
        let v = texture.eval(px, py);
        let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
        (v + n).clamp(0.0, 1.0)
    })
}

fn sample_field(f: &DisplacementField, x: f64, y: f64) -> (f64, f64) {
    use crate::strain::bilinear_sample;
    (
        bilinear_sample(&f.ux, f.h, f.w, x, y).0,
        bilinear_sample(&f.uy, f.h, f.w, x, y).0,
    )
}

/// Generates a full case. Identical `(spec, seed)` give bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let mask = myocardium_mask(spec);
    let partition = build_partition(&mask, spec.n_sectors)?;
    let texture = Texture::new(spec);

    let dense_fields: Vec<DisplacementField> = (1..=spec.t_dense)
        .map(|t| motion_at_time(spec, &mask, t as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense_frames = dense_fields
        .iter()
        .map(|f| render(&texture, f, spec.noise_sigma, &mut rng))
        .collect();
    let cine_frames = (0..spec.t_cine)
        .map(|j| {
            let tau = 1.0 + j as f64 * spec.cine_dt_ms / spec.dense_dt_ms;
            render(&texture, &motion_at_time(spec, &mask, tau), spec.noise_sigma, &mut rng)
        })
        .collect();

    let gt_strain = build_strain_matrix(&dense_fields, &mask, &partition, spec.dense_dt_ms)?;
    Ok(PhantomCase {
        spec: spec.clone(),
        seed,
        cine: ImageSequence::new(cine_frames, spec.cine_dt_ms, Modality::Cine)?,
        dense: ImageSequence::new(dense_frames, spec.dense_dt_ms, Modality::Dense)?,
        gt_displacements_dense: dense_fields,
        gt_strain,
        gt_tos: spec.gt_tos(),
        myocardium: mask,
    })
}

/// Random late-activation pattern: a region of onsets rising in one-frame
/// steps to a plateau and falling back, each step held for several sectors.
/// Some draws are entirely normal (all onsets at frame 1).
pub fn random_tos_pattern(n_sectors: usize, t_dense: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut pattern = vec![1u32; n_sectors];
    if rng.gen_bool(0.15) || n_sectors < MIN_STEP_SECTORS {
        return pattern;
    }
    let max_level = (t_dense as u32).saturating_sub(3).min(6).max(1);
    let top = rng.gen_range(1..=max_level) as usize;
    let scale = n_sectors as f64 / 128.0;
    let width = |rng: &mut dyn rand::RngCore, lo: i32, hi: i32| {
        ((rng.gen_range(lo..=hi) as f64 * scale).round() as usize).max(MIN_STEP_SECTORS)
    };
    let mut up: Vec<usize> = (1..top).map(|_| width(rng, 5, 8)).collect();
    let mut plateau = width(rng, 6, 24);
    let mut down: Vec<usize> = (1..top).map(|_| width(rng, 5, 8)).collect();
    // small rings: lower the plateau one level at a time until the region
    // fits with a normal stretch at least one step wide left over
    let room = n_sectors.saturating_sub(MIN_STEP_SECTORS);
    while plateau + up.iter().sum::<usize>() + down.iter().sum::<usize>() > room {
        if !up.is_empty() {
            up.pop();
            down.remove(0);
        } else if room >= MIN_STEP_SECTORS {
            plateau = room;
        } else {
            return pattern;
        }
    }
    let start = rng.gen_range(0..n_sectors);
    let levels = up.len();
    let widths = up
        .iter()
        .enumerate()
        .map(|(i, &w)| (i + 1, w))
        .chain([(levels + 1, plateau)])
        .chain(down.iter().enumerate().map(|(i, &w)| (levels - i, w)));
    let mut pos = start;
    for (level, w) in widths {
        for _ in 0..w {
            pattern[pos % n_sectors] = 1 + level as u32;
            pos += 1;
        }
    }
    pattern
}

pub fn random_spec(base: &PhantomSpec, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A77_E2A1_0001);
    PhantomSpec {
        tos_pattern: random_tos_pattern(base.n_sectors, base.t_dense, &mut rng),
        texture_seed: seed,
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strain::{extract_tos, DEFAULT_ONSET_THRESHOLD};
    use approx::assert_abs_diff_eq;

    fn small() -> PhantomSpec {
        PhantomSpec {
            grid_size: 32,
            n_sectors: 16,
            t_cine: 8,
            t_dense: 10,
            inner_radius: 6.0,
            outer_radius: 11.0,
            tos_pattern: vec![1; 16],
            ..Default::default()
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let ok = small();
        assert!(ok.validate().is_ok());
        for bad in [
            PhantomSpec { inner_radius: 12.0, ..ok.clone() },
            PhantomSpec { outer_radius: 16.0, ..ok.clone() },
            PhantomSpec { peak_contraction: 0.3, ..ok.clone() },
            PhantomSpec { tos_pattern: vec![1; 15], ..ok.clone() },
            PhantomSpec { tos_pattern: vec![0; 16], ..ok.clone() },
            PhantomSpec { tos_pattern: vec![9; 16], ..ok.clone() },
        ] {
            let err = generate_phantom(&bad, 0).unwrap_err();
            assert!(matches!(err, Error::Invalid(_)), "{err}");
        }
    }

    #[test]
    fn first_frame_onset_gives_17ms() {
        let case = generate_phantom(&PhantomSpec { noise_sigma: 0.0, ..small() }, 3).unwrap();
        assert!(case.gt_tos.values.iter().all(|&v| v == 17.0));
        assert_eq!(extract_tos(&case.gt_strain, DEFAULT_ONSET_THRESHOLD), case.gt_tos);
    }

    #[test]
    fn zero_contraction_is_static() {
        let spec = PhantomSpec {
            peak_contraction: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let case = generate_phantom(&spec, 1).unwrap();
        assert!(case.gt_displacements_dense.iter().all(|f| f.is_zero()));
        assert!(case.gt_strain.values.iter().all(|&v| v == 0.0));
        for f in case.cine.frames.iter().chain(&case.dense.frames) {
            assert_eq!(f, &case.dense.frames[0]);
        }
    }

    #[test]
    fn half_and_half_pattern_tos() {
        let spec = PhantomSpec {
            tos_pattern: (0..128).map(|n| if n < 64 { 1 } else { 6 }).collect(),
            ..Default::default()
        };
        let tos = spec.gt_tos();
        assert!(tos.values[..64].iter().all(|&v| v == 17.0));
        assert!(tos.values[64..].iter().all(|&v| v == 102.0));
    }

    #[test]
    fn motion_is_zero_at_reference_frame_and_without_contraction() {
        let spec = PhantomSpec {
            tos_pattern: (0..16).map(|n| 1 + (n % 3) as u32).collect(),
            ..small()
        };
        assert!(motion_at(&spec, 1).unwrap().is_zero());
        let still = PhantomSpec { peak_contraction: 0.0, ..spec.clone() };
        for t in 1..=10 {
            assert!(motion_at(&still, t).unwrap().is_zero());
        }
        assert!(motion_at(&spec, 0).is_err());
        assert!(motion_at(&spec, 11).is_err());
    }

    #[test]
    fn uniform_onset_is_radial_scaling() {
        let spec = PhantomSpec { tos_pattern: vec![2; 128], ..Default::default() };
        let eps = spec.peak_contraction;
        let field = motion_at(&spec, 12).unwrap();
        let c = spec.centre();
        for r in 0..64 {
            for col in 0..64 {
                let (dx, dy) = (col as f64 - c[0], r as f64 - c[1]);
                if (dx * dx + dy * dy).sqrt() > spec.outer_radius + 1.0 {
                    continue;
                }
                let i = r * 64 + col;
                assert_abs_diff_eq!(field.ux[i], -eps * dx, epsilon = 1e-9);
                assert_abs_diff_eq!(field.uy[i], -eps * dy, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec {
            tos_pattern: (0..16).map(|n| 1 + (n / 5) as u32).collect(),
            ..small()
        };
        assert_eq!(generate_phantom(&spec, 9).unwrap(), generate_phantom(&spec, 9).unwrap());
        assert_ne!(
            generate_phantom(&spec, 9).unwrap().dense,
            generate_phantom(&spec, 10).unwrap().dense
        );
    }

    #[test]
    fn mask_landmarks_are_on_the_boundary() {
        let spec = PhantomSpec::default();
        let m = myocardium_mask(&spec);
        for p in m.insertion_points {
            assert!(m.is_boundary(p[1] as usize, p[0] as usize));
        }
        assert_abs_diff_eq!(wrap_angle(m.reference_angle()), PI, epsilon = 0.05);
    }

    #[test]
    fn strain_stays_quiet_before_onset() {
        let spec = PhantomSpec {
            tos_pattern: (0..128)
                .map(|n| match n {
                    46..=73 => 3,
                    40..=79 => 2,
                    _ => 1,
                })
                .collect(),
            noise_sigma: 0.0,
            ..Default::default()
        };
        let case = generate_phantom(&spec, 0).unwrap();
        // sectors far from the transitions stay near zero before their onset
        // (exactly zero in the continuum; finite differences leave a residue)
        for n in 50..70 {
            for t in 0..3 {
                assert_abs_diff_eq!(case.gt_strain.get(n, t), 0.0, epsilon = 1e-3);
            }
        }
        // and every sector stays above the onset threshold before its onset frame
        for n in 0..128 {
            let onset = spec.tos_pattern[n] as usize;
            for t in 0..onset {
                assert!(case.gt_strain.get(n, t) > DEFAULT_ONSET_THRESHOLD);
            }
        }
        assert_eq!(extract_tos(&case.gt_strain, DEFAULT_ONSET_THRESHOLD), case.gt_tos);
    }

    #[test]
    fn random_patterns_are_recoverable() {
        let base = PhantomSpec { noise_sigma: 0.0, ..Default::default() };
        for seed in 0..6 {
            let spec = random_spec(&base, seed);
            let case = generate_phantom(&spec, seed).unwrap();
            let tos = extract_tos(&case.gt_strain, DEFAULT_ONSET_THRESHOLD);
            assert_eq!(tos, case.gt_tos, "seed {seed}");
        }
    }

    #[test]
    fn small_ring_patterns_keep_gentle_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [5, 8, 16, 32, 64, 128] {
            for _ in 0..200 {
                let p = random_tos_pattern(n, 20, &mut rng);
                assert_eq!(p.len(), n);
                for k in 0..n {
                    let (a, b) = (p[k] as i64, p[(k + 1) % n] as i64);
                    assert!((a - b).abs() <= 1, "n {n}: {p:?}");
                }
                // every run of equal onsets is wide enough to survive blending
                if p.iter().any(|&v| v != p[0]) {
                    let s0 = (0..n).find(|&k| p[k] != p[(k + n - 1) % n]).unwrap();
                    let mut run = 0;
                    for i in 0..n {
                        let k = (s0 + i) % n;
                        if i > 0 && p[k] != p[(k + n - 1) % n] {
                            assert!(run >= MIN_STEP_SECTORS, "n {n}: {p:?}");
                            run = 0;
                        }
                        run += 1;
                    }
                    assert!(run >= MIN_STEP_SECTORS, "n {n}: {p:?}");
                }
            }
        }
    }

    #[test]
    fn small_ring_patterns_are_recoverable() {
        let base = PhantomSpec { noise_sigma: 0.0, ..small() };
        for seed in 0..12 {
            let case = generate_phantom(&random_spec(&base, seed), seed).unwrap();
            assert_eq!(extract_tos(&case.gt_strain, DEFAULT_ONSET_THRESHOLD), case.gt_tos, "seed {seed}");
        }
    }
}
