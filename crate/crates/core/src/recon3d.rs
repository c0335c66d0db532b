//! 3D activation maps from a stack of short-axis TOS curves.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, random_spec, PhantomCase, PhantomSpec};
use crate::strain::{display_angle, MyocardiumMask, TosCurve, LMA_THRESHOLD_MS};

#[derive(Clone, Debug)]
pub struct SliceData {
    pub z_mm: f64,
    pub mask: MyocardiumMask,
    pub tos: TosCurve,
}

/// Short-axis slices ordered from base to apex (increasing `z_mm`).
#[derive(Clone, Debug)]
pub struct SlicedStudy {
    pub slices: Vec<SliceData>,
    pub n_sectors: usize,
    /// In-plane pixel size; vertex coordinates are in millimetres.
    pub pixel_spacing_mm: f64,
}

impl SlicedStudy {
    pub fn new(slices: Vec<SliceData>, pixel_spacing_mm: f64) -> Result<Self> {
        let n_sectors = slices.first().map_or(0, |s| s.tos.len());
        let study = SlicedStudy { slices, n_sectors, pixel_spacing_mm };
        study.validate()?;
        Ok(study)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.len() < 2 {
            return Err(Error::invalid(format!("a study needs at least 2 slices, got {}", self.slices.len())));
        }
        if !(self.pixel_spacing_mm > 0.0 && self.pixel_spacing_mm.is_finite()) {
            return Err(Error::invalid("pixel spacing must be positive"));
        }
        for (i, s) in self.slices.iter().enumerate() {
            if s.tos.len() != self.n_sectors {
                return Err(Error::shape(format!(
                    "slice {i} has {} sectors, expected {}",
                    s.tos.len(),
                    self.n_sectors
                )));
            }
            if !s.z_mm.is_finite() || s.tos.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("slice {i} has non-finite values")));
            }
        }
        if self.slices.windows(2).any(|p| p[1].z_mm <= p[0].z_mm) {
            return Err(Error::invalid("slice z positions must be strictly increasing"));
        }
        Ok(())
    }
}

/// Triangulated tube: `angular` vertices per ring, rings ordered by `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSurface {
    pub points: Vec<[f64; 3]>,
    pub tos: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
}

impl ActivationSurface {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.tos.len() {
            return Err(Error::shape(format!("{} points but {} tos values", self.points.len(), self.tos.len())));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= self.points.len())) {
            return Err(Error::shape(format!("face {f:?} indexes past {} vertices", self.points.len())));
        }
        Ok(())
    }
}

/// Radial march step in pixels.
const RAY_STEP: f64 = 0.05;

/// Mid-wall radius along each sector's centre ray: the mean of the first and
/// last radii at which the ray lies in the mask (nearest-pixel lookup).
fn sector_mid_radii(mask: &MyocardiumMask, n_sectors: usize) -> Result<Vec<f64>> {
    if n_sectors == 0 {
        return Err(Error::invalid("no sectors"));
    }
    let c = mask.centroid;
    let a0 = mask.reference_angle();
    let r_max = (mask.h as f64).hypot(mask.w as f64);
    (0..n_sectors)
        .map(|k| {
            let a = a0 + 2.0 * PI * k as f64 / n_sectors as f64;
            let (ca, sa) = (a.cos(), a.sin());
            let (mut first, mut last) = (None, 0.0);
            let mut i = 0;
            loop {
                let r = i as f64 * RAY_STEP;
                if r > r_max {
                    break;
                }
                let (x, y) = ((c[0] + r * ca).round(), (c[1] - r * sa).round());
                if x >= 0.0 && y >= 0.0 && (x as usize) < mask.w && (y as usize) < mask.h && mask.mask[y as usize * mask.w + x as usize] {
                    first.get_or_insert(r);
                    last = r;
                }
                i += 1;
            }
            first
                .map(|f| 0.5 * (f + last))
                .ok_or_else(|| Error::invalid(format!("the ray through sector {k} never meets the mask")))
        })
        .collect()
}

/// Linear interpolation of per-sector values at a fractional sector position, wrapping around.
fn periodic_lerp(values: &[f64], pos: f64) -> f64 {
    let n = values.len();
    let p = pos.rem_euclid(n as f64);
    let k = p.floor() as usize % n;
    let f = p - p.floor();
    (1.0 - f) * values[k] + f * values[(k + 1) % n]
}

/// One ring per slice: `(points in mm, tos)` at `angular` equally spaced angles
/// starting from the sector-0 centre and running counter-clockwise.
fn slice_ring(slice: &SliceData, n_sectors: usize, angular: usize, spacing: f64) -> Result<Vec<([f64; 2], f64)>> {
    let radii = sector_mid_radii(&slice.mask, n_sectors)?;
    let c = slice.mask.centroid;
    let a0 = slice.mask.reference_angle();
    Ok((0..angular)
        .map(|j| {
            // sector k's centre sits at a0 + k·width, so position is in sector units
            let pos = j as f64 * n_sectors as f64 / angular as f64;
            let r = periodic_lerp(&radii, pos);
            let a = a0 + 2.0 * PI * j as f64 / angular as f64;
            let p = [(c[0] + r * a.cos()) * spacing, (c[1] - r * a.sin()) * spacing];
            (p, periodic_lerp(&slice.tos.values, pos))
        })
        .collect())
}

/// Samples the mid-wall surface on an `angular_samples × z_samples` grid.
///
/// Within a slice radius and TOS are linear in angle between sector centres;
/// between slices ring points and TOS are linear in `z`.
pub fn reconstruct_surface(study: &SlicedStudy, angular_samples: usize, z_samples: usize) -> Result<ActivationSurface> {
    study.validate()?;
    if angular_samples < study.n_sectors {
        return Err(Error::invalid(format!(
            "angular_samples ({angular_samples}) must be at least the sector count ({})",
            study.n_sectors
        )));
    }
    if z_samples < study.slices.len() {
        return Err(Error::invalid(format!(
            "z_samples ({z_samples}) must be at least the slice count ({})",
            study.slices.len()
        )));
    }
    let rings = study
        .slices
        .iter()
        .map(|s| slice_ring(s, study.n_sectors, angular_samples, study.pixel_spacing_mm))
        .collect::<Result<Vec<_>>>()?;
    let z0 = study.slices[0].z_mm;
    let z1 = study.slices.last().unwrap().z_mm;
    let mut points = Vec::with_capacity(angular_samples * z_samples);
    let mut tos = Vec::with_capacity(angular_samples * z_samples);
    let mut seg = 0;
    for k in 0..z_samples {
        let z = if k + 1 == z_samples { z1 } else { z0 + (z1 - z0) * k as f64 / (z_samples - 1) as f64 };
        while seg + 2 < study.slices.len() && z > study.slices[seg + 1].z_mm {
            seg += 1;
        }
        let (za, zb) = (study.slices[seg].z_mm, study.slices[seg + 1].z_mm);
        let f = ((z - za) / (zb - za)).clamp(0.0, 1.0);
        for j in 0..angular_samples {
            let (pa, ta) = rings[seg][j];
            let (pb, tb) = rings[seg + 1][j];
            points.push([(1.0 - f) * pa[0] + f * pb[0], (1.0 - f) * pa[1] + f * pb[1], z]);
            tos.push((1.0 - f) * ta + f * tb);
        }
    }
    let mut faces = Vec::with_capacity(2 * angular_samples * (z_samples - 1));
    for k in 0..z_samples - 1 {
        for j in 0..angular_samples {
            let a = k * angular_samples + j;
            let b = k * angular_samples + (j + 1) % angular_samples;
            let (c, d) = (b + angular_samples, a + angular_samples);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Ok(ActivationSurface { points, tos, faces })
}

/// Fixed diverging colormap: blue shades up to `threshold_ms`, red shades above.
pub fn tos_color(tos_ms: f64, threshold_ms: f64) -> [u8; 3] {
    let lerp = |a: f64, b: f64, f: f64| (a + (b - a) * f).round() as u8;
    if tos_ms <= threshold_ms {
        let f = if threshold_ms > 0.0 { (tos_ms / threshold_ms).clamp(0.0, 1.0) } else { 1.0 };
        [lerp(20.0, 110.0, f), lerp(40.0, 170.0, f), 255]
    } else {
        let f = ((tos_ms - threshold_ms) / 100.0).clamp(0.0, 1.0);
        [255, lerp(170.0, 0.0, f), lerp(110.0, 0.0, f)]
    }
}

pub fn surface_to_ply(surface: &ActivationSurface) -> Result<String> {
    surface.validate()?;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment densecine activation map\n");
    let _ = writeln!(s, "element vertex {}", surface.points.len());
    for p in ["x", "y", "z", "tos_ms"] {
        let _ = writeln!(s, "property float {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {p}");
    }
    let _ = writeln!(s, "element face {}", surface.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (p, &t) in surface.points.iter().zip(&surface.tos) {
        let [r, g, b] = tos_color(t, LMA_THRESHOLD_MS);
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {:.6} {r} {g} {b}", p[0], p[1], p[2], t);
    }
    for f in &surface.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    Ok(s)
}

pub fn export_surface(surface: &ActivationSurface, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_text(path, &surface_to_ply(surface)?)
}

/// Parsed PLY: the surface plus the stored vertex colours.
#[derive(Clone, Debug)]
pub struct PlyMesh {
    pub surface: ActivationSurface,
    pub colors: Vec<[u8; 3]>,
}

/// Reads back the ASCII layout written by [`export_surface`].
pub fn parse_ply(text: &str) -> Result<PlyMesh> {
    let bad = |m: String| Error::Format(m);
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let (mut nv, mut nf) = (None, None);
    let mut vprops = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header".into()))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] | ["comment", ..] => {}
            ["format", ..] => return Err(bad(format!("unsupported format line: {line}"))),
            ["element", "vertex", n] => {
                nv = Some(n.parse::<usize>().map_err(|e| bad(format!("vertex count: {e}")))?);
                in_vertex = true;
            }
            ["element", "face", n] => {
                nf = Some(n.parse::<usize>().map_err(|e| bad(format!("face count: {e}")))?);
                in_vertex = false;
            }
            ["property", "list", ..] => {}
            ["property", _, name] if in_vertex => vprops.push(name.to_string()),
            _ => return Err(bad(format!("unexpected header line: {line}"))),
        }
    }
    let expected = ["x", "y", "z", "tos_ms", "red", "green", "blue"];
    if vprops != expected {
        return Err(bad(format!("vertex properties {vprops:?}, expected {expected:?}")));
    }
    let nv = nv.ok_or_else(|| bad("no vertex element".into()))?;
    let nf = nf.unwrap_or(0);
    let mut points = Vec::with_capacity(nv);
    let mut tos = Vec::with_capacity(nv);
    let mut colors = Vec::with_capacity(nv);
    for i in 0..nv {
        let line = lines.next().ok_or_else(|| bad(format!("missing vertex {i}")))?;
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.len() != 7 {
            return Err(bad(format!("vertex {i}: expected 7 fields, got {}", v.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("vertex {i}: {e}")));
        let u = |s: &str| s.parse::<u8>().map_err(|e| bad(format!("vertex {i}: {e}")));
        points.push([f(v[0])?, f(v[1])?, f(v[2])?]);
        tos.push(f(v[3])?);
        colors.push([u(v[4])?, u(v[5])?, u(v[6])?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let line = lines.next().ok_or_else(|| bad(format!("missing face {i}")))?;
        let v = line
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("face {i}: {e}")))?;
        if v.len() != 4 || v[0] != 3 {
            return Err(bad(format!("face {i}: only triangles are supported")));
        }
        faces.push([v[1], v[2], v[3]]);
    }
    let surface = ActivationSurface { points, tos, faces };
    surface.validate()?;
    Ok(PlyMesh { surface, colors })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyMesh> {
    parse_ply(&crate::io::read_text(path)?)
}

/// Angle of each surface vertex about the slice axis through `centre` (pixels × spacing).
pub fn vertex_angle(p: [f64; 3], centre: [f64; 2]) -> f64 {
    display_angle([p[0], p[1]], centre)
}

/// Phantom stack for 3D maps: `n_slices` slices `gap_mm` apart sharing one
/// activation pattern, rotated by `twist` sectors per slice towards the apex.
pub fn phantom_study(base: &PhantomSpec, seed: u64, n_slices: usize, gap_mm: f64, twist: usize) -> Result<Vec<(f64, PhantomCase)>> {
    if n_slices < 2 {
        return Err(Error::invalid("a study needs at least 2 slices"));
    }
    let pattern = random_spec(base, seed).tos_pattern;
    (0..n_slices)
        .map(|i| {
            let mut tos_pattern = pattern.clone();
            tos_pattern.rotate_right((i * twist) % base.n_sectors.max(1));
            let spec = PhantomSpec { tos_pattern, texture_seed: seed + i as u64, ..base.clone() };
            Ok((i as f64 * gap_mm, generate_phantom(&spec, seed + i as u64)?))
        })
        .collect()
}

/// Study from per-slice cases and the TOS curves some method predicted for them.
pub fn study_from_cases(slices: &[(f64, PhantomCase)], tos: Vec<TosCurve>, pixel_spacing_mm: f64) -> Result<SlicedStudy> {
    if tos.len() != slices.len() {
        return Err(Error::shape(format!("{} slices but {} TOS curves", slices.len(), tos.len())));
    }
    let data = slices
        .iter()
        .zip(tos)
        .map(|((z, case), tos)| SliceData { z_mm: *z, mask: case.myocardium.clone(), tos })
        .collect();
    SlicedStudy::new(data, pixel_spacing_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::myocardium_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(inner: f64, outer: f64) -> MyocardiumMask {
        myocardium_mask(&PhantomSpec { inner_radius: inner, outer_radius: outer, ..PhantomSpec::default() })
    }

    fn slice(z: f64, m: &MyocardiumMask, tos: Vec<f64>) -> SliceData {
        SliceData { z_mm: z, mask: m.clone(), tos: TosCurve::new(tos) }
    }

    #[test]
    fn identical_slices_extend_constantly() {
        let m = mask(12.0, 22.0);
        let tos: Vec<f64> = (0..128).map(|k| 17.0 * (1 + k % 3) as f64).collect();
        let study = SlicedStudy::new(vec![slice(0.0, &m, tos.clone()), slice(10.0, &m, tos)], 1.0).unwrap();
        let s = reconstruct_surface(&study, 128, 5).unwrap();
        for j in 0..128 {
            for k in 1..5 {
                let (a, b) = (s.points[j], s.points[k * 128 + j]);
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
                assert_eq!(s.tos[j], s.tos[k * 128 + j]);
            }
        }
        assert_eq!(s.faces.len(), 2 * 128 * 4);
    }

    #[test]
    fn midway_tos_is_the_average() {
        let m = mask(12.0, 22.0);
        let study = SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128]), slice(10.0, &m, vec![51.0; 128])], 1.0).unwrap();
        let s = reconstruct_surface(&study, 128, 3).unwrap();
        assert!(s.tos[128..256].iter().all(|&t| (t - 34.0).abs() < 1e-12));
        assert!(s.points[128..256].iter().all(|p| p[2] == 5.0));
    }

    #[test]
    fn uniform_normal_tos_is_all_blue() {
        let m = mask(12.0, 22.0);
        let study = SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128]), slice(8.0, &m, vec![17.0; 128])], 1.5).unwrap();
        let s = reconstruct_surface(&study, 256, 4).unwrap();
        assert!(s.tos.iter().all(|&t| t == 17.0));
        let [r, _, b] = tos_color(17.0, LMA_THRESHOLD_MS);
        assert!(b > r);
        let [r, _, b] = tos_color(100.0, LMA_THRESHOLD_MS);
        assert!(r > b);
    }

    #[test]
    fn ring_radius_is_mid_wall() {
        let m = mask(12.0, 22.0);
        let study = SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128]), slice(1.0, &m, vec![17.0; 128])], 1.0).unwrap();
        let s = reconstruct_surface(&study, 128, 2).unwrap();
        for p in &s.points {
            let r = (p[0] - m.centroid[0]).hypot(p[1] - m.centroid[1]);
            assert!((r - 17.0).abs() < 1.0, "radius {r}");
        }
    }

    #[test]
    fn rejects_bad_studies() {
        let m = mask(12.0, 22.0);
        assert!(SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128])], 1.0).is_err());
        assert!(SlicedStudy::new(vec![slice(1.0, &m, vec![17.0; 128]), slice(1.0, &m, vec![17.0; 128])], 1.0).is_err());
        assert!(SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128]), slice(1.0, &m, vec![17.0; 64])], 1.0).is_err());
        let study = SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128]), slice(1.0, &m, vec![17.0; 128])], 1.0).unwrap();
        assert!(reconstruct_surface(&study, 64, 2).is_err());
        assert!(reconstruct_surface(&study, 128, 1).is_err());
        let empty = MyocardiumMask { mask: vec![false; m.mask.len()], ..m.clone() };
        let study = SlicedStudy::new(vec![slice(0.0, &m, vec![17.0; 128]), slice(1.0, &empty, vec![17.0; 128])], 1.0).unwrap();
        assert!(reconstruct_surface(&study, 128, 2).is_err());
    }

    #[test]
    fn z_is_monotone_along_the_tube() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let slices = [0.0, 7.0, 9.5, 20.0]
            .iter()
            .map(|&z| slice(z, &mask(rng.gen_range(9.0..13.0), rng.gen_range(19.0..24.0)), vec![17.0; 128]))
            .collect();
        let s = reconstruct_surface(&SlicedStudy::new(slices, 1.0).unwrap(), 160, 13).unwrap();
        assert!(s.points.windows(2).all(|p| p[1][2] >= p[0][2]));
        assert_eq!(s.points[0][2], 0.0);
        assert_eq!(s.points.last().unwrap()[2], 20.0);
    }

    #[test]
    fn ply_round_trip_and_point_cloud() {
        let m = mask(12.0, 22.0);
        let tos: Vec<f64> = (0..128).map(|k| 17.0 + k as f64 * 0.37).collect();
        let study = SlicedStudy::new(vec![slice(0.0, &m, tos), slice(10.0, &m, vec![51.0; 128])], 1.0).unwrap();
        let s = reconstruct_surface(&study, 128, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        export_surface(&s, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.surface.points.len(), s.points.len());
        assert_eq!(back.surface.faces, s.faces);
        for (a, b) in back.surface.tos.iter().zip(&s.tos) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(back.colors[0], tos_color(s.tos[0], LMA_THRESHOLD_MS));

        let cloud = ActivationSurface { faces: vec![], ..s.clone() };
        let text = surface_to_ply(&cloud).unwrap();
        assert!(text.contains("element face 0\n"));
        assert_eq!(parse_ply(&text).unwrap().surface.faces.len(), 0);
        // byte-stable
        assert_eq!(text, surface_to_ply(&cloud).unwrap());
    }

    #[test]
    fn phantom_study_shares_a_twisted_pattern() {
        let base = PhantomSpec { grid_size: 32, n_sectors: 16, t_cine: 4, t_dense: 6, inner_radius: 6.0, outer_radius: 11.0, ..PhantomSpec::default() };
        let study = phantom_study(&base, 3, 4, 10.0, 2).unwrap();
        assert_eq!(study.len(), 4);
        let p0 = &study[0].1.spec.tos_pattern;
        for (i, (z, case)) in study.iter().enumerate() {
            assert_eq!(*z, 10.0 * i as f64);
            let mut want = p0.clone();
            want.rotate_right(2 * i);
            assert_eq!(case.spec.tos_pattern, want);
        }
        let tos = study.iter().map(|(_, c)| c.gt_tos.clone()).collect();
        let s = reconstruct_surface(&study_from_cases(&study, tos, 1.0).unwrap(), 16, 4).unwrap();
        assert_eq!(s.points.len(), 64);
    }

    #[test]
    fn malformed_ply_is_rejected() {
        assert!(parse_ply("nope").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").is_err());
        let bad_face = ActivationSurface { points: vec![[0.0; 3]], tos: vec![1.0], faces: vec![[0, 0, 1]] };
        assert!(surface_to_ply(&bad_face).is_err());
    }

    /// Display-counter-clockwise quarter turn of the pixel grid.
    fn rot90(m: &MyocardiumMask) -> MyocardiumMask {
        let (h, w) = (m.h, m.w);
        assert_eq!(h, w);
        let mut mask = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                mask[(w - 1 - c) * w + r] = m.mask[r * w + c];
            }
        }
        let p = |q: [f64; 2]| [q[1], (w - 1) as f64 - q[0]];
        MyocardiumMask { h, w, mask, centroid: p(m.centroid), insertion_points: [p(m.insertion_points[0]), p(m.insertion_points[1])] }
    }

    #[test]
    fn quarter_turn_rotates_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let masks: Vec<MyocardiumMask> = (0..3).map(|_| mask(rng.gen_range(9.0..13.0), rng.gen_range(19.0..24.0))).collect();
        let curves: Vec<Vec<f64>> = (0..3).map(|_| (0..128).map(|_| rng.gen_range(17.0..150.0)).collect()).collect();
        let build = |ms: &[MyocardiumMask]| {
            let slices = ms.iter().zip(&curves).enumerate().map(|(i, (m, t))| slice(4.0 * i as f64, m, t.clone())).collect();
            reconstruct_surface(&SlicedStudy::new(slices, 1.0).unwrap(), 256, 7).unwrap()
        };
        let a = build(&masks);
        let b = build(&masks.iter().map(rot90).collect::<Vec<_>>());
        assert_eq!(a.tos, b.tos);
        for (p, q) in a.points.iter().zip(&b.points) {
            let want = [p[1], 63.0 - p[0], p[2]];
            for d in 0..3 {
                // pixel-centre ties may round the other way after the turn
                assert!((q[d] - want[d]).abs() <= RAY_STEP + 1e-9, "{q:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn interpolated_tos_stays_in_the_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let mut z = 0.0;
            let slices: Vec<SliceData> = (0..4)
                .map(|_| {
                    z += rng.gen_range(2.0..12.0);
                    let tos = (0..128).map(|_| rng.gen_range(0.0..400.0)).collect();
                    slice(z, &mask(rng.gen_range(9.0..13.0), rng.gen_range(19.0..24.0)), tos)
                })
                .collect();
            let lo = slices.iter().flat_map(|s| s.tos.values.iter().copied()).fold(f64::INFINITY, f64::min);
            let hi = slices.iter().flat_map(|s| s.tos.values.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
            let s = reconstruct_surface(&SlicedStudy::new(slices, 1.2).unwrap(), 300, 11).unwrap();
            assert!(s.tos.iter().all(|&t| t >= lo && t <= hi));
        }
    }
}
