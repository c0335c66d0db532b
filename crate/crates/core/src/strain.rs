//! Strain mathematics on 2D image grids.
//!
//! Conventions used throughout the crate:
//!
//! - Grids are row-major `H × W`; a point is `[x, y] = [column, row]` in pixels.
//! - A displacement field stores `u = (ux, uy)` per pixel and represents the
//!   map `φ(x) = x + u(x)`. Sequences are Lagrangian: `φ_t` maps frame-1
//!   material coordinates to their frame-t positions.
//! - Angles are measured counter-clockwise as displayed (rows grow downward),
//!   i.e. `atan2(c_y - y, x - c_x)`.

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Default onset threshold for [`extract_tos`].
pub const DEFAULT_ONSET_THRESHOLD: f64 = -0.02;
/// LMA threshold in milliseconds.
pub const LMA_THRESHOLD_MS: f64 = 18.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cine,
    Dense,
}

/// A single 2D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Image { h, w, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    pub frames: Vec<Image>,
    pub dt_ms: f64,
    pub modality: Modality,
}

impl ImageSequence {
    pub fn new(frames: Vec<Image>, dt_ms: f64, modality: Modality) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid("an image sequence needs at least 2 frames"));
        }
        let (h, w) = (frames[0].h, frames[0].w);
        for (i, f) in frames.iter().enumerate() {
            if f.h != h || f.w != w {
                return Err(Error::shape(format!("frame {} is {}x{}, expected {h}x{w}", i + 1, f.h, f.w)));
            }
            if f.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("frame {} has non-finite intensities", i + 1)));
            }
        }
        Ok(ImageSequence {
            frames,
            dt_ms,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames[0].h, self.frames[0].w)
    }
}

/// Per-pixel displacement `u = (ux, uy)` in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub h: usize,
    pub w: usize,
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(h: usize, w: usize) -> Self {
        DisplacementField {
            h,
            w,
            ux: vec![0.0; h * w],
            uy: vec![0.0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(f64, f64) -> [f64; 2]) -> Self {
        let mut field = Self::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let [ux, uy] = f(c as f64, r as f64);
                field.ux[r * w + c] = ux;
                field.uy[r * w + c] = uy;
            }
        }
        field
    }

    pub fn is_zero(&self) -> bool {
        self.ux.iter().chain(&self.uy).all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.ux.iter().chain(&self.uy).fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub type DisplacementFieldSequence = Vec<DisplacementField>;

/// Binary myocardium segmentation with its landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct MyocardiumMask {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
    /// `[x, y]` in pixels.
    pub centroid: [f64; 2],
    /// Right-ventricular insertion points on the epicardial contour, `[x, y]`.
    pub insertion_points: [[f64; 2]; 2],
}

impl MyocardiumMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn pixel_centroid(mask: &[bool], w: usize) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                sx += (i % w) as f64;
                sy += (i / w) as f64;
                n += 1;
            }
        }
        if n == 0 {
            return [0.0, 0.0];
        }
        [sx / n as f64, sy / n as f64]
    }

    /// True if the pixel is in the mask and has a 4-neighbour (or grid edge) outside it.
    pub fn is_boundary(&self, r: usize, c: usize) -> bool {
        if !self.mask[r * self.w + c] {
            return false;
        }
        let nbrs = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
        nbrs.iter().any(|&(dr, dc)| {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            rr < 0
                || cc < 0
                || rr >= self.h as i64
                || cc >= self.w as i64
                || !self.mask[rr as usize * self.w + cc as usize]
        })
    }

    /// Angle of sector 0's centre: the circular midpoint of the two insertion angles.
    pub fn reference_angle(&self) -> f64 {
        let a = display_angle(self.insertion_points[0], self.centroid);
        let b = display_angle(self.insertion_points[1], self.centroid);
        (a.sin() + b.sin()).atan2(a.cos() + b.cos())
    }
}

/// Counter-clockwise (as displayed) angle of `p` about `centre`, in `(-π, π]`.
#[inline]
pub fn display_angle(p: [f64; 2], centre: [f64; 2]) -> f64 {
    (centre[1] - p[1]).atan2(p[0] - centre[0])
}

#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

/// Per-pixel sector labels; `None` marks background.
#[derive(Clone, Debug, PartialEq)]
pub struct SectorPartition {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<Option<usize>>,
    pub n_sectors: usize,
}

impl SectorPartition {
    pub fn sector_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_sectors];
        for l in self.labels.iter().flatten() {
            sizes[*l] += 1;
        }
        sizes
    }
}

/// `N × T` circumferential strain, row-major by sector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainMatrix {
    pub n_sectors: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    pub dt_ms: f64,
}

impl StrainMatrix {
    pub fn zeros(n_sectors: usize, n_frames: usize, dt_ms: f64) -> Self {
        StrainMatrix {
            n_sectors,
            n_frames,
            values: vec![0.0; n_sectors * n_frames],
            dt_ms,
        }
    }

    #[inline]
    pub fn get(&self, n: usize, t: usize) -> f64 {
        self.values[n * self.n_frames + t]
    }

    #[inline]
    pub fn set(&mut self, n: usize, t: usize, v: f64) {
        self.values[n * self.n_frames + t] = v;
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_frames..(n + 1) * self.n_frames]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_sectors, self.n_frames, &self.values)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>, dt_ms: f64) -> Self {
        let mut values = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                values.push(m[(r, c)]);
            }
        }
        StrainMatrix {
            n_sectors: m.nrows(),
            n_frames: m.ncols(),
            values,
            dt_ms,
        }
    }

    pub fn frobenius_distance(&self, other: &StrainMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-sector time of onset of shortening, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TosCurve {
    pub values: Vec<f64>,
}

impl TosCurve {
    pub fn new(values: Vec<f64>) -> Self {
        TosCurve { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Symmetric 2×2 tensor field stored by component.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub h: usize,
    pub w: usize,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Warping

/// Bilinear sample with border clamping. Returns the value and its partial
/// derivatives with respect to the sample coordinates; a clamped coordinate
/// has zero derivative.
#[inline]
pub fn bilinear_sample<F: Float>(img: &[F], h: usize, w: usize, x: F, y: F) -> (F, F, F) {
    let zero = F::zero();
    let xmax = F::from(w - 1).unwrap();
    let ymax = F::from(h - 1).unwrap();
    let (xc, x_in) = if x < zero {
        (zero, false)
    } else if x > xmax {
        (xmax, false)
    } else {
        (x, true)
    };
    let (yc, y_in) = if y < zero {
        (zero, false)
    } else if y > ymax {
        (ymax, false)
    } else {
        (y, true)
    };
    let x0 = xc.floor().to_usize().unwrap().min(w.saturating_sub(2));
    let y0 = yc.floor().to_usize().unwrap().min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - F::from(x0).unwrap();
    let fy = yc - F::from(y0).unwrap();
    let v00 = img[y0 * w + x0];
    let v01 = img[y0 * w + x1];
    let v10 = img[y1 * w + x0];
    let v11 = img[y1 * w + x1];
    let one = F::one();
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    let val = top + (bot - top) * fy;
    let dx = if x_in {
        (v01 - v00) * (one - fy) + (v11 - v10) * fy
    } else {
        zero
    };
    let dy = if y_in { bot - top } else { zero };
    (val, dx, dy)
}

/// `I ∘ φ`: samples `image` at `x + u(x)` for every pixel.
pub fn warp(image: &Image, phi: &DisplacementField) -> Result<Image> {
    if image.h != phi.h || image.w != phi.w {
        return Err(Error::shape(format!(
            "image {}x{} vs field {}x{}",
            image.h, image.w, phi.h, phi.w
        )));
    }
    let (h, w) = (image.h, image.w);
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let x = c as f64 + phi.ux[i];
            let y = r as f64 + phi.uy[i];
            out.data[i] = bilinear_sample(&image.data, h, w, x, y).0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Strain

#[inline]
fn diff(v: &[f64], h: usize, w: usize, r: usize, c: usize, along_x: bool) -> f64 {
    if along_x {
        if w < 2 {
            return 0.0;
        }
        if c == 0 {
            v[r * w + 1] - v[r * w]
        } else if c == w - 1 {
            v[r * w + c] - v[r * w + c - 1]
        } else {
            0.5 * (v[r * w + c + 1] - v[r * w + c - 1])
        }
    } else {
        if h < 2 {
            return 0.0;
        }
        if r == 0 {
            v[w + c] - v[c]
        } else if r == h - 1 {
            v[r * w + c] - v[(r - 1) * w + c]
        } else {
            0.5 * (v[(r + 1) * w + c] - v[(r - 1) * w + c])
        }
    }
}

/// Green–Lagrange strain `E = ½(FᵀF − I)` with `F = I + ∇u`; central
/// differences inside, one-sided at the grid border.
pub fn green_lagrange(phi: &DisplacementField) -> TensorField {
    let (h, w) = (phi.h, phi.w);
    let mut e = TensorField {
        h,
        w,
        xx: vec![0.0; h * w],
        xy: vec![0.0; h * w],
        yy: vec![0.0; h * w],
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            // F = [[1 + ux_x, ux_y], [uy_x, 1 + uy_y]]
            let f11 = 1.0 + diff(&phi.ux, h, w, r, c, true);
            let f12 = diff(&phi.ux, h, w, r, c, false);
            let f21 = diff(&phi.uy, h, w, r, c, true);
            let f22 = 1.0 + diff(&phi.uy, h, w, r, c, false);
            e.xx[i] = 0.5 * (f11 * f11 + f21 * f21 - 1.0);
            e.xy[i] = 0.5 * (f11 * f12 + f21 * f22);
            e.yy[i] = 0.5 * (f12 * f12 + f22 * f22 - 1.0);
        }
    }
    e
}

/// `E_cc = ĉᵀ E ĉ` on the mask, with `ĉ` the unit tangent to the circle about
/// the mask centroid. Background pixels are zero.
pub fn circumferential_strain(e: &TensorField, mask: &MyocardiumMask) -> Result<Image> {
    if e.h != mask.h || e.w != mask.w {
        return Err(Error::shape("strain tensor and mask grids differ"));
    }
    let mut out = Image::zeros(e.h, e.w);
    for r in 0..e.h {
        for c in 0..e.w {
            let i = r * e.w + c;
            if !mask.mask[i] {
                continue;
            }
            let dx = c as f64 - mask.centroid[0];
            let dy = r as f64 - mask.centroid[1];
            let rad = (dx * dx + dy * dy).sqrt();
            if rad < 1e-9 {
                return Err(Error::invalid("circumferential direction undefined at the centroid"));
            }
            let (cx, cy) = (-dy / rad, dx / rad);
            out.data[i] = cx * cx * e.xx[i] + 2.0 * cx * cy * e.xy[i] + cy * cy * e.yy[i];
        }
    }
    Ok(out)
}

/// Splits the myocardium into `n_sectors` equal angular wedges, counter-clockwise
/// from the wedge centred on the midpoint of the insertion points.
pub fn build_partition(mask: &MyocardiumMask, n_sectors: usize) -> Result<SectorPartition> {
    if n_sectors < 4 {
        return Err(Error::invalid(format!("need at least 4 sectors, got {n_sectors}")));
    }
    let count = mask.count();
    if count < n_sectors {
        return Err(Error::invalid(format!(
            "{count} myocardium pixels cannot cover {n_sectors} sectors"
        )));
    }
    let width = 2.0 * PI / n_sectors as f64;
    let start = mask.reference_angle() - 0.5 * width;
    let mut labels = vec![None; mask.h * mask.w];
    for r in 0..mask.h {
        for c in 0..mask.w {
            let i = r * mask.w + c;
            if !mask.mask[i] {
                continue;
            }
            let a = wrap_angle(display_angle([c as f64, r as f64], mask.centroid) - start);
            // Ties on a wedge boundary go to the lower index.
            let k = (a / width).ceil() as usize;
            labels[i] = Some(if k == 0 { 0 } else { (k - 1) % n_sectors });
        }
    }
    Ok(SectorPartition {
        h: mask.h,
        w: mask.w,
        labels,
        n_sectors,
    })
}

/// Sector means of the circumferential strain of every frame.
pub fn build_strain_matrix(
    phis: &[DisplacementField],
    mask: &MyocardiumMask,
    partition: &SectorPartition,
    dt_ms: f64,
) -> Result<StrainMatrix> {
    if phis.is_empty() {
        return Err(Error::invalid("empty displacement sequence"));
    }
    if !phis[0].is_zero() {
        return Err(Error::invalid("sequence is not Lagrangian: frame 1 displacement is non-zero"));
    }
    let sizes = partition.sector_sizes();
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("sector {k} has no pixels")));
    }
    let (n, t_len) = (partition.n_sectors, phis.len());
    let mut s = StrainMatrix::zeros(n, t_len, dt_ms);
    for (t, phi) in phis.iter().enumerate() {
        if phi.h != mask.h || phi.w != mask.w {
            return Err(Error::shape(format!("frame {} field does not match mask", t + 1)));
        }
        let ecc = circumferential_strain(&green_lagrange(phi), mask)?;
        let mut sums = vec![0.0; n];
        for (i, l) in partition.labels.iter().enumerate() {
            if let Some(k) = l {
                sums[*k] += ecc.data[i];
            }
        }
        for k in 0..n {
            s.set(k, t, sums[k] / sizes[k] as f64);
        }
    }
    Ok(s)
}

/// Rule-based TOS: the onset frame `t*` is the earliest (1-based) frame after
/// which the strain stays at or below `onset_threshold` for two consecutive
/// frames (`t*+1` and `t*+2`). `TOS = dt · t*`, or `dt · T` if the sector never
/// shortens.
pub fn extract_tos(s: &StrainMatrix, onset_threshold: f64) -> TosCurve {
    let t_len = s.n_frames;
    let values = (0..s.n_sectors)
        .map(|n| {
            let row = s.row(n);
            let onset = (1..t_len.saturating_sub(1))
                .find(|&t| row[t] <= onset_threshold && row[t + 1] <= onset_threshold);
            match onset {
                // row index `t` is frame t+1, so the last unshortened frame is t.
                Some(t) => s.dt_ms * t as f64,
                None => s.dt_ms * t_len as f64,
            }
        })
        .collect();
    TosCurve { values }
}

pub fn classify_lma(tos: &TosCurve, threshold_ms: f64) -> Vec<bool> {
    tos.values.iter().map(|&v| v > threshold_ms).collect()
}

/// Best rank-k approximation together with the retained singular bases.
#[derive(Clone, Debug)]
pub struct LowRankProjection {
    pub output: StrainMatrix,
    /// `N × k`
    pub u: DMatrix<f64>,
    /// `T × k`
    pub v: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl LowRankProjection {
    /// Projects a matrix onto the tangent space of the rank-k manifold at the
    /// output: `P_U G + G P_V − P_U G P_V`.
    pub fn project_tangent(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let ug = &self.u * (self.u.transpose() * g);
        let gv = (g * &self.v) * self.v.transpose();
        let ugv = (&self.u * (self.u.transpose() * g * &self.v)) * self.v.transpose();
        ug + gv - ugv
    }
}

pub fn low_rank_decompose(s: &StrainMatrix, k: usize) -> Result<LowRankProjection> {
    let max_rank = s.n_sectors.min(s.n_frames);
    if k == 0 || k > max_rank {
        return Err(Error::invalid(format!("rank {k} outside 1..={max_rank}")));
    }
    let (u_full, sv, v_full) = jacobi_svd(&s.to_dmatrix());
    let u = u_full.columns(0, k).into_owned();
    let v = v_full.columns(0, k).into_owned();
    let mut approx = DMatrix::zeros(s.n_sectors, s.n_frames);
    for j in 0..k {
        approx += sv[j] * (u.column(j) * v.column(j).transpose());
    }
    Ok(LowRankProjection {
        output: StrainMatrix::from_dmatrix(&approx, s.dt_ms),
        u,
        v,
        singular_values: sv,
    })
}

/// One-sided Jacobi SVD. Returns thin `U` (m × r), descending singular
/// values and `V` (n × r) with `r = min(m, n)`. Columns of `U` belonging to
/// zero singular values are completed to an orthonormal set.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for mat in [&mut w, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, i)], mat[(r, j)]);
                        mat[(r, i)] = c * x - sn * y;
                        mat[(r, j)] = sn * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sv = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        vs.set_column(k, &v.column(j));
        let sigma = norms[j];
        if sigma > 1e-13 * scale && sigma > 0.0 {
            u.set_column(k, &(w.column(j) / sigma));
            sv.push(sigma);
        } else {
            sv.push(0.0);
            // complete with the standard basis vector least covered so far
            let mut best = (f64::NEG_INFINITY, DVector::zeros(m));
            for e in 0..m {
                let mut cand = DVector::zeros(m);
                cand[e] = 1.0;
                for q in 0..k {
                    let proj = u.column(q).dot(&cand);
                    cand -= proj * u.column(q);
                }
                let nrm = cand.norm();
                if nrm > best.0 {
                    best = (nrm, cand / nrm);
                }
            }
            u.set_column(k, &best.1);
        }
    }
    (u, sv, vs)
}

/// Truncated-SVD projection `U_k Σ_k V_kᵀ`.
pub fn low_rank_project(s: &StrainMatrix, k: usize) -> Result<StrainMatrix> {
    Ok(low_rank_decompose(s, k)?.output)
}

/// CSV with one row per sector: `sector_index,tos_ms,lma_flag`.
pub fn tos_csv(tos: &TosCurve, threshold_ms: f64) -> String {
    let mut out = String::from("sector_index,tos_ms,lma_flag\n");
    for (n, (&v, flag)) in tos
        .values
        .iter()
        .zip(classify_lma(tos, threshold_ms))
        .enumerate()
    {
        out.push_str(&format!("{n},{v},{}\n", flag as u8));
    }
    out
}
