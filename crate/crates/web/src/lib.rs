//! Browser bindings for the phantom, strain and activation-map tools.
//!
//! Everything here is a thin layer over `densecine`; pixel buffers are
//! returned as RGBA bytes ready for `ImageData`.

use densecine::phantom::{generate_phantom, random_spec, PhantomCase, PhantomSpec};
use densecine::recon3d::tos_color;
use densecine::strain::{classify_lma, extract_tos, SectorPartition, TosCurve};
use wasm_bindgen::prelude::*;

/// Symmetric colour range of the strain heatmap.
pub const STRAIN_RANGE: f64 = 0.25;

/// One generated phantom case plus its sector partition.
#[wasm_bindgen]
pub struct PhantomView {
    case: PhantomCase,
    partition: SectorPartition,
}

#[wasm_bindgen]
impl PhantomView {
    /// Generates a phantom with a random late-activation pattern drawn from
    /// `seed`. `grid` and `sectors` override the default 64 px / 128 sectors.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, grid: usize, sectors: usize, noise: f64) -> Result<PhantomView, String> {
        let base = PhantomSpec::default();
        let scale = grid as f64 / base.grid_size as f64;
        let base = PhantomSpec {
            grid_size: grid,
            n_sectors: sectors,
            tos_pattern: vec![1; sectors],
            inner_radius: base.inner_radius * scale,
            outer_radius: base.outer_radius * scale,
            noise_sigma: noise,
            ..base
        };
        let spec = random_spec(&base, seed);
        let case = generate_phantom(&spec, seed).map_err(|e| e.to_string())?;
        let partition = case.partition().map_err(|e| e.to_string())?;
        Ok(PhantomView { case, partition })
    }

    pub fn grid(&self) -> usize {
        self.case.spec.grid_size
    }

    pub fn sectors(&self) -> usize {
        self.case.spec.n_sectors
    }

    pub fn dense_frames(&self) -> usize {
        self.case.dense.frames.len()
    }

    pub fn cine_frames(&self) -> usize {
        self.case.cine.frames.len()
    }

    pub fn dense_dt_ms(&self) -> f64 {
        self.case.dense.dt_ms
    }

    /// Grey-level frame `t` (0-based) of the DENSE or cine sequence.
    pub fn frame_rgba(&self, t: usize, cine: bool) -> Result<Vec<u8>, String> {
        let seq = if cine { &self.case.cine } else { &self.case.dense };
        let frame = seq.frames.get(t).ok_or_else(|| format!("frame {t} out of range 0..{}", seq.frames.len()))?;
        Ok(frame
            .data
            .iter()
            .flat_map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect())
    }

    /// Ground-truth strain matrix as an `N × T` heatmap, sectors along rows.
    pub fn strain_rgba(&self) -> Vec<u8> {
        self.case.gt_strain.values.iter().flat_map(|&v| strain_rgba_pixel(v)).collect()
    }

    pub fn gt_tos(&self) -> Vec<f64> {
        self.case.gt_tos.values.clone()
    }

    /// TOS re-extracted from the ground-truth strain with a custom onset threshold.
    pub fn rule_tos(&self, onset_threshold: f64) -> Vec<f64> {
        extract_tos(&self.case.gt_strain, onset_threshold).values
    }

    /// Per-sector LMA flags (1 = late) for the given TOS curve and threshold.
    pub fn lma_flags(&self, tos: Vec<f64>, threshold_ms: f64) -> Vec<u8> {
        classify_lma(&TosCurve { values: tos }, threshold_ms).into_iter().map(u8::from).collect()
    }

    /// Myocardium coloured by sector TOS: blue up to the threshold, red beyond.
    pub fn activation_map_rgba(&self, tos: Vec<f64>, threshold_ms: f64) -> Result<Vec<u8>, String> {
        if tos.len() != self.sectors() {
            return Err(format!("expected {} TOS values, got {}", self.sectors(), tos.len()));
        }
        Ok(self
            .partition
            .labels
            .iter()
            .flat_map(|l| match l {
                Some(k) => {
                    let [r, g, b] = tos_color(tos[*k], threshold_ms);
                    [r, g, b, 255]
                }
                None => [0, 0, 0, 0],
            })
            .collect())
    }
}

/// Diverging colour: blue for shortening, red for stretch, white at zero.
pub fn strain_rgba_pixel(v: f64) -> [u8; 4] {
    let f = (v / STRAIN_RANGE).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - f.abs())).round() as u8;
    if f < 0.0 {
        [fade, fade, 255, 255]
    } else {
        [255, fade, fade, 255]
    }
}
