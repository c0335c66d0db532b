//! Metrics, reports and the classical feature-tracking baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PhantomCase;
use crate::registration::{data_term_grad, field_to_tensor, reg_term_grad, tensor_to_field, RegOperatorConfig};
use crate::strain::{
    bilinear_sample, build_partition, build_strain_matrix, classify_lma, extract_tos, DisplacementField, StrainMatrix,
    TosCurve, DEFAULT_ONSET_THRESHOLD,
};

fn check_len(a: &TosCurve, b: &TosCurve) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("TOS curves have lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean squared TOS difference in ms².
pub fn tos_mse(pred: &TosCurve, gt: &TosCurve) -> Result<f64> {
    check_len(pred, gt)?;
    Ok(pred.values.iter().zip(&gt.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / gt.len() as f64)
}

/// Fraction of sectors whose LMA flag agrees.
pub fn lma_accuracy(pred: &TosCurve, gt: &TosCurve, threshold_ms: f64) -> Result<f64> {
    check_len(pred, gt)?;
    let agree = classify_lma(pred, threshold_ms)
        .iter()
        .zip(classify_lma(gt, threshold_ms))
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(agree as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub tos_mse: f64,
    pub lma_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub tos_mse: f64,
    pub lma_accuracy: f64,
    pub per_case: Vec<CaseMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("bad report: {e}")))
    }

    /// `method,case_id,tos_mse,lma_accuracy`, one row per case.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,case_id,tos_mse,lma_accuracy\n");
        for c in &self.per_case {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", self.method, c.case_id, c.tos_mse, c.lma_accuracy));
        }
        s
    }
}

/// Per-case and overall (mean over cases) metrics.
pub fn evaluate(method: &str, case_ids: &[String], preds: &[TosCurve], gts: &[TosCurve], threshold_ms: f64) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.len() != case_ids.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "{} ids, {} predictions and {} ground truths",
            case_ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let per_case = case_ids
        .iter()
        .zip(preds.iter().zip(gts))
        .map(|(id, (p, g))| {
            Ok(CaseMetrics { case_id: id.clone(), tos_mse: tos_mse(p, g)?, lma_accuracy: lma_accuracy(p, g, threshold_ms)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_case.len() as f64;
    Ok(EvalReport {
        method: method.to_string(),
        tos_mse: per_case.iter().map(|c| c.tos_mse).sum::<f64>() / n,
        lma_accuracy: per_case.iter().map(|c| c.lma_accuracy).sum::<f64>() / n,
        per_case,
    })
}

/// Fixed-width method × metric table.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut s = format!("{:<16} {:>14} {:>14}\n", "method", "tos_mse_ms2", "lma_accuracy");
    for r in reports {
        s.push_str(&format!("{:<16} {:>14.2} {:>14.4}\n", r.method, r.tos_mse, r.lma_accuracy));
    }
    s
}

/// Reference arm: TOS extracted from the ground-truth DENSE strain.
pub fn oracle_dense(case: &PhantomCase) -> TosCurve {
    extract_tos(&case.gt_strain, DEFAULT_ONSET_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtConfig {
    pub reg: RegOperatorConfig,
    pub sigma: f64,
    pub iters: usize,
    pub step: f64,
}

impl Default for FtConfig {
    fn default() -> Self {
        // stiffer than the network's regulariser: with a = 1 the per-pair fit chases
        // image noise and the strain it yields is meaningless
        FtConfig { reg: RegOperatorConfig { a: 3.0, b: 0.1 }, sigma: 0.03, iters: 400, step: 0.002 }
    }
}

#[derive(Clone, Debug)]
pub struct FtResult {
    pub strain: StrainMatrix,
    pub tos: TosCurve,
    /// Lagrangian displacements on the cine time base.
    pub displacements: Vec<DisplacementField>,
    /// Registration energy per cine frame at the end of its descent.
    pub final_energy: Vec<f64>,
}

/// Gradient descent on `data + reg` for one image pair, starting from `u`.
/// `cfg.step` scales the per-pixel gradient (the gradient times the pixel
/// count), which keeps one step size stable across grid sizes. A step that
/// would raise the energy is retried at half length, so the energy never
/// increases. Returns the energy after every step (first entry: initial energy).
pub fn register_pair(i1: &[f64], it: &[f64], u: &mut DisplacementField, cfg: &FtConfig) -> Vec<f64> {
    let energy = |t: &crate::nn::Tensor<f64>| {
        let (d, mut g) = data_term_grad(i1, it, t, cfg.sigma);
        let (r, gr) = reg_term_grad(t, &cfg.reg);
        g.add_assign(&gr);
        (d + r, g)
    };
    let mut t = field_to_tensor::<f64>(u);
    let (mut e, mut g) = energy(&t);
    let mut energies = Vec::with_capacity(cfg.iters + 1);
    energies.push(e);
    for _ in 0..cfg.iters {
        let mut step = cfg.step * (u.h * u.w) as f64;
        for _ in 0..8 {
            let cand = t.with_data(t.data.iter().zip(&g.data).map(|(v, dv)| v - step * dv).collect());
            let (ec, gc) = energy(&cand);
            if ec <= e {
                (t, e, g) = (cand, ec, gc);
                break;
            }
            step *= 0.5;
        }
        energies.push(e);
    }
    *u = tensor_to_field(&t);
    energies
}

/// Converts a pull-back field `u` (frame-t pixel `x` came from `x + u(x)`)
/// to the Lagrangian displacement `U` with `X + U(X)` the frame-t position of `X`.
pub fn invert_field(u: &DisplacementField) -> DisplacementField {
    if u.is_zero() {
        return u.clone();
    }
    let (h, w) = (u.h, u.w);
    DisplacementField::from_fn(h, w, |x, y| {
        let (mut ux, mut uy) = (-bilinear_sample(&u.ux, h, w, x, y).0, -bilinear_sample(&u.uy, h, w, x, y).0);
        for _ in 0..30 {
            ux = -bilinear_sample(&u.ux, h, w, x + ux, y + uy).0;
            uy = -bilinear_sample(&u.uy, h, w, x + ux, y + uy).0;
        }
        [ux, uy]
    })
}

/// Per-frame variational registration of the cine sequence, no learning.
pub fn classical_ft(case: &PhantomCase, cfg: &FtConfig) -> Result<FtResult> {
    cfg.reg.validate()?;
    if !(cfg.sigma > 0.0 && cfg.step >= 0.0) {
        return Err(Error::invalid("sigma must be positive and step non-negative"));
    }
    let (h, w) = case.cine.shape();
    let i1 = &case.cine.frames[0].data;
    let mut u = DisplacementField::zeros(h, w);
    let mut displacements = vec![DisplacementField::zeros(h, w)];
    let mut final_energy = vec![0.0];
    for (t, frame) in case.cine.frames.iter().enumerate().skip(1) {
        let e = register_pair(i1, &frame.data, &mut u, cfg);
        let last = *e.last().unwrap();
        if !last.is_finite() || u.max_abs().is_nan() {
            return Err(Error::NonFinite {
                component: "registration".into(),
                detail: format!("cine frame {} diverged", t + 1),
            });
        }
        final_energy.push(last);
        displacements.push(invert_field(&u));
    }
    let partition = build_partition(&case.myocardium, case.spec.n_sectors)?;
    let strain = build_strain_matrix(&displacements, &case.myocardium, &partition, case.cine.dt_ms)?;
    let tos = extract_tos(&strain, DEFAULT_ONSET_THRESHOLD);
    Ok(FtResult { strain, tos, displacements, final_energy })
}

pub fn classical_ft_baseline(case: &PhantomCase, reg: &RegOperatorConfig, sigma: f64, iters: usize, step: f64) -> Result<TosCurve> {
    Ok(classical_ft(case, &FtConfig { reg: *reg, sigma, iters, step })?.tos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::strain::LMA_THRESHOLD_MS;
    use proptest::prelude::*;

    fn curve(v: &[f64]) -> TosCurve {
        TosCurve::new(v.to_vec())
    }

    #[test]
    fn metric_examples() {
        let gt = curve(&[17.0, 34.0, 51.0, 17.0]);
        assert_eq!(tos_mse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(lma_accuracy(&gt, &gt, 18.0).unwrap(), 1.0);
        let shifted = curve(&gt.values.iter().map(|v| v + 17.0).collect::<Vec<_>>());
        assert_eq!(tos_mse(&shifted, &gt).unwrap(), 289.0);
        assert_eq!(lma_accuracy(&curve(&[34.0; 4]), &curve(&[17.0; 4]), 18.0).unwrap(), 0.0);
        assert!(tos_mse(&gt, &curve(&[1.0])).is_err());
        assert!(lma_accuracy(&gt, &curve(&[1.0]), 18.0).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let ids = vec!["a".to_string()];
        let gt = curve(&[17.0, 40.0]);
        let r = evaluate("oracle", &ids, &[gt.clone()], &[gt.clone()], LMA_THRESHOLD_MS).unwrap();
        assert_eq!((r.tos_mse, r.lma_accuracy), (0.0, 1.0));
        let ids = vec!["a".to_string(), "b".to_string()];
        let p1 = curve(&[10.0, 10.0]);
        let p2 = curve(&[17.0 + 300f64.sqrt(), 40.0 - 300f64.sqrt()]);
        let g = curve(&[0.0, 0.0]);
        let g2 = curve(&[17.0, 40.0]);
        let r = evaluate("m", &ids, &[p1, p2], &[g, g2], 18.0).unwrap();
        assert!((r.per_case[0].tos_mse - 100.0).abs() < 1e-9);
        assert!((r.per_case[1].tos_mse - 300.0).abs() < 1e-9);
        assert!((r.tos_mse - 200.0).abs() < 1e-9);
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(evaluate("m", &ids, &[gt.clone()], &[gt.clone(), gt], 18.0).is_err());
    }

    #[test]
    fn table_has_one_row_per_method() {
        let gt = curve(&[17.0]);
        let ids = vec!["x".to_string()];
        let a = evaluate("oracle-dense", &ids, &[gt.clone()], &[gt.clone()], 18.0).unwrap();
        let t = comparison_table(&[a.clone(), EvalReport { method: "joint".into(), ..a }]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().all(|l| l.len() == t.lines().next().unwrap().len()));
    }

    fn small(peak: f64, pattern: Vec<u32>) -> PhantomSpec {
        PhantomSpec {
            grid_size: 32,
            n_sectors: 16,
            t_cine: 6,
            t_dense: 10,
            inner_radius: 6.0,
            outer_radius: 11.0,
            peak_contraction: peak,
            tos_pattern: pattern,
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn ft_on_static_or_untouched_cases_falls_back() {
        let still = generate_phantom(&small(0.0, vec![1; 16]), 0).unwrap();
        let tos = classical_ft_baseline(&still, &RegOperatorConfig::default(), 0.03, 20, 0.005).unwrap();
        assert!(tos.values.iter().all(|&v| v == 40.0 * 6.0));
        let moving = generate_phantom(&small(0.2, vec![1; 16]), 0).unwrap();
        let r = classical_ft(&moving, &FtConfig { iters: 0, ..Default::default() }).unwrap();
        assert!(r.strain.values.iter().all(|&v| v == 0.0));
        assert!(r.tos.values.iter().all(|&v| v == 240.0));
    }

    #[test]
    fn ft_descent_is_monotone() {
        let case = generate_phantom(&small(0.2, vec![1; 16]), 2).unwrap();
        let mut u = DisplacementField::zeros(32, 32);
        let e = register_pair(&case.cine.frames[0].data, &case.cine.frames[2].data, &mut u, &FtConfig::default());
        assert!(e.windows(2).all(|p| p[1] <= p[0]), "{e:?}");
        assert!(e.last().unwrap() < &e[0]);
    }

    #[test]
    fn inversion_recovers_lagrangian_motion() {
        let spec = PhantomSpec { tos_pattern: vec![1; 128], noise_sigma: 0.0, ..Default::default() };
        let lag = crate::phantom::motion_at(&spec, 10).unwrap();
        // pull-back field of the known motion: u(x) = φ⁻¹(x) − x
        let (h, w) = (lag.h, lag.w);
        let pull = DisplacementField::from_fn(h, w, |x, y| {
            let (mut px, mut py) = (x, y);
            for _ in 0..40 {
                px = x - bilinear_sample(&lag.ux, h, w, px, py).0;
                py = y - bilinear_sample(&lag.uy, h, w, px, py).0;
            }
            [px - x, py - y]
        });
        let back = invert_field(&pull);
        let c = spec.centre();
        for r in 0..h {
            for col in 0..w {
                let rad = ((col as f64 - c[0]).powi(2) + (r as f64 - c[1]).powi(2)).sqrt();
                if rad <= spec.outer_radius {
                    let i = r * w + col;
                    let err = (back.ux[i] - lag.ux[i]).abs().max((back.uy[i] - lag.uy[i]).abs());
                    assert!(err < 0.05, "({col},{r}) rad {rad}: {err} {:?} {:?}", (back.ux[i], back.uy[i]), (lag.ux[i], lag.uy[i]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mse_is_a_squared_metric(a in proptest::collection::vec(0.0f64..200.0, 8),
                                   b in proptest::collection::vec(0.0f64..200.0, 8),
                                   c in proptest::collection::vec(0.0f64..200.0, 8)) {
            let (a, b, c) = (curve(&a), curve(&b), curve(&c));
            prop_assert_eq!(tos_mse(&a, &b).unwrap(), tos_mse(&b, &a).unwrap());
            prop_assert_eq!(tos_mse(&a, &a).unwrap(), 0.0);
            let d = |x: &TosCurve, y: &TosCurve| tos_mse(x, y).unwrap().sqrt();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        }

        #[test]
        fn permutation_invariance(v in proptest::collection::vec(0.0f64..200.0, 6), g in proptest::collection::vec(0.0f64..200.0, 6), k in 0usize..6) {
            let (p, q) = (curve(&v), curve(&g));
            let mut pv = v.clone();
            let mut gv = g.clone();
            pv.rotate_left(k);
            gv.rotate_left(k);
            prop_assert!((tos_mse(&p, &q).unwrap() - tos_mse(&curve(&pv), &curve(&gv)).unwrap()).abs() < 1e-9);
            prop_assert_eq!(lma_accuracy(&p, &q, 18.0).unwrap(), lma_accuracy(&curve(&pv), &curve(&gv), 18.0).unwrap());
        }

        #[test]
        fn sub_threshold_nudges_keep_flags(v in proptest::collection::vec(0.0f64..60.0, 10)) {
            let p = curve(&v);
            let nudged = curve(&v.iter().map(|&x| if x < 17.5 { x + 0.5 } else { x }).collect::<Vec<_>>());
            prop_assert_eq!(classify_lma(&p, 18.0), classify_lma(&nudged, 18.0));
        }

        #[test]
        fn monotone_transforms_preserve_accuracy(v in proptest::collection::vec(0.0f64..100.0, 10), g in proptest::collection::vec(0.0f64..100.0, 10)) {
            // strictly increasing and fixing 18: x ↦ 18 + (x − 18)·3 above, cube-ish below
            let f = |x: f64| if x > 18.0 { 18.0 + 3.0 * (x - 18.0) } else { 18.0 - (18.0 - x).powf(1.5) };
            let tp = curve(&v.iter().map(|&x| f(x)).collect::<Vec<_>>());
            let tg = curve(&g.iter().map(|&x| f(x)).collect::<Vec<_>>());
            prop_assert_eq!(lma_accuracy(&curve(&v), &curve(&g), 18.0).unwrap(), lma_accuracy(&tp, &tg, 18.0).unwrap());
        }
    }
}
