#![allow(dead_code)]

use densecine::joint::{CaseInput, JointModel, LossWeights, ModelConfig};
use densecine::nn::ParamStore;
use densecine::phantom::{generate_phantom, PhantomCase, PhantomSpec};
use densecine::registration::RegNetConfig;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 16² grid, 8 sectors, 4 DENSE frames.
pub fn reduced_case(seed: u64) -> PhantomCase {
    reduced_case_with_noise(seed, 0.02)
}

pub fn reduced_case_with_noise(seed: u64, noise_sigma: f64) -> PhantomCase {
    let spec = PhantomSpec {
        grid_size: 16,
        n_sectors: 8,
        t_dense: 4,
        t_cine: 3,
        inner_radius: 3.0,
        outer_radius: 6.5,
        tos_pattern: vec![1, 1, 2, 2, 2, 1, 1, 1],
        texture_seed: seed,
        noise_sigma,
        ..Default::default()
    };
    generate_phantom(&spec, seed).unwrap()
}

pub fn reduced_model_config() -> ModelConfig {
    ModelConfig {
        grid_size: 16,
        n_sectors: 8,
        t_dense: 4,
        dense_dt_ms: 17.0,
        registration: RegNetConfig { levels: 2, base_width: 4 },
        strain_width: 4,
        lma_width: 8,
    }
}

pub fn reduced_weights() -> LossWeights {
    LossWeights { svd_rank: 4, ..Default::default() }
}

/// Freshly initialised reduced model with every parameter jittered so the
/// displacement head is non-zero and no activation sits at a special point.
pub fn jittered_model(seed: u64) -> JointModel<f64> {
    let mut m = JointModel::<f64>::init(reduced_model_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for store in [&mut m.reg.store, &mut m.strain.store, &mut m.lma.store] {
        for v in store.values.iter_mut().flatten() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    m
}

#[derive(Debug)]
pub struct GroupCheck {
    pub group: &'static str,
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GroupCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

fn flat_index(store: &ParamStore<f64>, k: usize) -> (usize, usize) {
    let mut k = k;
    for (p, v) in store.values.iter().enumerate() {
        if k < v.len() {
            return (p, k);
        }
        k -= v.len();
    }
    unreachable!()
}

/// Central-difference check of `joint_loss` on `per_group` random parameters of each group.
pub fn joint_gradcheck(model: &JointModel<f64>, case: &PhantomCase, w: &LossWeights, per_group: usize, step: f64, tol: f64, seed: u64) -> Vec<GroupCheck> {
    let input = CaseInput::<f64>::from_case(case);
    let (_, grads) = model.loss_and_grad(&[&input], w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (gi, group) in ["theta_r", "theta_s", "theta_l"].into_iter().enumerate() {
        let store = match gi {
            0 => &model.reg.store,
            1 => &model.strain.store,
            _ => &model.lma.store,
        };
        let g = match gi {
            0 => &grads.reg,
            1 => &grads.strain,
            _ => &grads.lma,
        };
        let total = store.n_scalars();
        let picks = sample(&mut rng, total, per_group.min(total));
        let mut check = GroupCheck { group, checked: 0, passed: 0, worst: 0.0 };
        for k in picks.iter() {
            let (p, i) = flat_index(store, k);
            let eval = |delta: f64| {
                let mut m = model.clone();
                let s = match gi {
                    0 => &mut m.reg.store,
                    1 => &mut m.strain.store,
                    _ => &mut m.lma.store,
                };
                s.values[p][i] += delta;
                m.joint_loss(&input, w).unwrap().total
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let e = rel_err(g.0[p][i], fd);
            check.checked += 1;
            if e < tol {
                check.passed += 1;
            }
            check.worst = check.worst.max(e);
        }
        out.push(check);
    }
    out
}
