//! Strain head, LMA head, the joint loss and the training loop.
//!
//! ```text
//! l_strain = Σ_t [ data_t + reg_t ] + α·mean((f_s(z) − S)²) + λ‖θ_r‖² + μ‖θ_s‖²
//! l_tos    = β·mean((f_l(f_s(z)) − y)²) + γ‖θ_l‖²
//! ```
//!
//! `f_s` predicts one strain column per frame from that frame's latent `z_t`
//! and the stacked `N × T` matrix is projected to rank `svd_rank`. `f_l` is a
//! circular convolution over sectors mapping the strain matrix to TOS.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, Adam, Conv1dCircular, Conv2d, Grads, Init, Linear, ParamStore,
    Real, Tensor,
};
use crate::phantom::PhantomCase;
use crate::registration::{
    data_term_grad, image_to_vec, reg_term_grad, RegForward, RegNetConfig, RegOperatorConfig, RegistrationParams,
};
use crate::strain::{classify_lma, low_rank_decompose, StrainMatrix, TosCurve, LMA_THRESHOLD_MS};

/// Loss weights. Defaults are the published optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sigma: f64,
    pub alpha: f64,
    pub lambda_r: f64,
    pub mu: f64,
    pub beta: f64,
    pub gamma: f64,
    pub svd_rank: usize,
    pub reg: RegOperatorConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sigma: 0.03,
            alpha: 1000.0,
            lambda_r: 1e-4,
            mu: 1e-4,
            beta: 0.005,
            gamma: 1e-4,
            svd_rank: 6,
            reg: RegOperatorConfig::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self, n_sectors: usize, t_dense: usize) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_r", self.lambda_r),
            ("mu", self.mu),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        let max_rank = n_sectors.min(t_dense);
        if self.svd_rank == 0 || self.svd_rank > max_rank {
            return Err(Error::invalid(format!("svd_rank {} outside 1..={max_rank}", self.svd_rank)));
        }
        self.reg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, batch_size: 4, learning_rate: 1e-3, seed: 0, checkpoint_dir: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Architecture of the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub grid_size: usize,
    pub n_sectors: usize,
    pub t_dense: usize,
    pub dense_dt_ms: f64,
    pub registration: RegNetConfig,
    pub strain_width: usize,
    pub lma_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_size: 64,
            n_sectors: 128,
            t_dense: 20,
            dense_dt_ms: 17.0,
            registration: RegNetConfig::default(),
            strain_width: 16,
            lma_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        let d = self.registration.downsample() * 2;
        if self.grid_size == 0 || self.grid_size % d != 0 {
            return Err(Error::invalid(format!("grid_size {} must be a multiple of {d}", self.grid_size)));
        }
        if self.n_sectors < 4 || self.t_dense < 2 || self.strain_width == 0 || self.lma_width == 0 {
            return Err(Error::invalid("model dimensions too small"));
        }
        if !(self.dense_dt_ms > 0.0) {
            return Err(Error::invalid("dense_dt_ms must be positive"));
        }
        Ok(())
    }
}

/// Residual convolutional encoder from one frame's latent to one strain column.
#[derive(Clone, Debug)]
pub struct StrainHead {
    conv_in: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
    out: Linear,
}

struct StrainHeadCache<F> {
    z: Tensor<F>,
    h0_pre: Tensor<F>,
    a: Tensor<F>,
    r1_pre: Tensor<F>,
    r1: Tensor<F>,
    h2_pre: Tensor<F>,
    pooled: Tensor<F>,
}

impl StrainHead {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let cz = cfg.registration.latent_channels();
        let side = cfg.grid_size / cfg.registration.downsample() / 2;
        let width = cfg.strain_width;
        let conv_in = Conv2d::new(store, "strain.conv_in", cz, width, 3, Init::He, rng);
        let res_a = Conv2d::new(store, "strain.res.conv1", width, width, 3, Init::He, rng);
        let res_b = Conv2d::new(store, "strain.res.conv2", width, width, 3, Init::He, rng);
        let out = Linear::new(store, "strain.out", width * side * side, cfg.n_sectors, Init::Lecun, rng);
        // start near zero strain
        for v in &mut store.values[out.weight] {
            *v *= F::lit(0.1);
        }
        StrainHead { conv_in, res_a, res_b, out }
    }

    fn forward<F: Real>(&self, store: &ParamStore<F>, z: &Tensor<F>) -> (Vec<F>, StrainHeadCache<F>) {
        let h0_pre = self.conv_in.forward(store, z);
        let a = silu(&h0_pre);
        let r1_pre = self.res_a.forward(store, &a);
        let r1 = silu(&r1_pre);
        let h2_pre = a.add(&self.res_b.forward(store, &r1));
        let pooled = avg_pool2(&silu(&h2_pre));
        let col = self.out.forward(store, &pooled.data);
        (col, StrainHeadCache { z: z.clone(), h0_pre, a, r1_pre, r1, h2_pre, pooled })
    }

    fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, c: &StrainHeadCache<F>, dcol: &[F]) -> Tensor<F> {
        let dp = self.out.backward(store, grads, &c.pooled.data, dcol);
        let dh2 = avg_pool2_backward(&c.pooled.with_data(dp));
        let dh2_pre = silu_backward(&c.h2_pre, &dh2);
        let dr1 = self.res_b.backward(store, grads, &c.r1, &dh2_pre, true).unwrap();
        let dr1_pre = silu_backward(&c.r1_pre, &dr1);
        let mut da = self.res_a.backward(store, grads, &c.a, &dr1_pre, true).unwrap();
        da.add_assign(&dh2_pre);
        let dh0 = silu_backward(&c.h0_pre, &da);
        self.conv_in.backward(store, grads, &c.z, &dh0, true).unwrap()
    }
}

/// Scale applied to strain values entering the LMA head.
const LMA_INPUT_SCALE: f64 = 10.0;
/// The LMA head predicts `TOS = dt·(out + LMA_OFFSET_FRAMES)`.
const LMA_OFFSET_FRAMES: f64 = 1.0;

/// Circular convolution over sectors from the strain matrix to TOS.
#[derive(Clone, Debug)]
pub struct LmaHead {
    c1: Conv1dCircular,
    c2: Conv1dCircular,
    c3: Conv1dCircular,
}

struct LmaCache<F> {
    x: Tensor<F>,
    p1: Tensor<F>,
    a1: Tensor<F>,
    p2: Tensor<F>,
    a2: Tensor<F>,
}

impl LmaHead {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.lma_width;
        LmaHead {
            c1: Conv1dCircular::new(store, "lma.conv1", cfg.t_dense, w, 3, Init::He, rng),
            c2: Conv1dCircular::new(store, "lma.conv2", w, w, 3, Init::He, rng),
            c3: Conv1dCircular::new(store, "lma.out", w, 1, 1, Init::Lecun, rng),
        }
    }

    /// `s` is the `N × T` strain matrix (row-major). Returns raw outputs per sector.
    fn forward<F: Real>(&self, store: &ParamStore<F>, s: &StrainMatrix) -> (Vec<F>, LmaCache<F>) {
        let (n, t) = (s.n_sectors, s.n_frames);
        let mut x = Tensor::zeros(t, 1, n);
        for sec in 0..n {
            for f in 0..t {
                x.data[f * n + sec] = F::lit(LMA_INPUT_SCALE * s.get(sec, f));
            }
        }
        let p1 = self.c1.forward(store, &x);
        let a1 = silu(&p1);
        let p2 = self.c2.forward(store, &a1);
        let a2 = silu(&p2);
        let out = self.c3.forward(store, &a2).data;
        (out, LmaCache { x, p1, a1, p2, a2 })
    }

    /// Returns the gradient with respect to the strain matrix (`N × T`, row-major).
    fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, c: &LmaCache<F>, dout: &[F]) -> Vec<f64> {
        let n = c.x.w;
        let t = c.x.c;
        let dy = Tensor::from_vec(1, 1, n, dout.to_vec());
        let da2 = self.c3.backward(store, grads, &c.a2, &dy, true).unwrap();
        let dp2 = silu_backward(&c.p2, &da2);
        let da1 = self.c2.backward(store, grads, &c.a1, &dp2, true).unwrap();
        let dp1 = silu_backward(&c.p1, &da1);
        let dx = self.c1.backward(store, grads, &c.x, &dp1, true).unwrap();
        let mut ds = vec![0.0; n * t];
        for sec in 0..n {
            for f in 0..t {
                ds[sec * t + f] = LMA_INPUT_SCALE * dx.data[f * n + sec].to_f64().unwrap();
            }
        }
        ds
    }
}

#[derive(Clone, Debug)]
pub struct StrainHeadParams<F = f32> {
    pub head: StrainHead,
    pub store: ParamStore<F>,
}

#[derive(Clone, Debug)]
pub struct LmaHeadParams<F = f32> {
    pub head: LmaHead,
    pub store: ParamStore<F>,
}

/// All three parameter groups with their architecture.
#[derive(Clone, Debug)]
pub struct JointModel<F = f32> {
    pub config: ModelConfig,
    pub reg: RegistrationParams<F>,
    pub strain: StrainHeadParams<F>,
    pub lma: LmaHeadParams<F>,
}

/// Gradients for the three parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrads<F> {
    pub reg: Grads<F>,
    pub strain: Grads<F>,
    pub lma: Grads<F>,
}

impl<F: Real> JointGrads<F> {
    fn add(&mut self, o: &JointGrads<F>) {
        self.reg.add(&o.reg);
        self.strain.add(&o.strain);
        self.lma.add(&o.lma);
    }

    fn scale(&mut self, s: F) {
        self.reg.scale(s);
        self.strain.scale(s);
        self.lma.scale(s);
    }
}

/// Weighted loss components. `total` is accumulated independently of the
/// components so that bookkeeping can be cross-checked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub reg: f64,
    pub strain_sup: f64,
    pub tos_mse: f64,
    pub l2_r: f64,
    pub l2_s: f64,
    pub l2_l: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 7] = ["data", "reg", "strain_sup", "tos_mse", "l2_r", "l2_s", "l2_l"];

    pub fn components(&self) -> [f64; 7] {
        [self.data, self.reg, self.strain_sup, self.tos_mse, self.l2_r, self.l2_s, self.l2_l]
    }

    pub fn component_sum(&self) -> f64 {
        self.components().iter().sum()
    }

    pub fn strain_loss(&self) -> f64 {
        self.data + self.reg + self.strain_sup + self.l2_r + self.l2_s
    }

    pub fn tos_loss(&self) -> f64 {
        self.tos_mse + self.l2_l
    }

    /// Names the first non-finite component.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (name, v) in Self::COLUMNS.iter().zip(self.components()).chain([(&"total", self.total)]) {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name.to_string(), detail: format!("{context}: value {v}") });
            }
        }
        Ok(())
    }

    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.data += s * o.data;
        self.reg += s * o.reg;
        self.strain_sup += s * o.strain_sup;
        self.tos_mse += s * o.tos_mse;
        self.l2_r += s * o.l2_r;
        self.l2_s += s * o.l2_s;
        self.l2_l += s * o.l2_l;
        self.total += s * o.total;
    }
}

/// Network inputs and targets of one case.
#[derive(Clone, Debug)]
pub struct CaseInput<F> {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<Vec<F>>,
    pub gt_strain: StrainMatrix,
    pub gt_tos: TosCurve,
}

impl<F: Real> CaseInput<F> {
    pub fn from_case(case: &PhantomCase) -> Self {
        let (h, w) = case.dense.shape();
        CaseInput {
            id: format!("seed{}", case.seed),
            h,
            w,
            frames: case.dense.frames.iter().map(image_to_vec).collect(),
            gt_strain: case.gt_strain.clone(),
            gt_tos: case.gt_tos.clone(),
        }
    }
}

/// Model outputs for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub raw_strain: StrainMatrix,
    pub strain: StrainMatrix,
    pub tos: TosCurve,
}

/// Predicted strain matrix for stacked latents `z` (one per frame).
pub fn strain_forward<F: Real>(theta_s: &StrainHeadParams<F>, z: &[Tensor<F>], svd_rank: usize, dt_ms: f64) -> Result<StrainMatrix> {
    let raw = raw_strain(theta_s, z, dt_ms)?.0;
    crate::strain::low_rank_project(&raw, svd_rank)
}

fn raw_strain<F: Real>(theta_s: &StrainHeadParams<F>, z: &[Tensor<F>], dt_ms: f64) -> Result<(StrainMatrix, Vec<StrainHeadCache<F>>)> {
    let n = theta_s.head.out.n_out;
    let t = z.len();
    if t == 0 {
        return Err(Error::shape("no latent frames"));
    }
    let expect = theta_s.head.conv_in.cin;
    let side2 = theta_s.head.out.n_in / theta_s.head.conv_in.cout * 4;
    let mut raw = StrainMatrix::zeros(n, t, dt_ms);
    let mut caches = Vec::with_capacity(t);
    for (f, zt) in z.iter().enumerate() {
        if zt.c != expect || zt.plane() != side2 {
            return Err(Error::shape(format!(
                "latent frame {f} has shape ({}, {}, {}), expected {expect} channels and {side2} pixels",
                zt.c, zt.h, zt.w
            )));
        }
        let (col, cache) = theta_s.head.forward(&theta_s.store, zt);
        for (sec, v) in col.iter().enumerate() {
            raw.set(sec, f, v.to_f64().unwrap());
        }
        caches.push(cache);
    }
    Ok((raw, caches))
}

/// TOS (ms) predicted by the LMA head from a strain matrix.
pub fn lma_forward<F: Real>(theta_l: &LmaHeadParams<F>, s: &StrainMatrix, dt_ms: f64) -> Result<TosCurve> {
    if s.n_frames != theta_l.head.c1.cin {
        return Err(Error::shape(format!("strain matrix has {} frames, head expects {}", s.n_frames, theta_l.head.c1.cin)));
    }
    let out = theta_l.head.forward(&theta_l.store, s).0;
    Ok(TosCurve::new(out.iter().map(|o| dt_ms * (o.to_f64().unwrap() + LMA_OFFSET_FRAMES)).collect()))
}

/// `β·mean((f_l(S) − y)²) + γ‖θ_l‖²`.
pub fn tos_loss<F: Real>(theta_l: &LmaHeadParams<F>, s_pred: &StrainMatrix, y: &TosCurve, w: &LossWeights, dt_ms: f64) -> Result<f64> {
    if y.len() != s_pred.n_sectors {
        return Err(Error::shape(format!("TOS has {} sectors, strain matrix {}", y.len(), s_pred.n_sectors)));
    }
    let tos = lma_forward(theta_l, s_pred, dt_ms)?;
    let mse = tos.values.iter().zip(&y.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    Ok(w.beta * mse + w.gamma * theta_l.store.sq_norm())
}

impl<F: Real> JointModel<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg_store = ParamStore::new();
        let net = crate::registration::RegNet::new(&mut reg_store, config.registration, &mut rng);
        let mut s_store = ParamStore::new();
        let head = StrainHead::new(&mut s_store, &config, &mut rng);
        let mut l_store = ParamStore::new();
        let lma = LmaHead::new(&mut l_store, &config, &mut rng);
        Ok(JointModel {
            config,
            reg: RegistrationParams { net, store: reg_store },
            strain: StrainHeadParams { head, store: s_store },
            lma: LmaHeadParams { head: lma, store: l_store },
        })
    }

    pub fn zero_grads(&self) -> JointGrads<F> {
        JointGrads { reg: self.reg.store.zero_grads(), strain: self.strain.store.zero_grads(), lma: self.lma.store.zero_grads() }
    }

    pub fn cast<G: Real>(&self) -> JointModel<G> {
        JointModel {
            config: self.config.clone(),
            reg: RegistrationParams { net: self.reg.net.clone(), store: self.reg.store.cast() },
            strain: StrainHeadParams { head: self.strain.head.clone(), store: self.strain.store.cast() },
            lma: LmaHeadParams { head: self.lma.head.clone(), store: self.lma.store.cast() },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reg.store.is_finite() && self.strain.store.is_finite() && self.lma.store.is_finite()
    }

    fn check_input(&self, input: &CaseInput<F>) -> Result<()> {
        let c = &self.config;
        if input.frames.len() != c.t_dense || input.h != c.grid_size || input.w != c.grid_size {
            return Err(Error::shape(format!(
                "case {} has {} frames of {}×{}, model expects {} frames of {}²",
                input.id,
                input.frames.len(),
                input.h,
                input.w,
                c.t_dense,
                c.grid_size
            )));
        }
        if input.gt_strain.n_sectors != c.n_sectors || input.gt_tos.len() != c.n_sectors {
            return Err(Error::shape(format!("case {} has a different sector count than the model", input.id)));
        }
        Ok(())
    }

    /// Strain matrix and TOS for one case.
    pub fn predict(&self, input: &CaseInput<F>, svd_rank: usize) -> Result<Prediction> {
        self.check_input(input)?;
        let z: Vec<Tensor<F>> = input
            .frames
            .iter()
            .map(|it| self.reg.net.forward(&self.reg.store, &input.frames[0], it, input.h, input.w).z().clone())
            .collect();
        let (raw, _) = raw_strain(&self.strain, &z, self.config.dense_dt_ms)?;
        let strain = crate::strain::low_rank_project(&raw, svd_rank)?;
        let tos = lma_forward(&self.lma, &strain, self.config.dense_dt_ms)?;
        Ok(Prediction { raw_strain: raw, strain, tos })
    }

    pub fn predict_case(&self, case: &PhantomCase, svd_rank: usize) -> Result<Prediction> {
        self.predict(&CaseInput::from_case(case), svd_rank)
    }

    /// Per-case loss terms (everything except weight decay), optionally with gradients.
    fn case_terms(&self, input: &CaseInput<F>, w: &LossWeights, need_grad: bool) -> Result<(LossBreakdown, Option<JointGrads<F>>)> {
        self.check_input(input)?;
        let (h, wd) = (input.h, input.w);
        let dt = self.config.dense_dt_ms;
        let i1 = &input.frames[0];
        let mut out = LossBreakdown::default();
        let mut fwd: Vec<RegForward<F>> = Vec::with_capacity(input.frames.len());
        let mut du: Vec<Tensor<F>> = Vec::new();
        let mut z: Vec<Tensor<F>> = Vec::with_capacity(input.frames.len());
        for it in &input.frames {
            let f = self.reg.net.forward(&self.reg.store, i1, it, h, wd);
            let (dv, mut dg) = data_term_grad(i1, it, &f.u, w.sigma);
            let (rv, rg) = reg_term_grad(&f.u, &w.reg);
            out.data += dv;
            out.reg += rv;
            out.total += dv + rv;
            z.push(f.z().clone());
            if need_grad {
                dg.add_assign(&rg);
                du.push(dg);
                fwd.push(f);
            }
        }
        let (raw, s_caches) = raw_strain(&self.strain, &z, dt)?;
        let proj = low_rank_decompose(&raw, w.svd_rank)?;
        let s_pred = &proj.output;
        let (n, t) = (s_pred.n_sectors, s_pred.n_frames);
        let nt = (n * t) as f64;
        let mut sup = 0.0;
        let mut dp = vec![0.0; n * t];
        for i in 0..n * t {
            let r = s_pred.values[i] - input.gt_strain.values[i];
            sup += r * r;
            dp[i] = 2.0 * w.alpha * r / nt;
        }
        out.strain_sup = w.alpha * sup / nt;
        let (lma_out, lma_cache) = self.lma.head.forward(&self.lma.store, s_pred);
        let mut mse = 0.0;
        let mut dout = Vec::with_capacity(n);
        for (o, y) in lma_out.iter().zip(&input.gt_tos.values) {
            let tos = dt * (o.to_f64().unwrap() + LMA_OFFSET_FRAMES);
            mse += (tos - y).powi(2);
            dout.push(F::lit(2.0 * w.beta * (tos - y) / n as f64 * dt));
        }
        out.tos_mse = w.beta * mse / n as f64;
        out.total += out.strain_sup + out.tos_mse;
        if !need_grad {
            return Ok((out, None));
        }

        let mut grads = self.zero_grads();
        let ds_lma = self.lma.head.backward(&self.lma.store, &mut grads.lma, &lma_cache, &dout);
        for (a, b) in dp.iter_mut().zip(&ds_lma) {
            *a += b;
        }
        let draw = proj.project_tangent(&DMatrix::from_row_slice(n, t, &dp));
        for (f, cache) in s_caches.iter().enumerate() {
            let dcol: Vec<F> = (0..n).map(|sec| F::lit(draw[(sec, f)])).collect();
            let dz = self.strain.head.backward(&self.strain.store, &mut grads.strain, cache, &dcol);
            self.reg.net.backward(&self.reg.store, &mut grads.reg, &fwd[f], &du[f], Some(&dz));
        }
        Ok((out, Some(grads)))
    }

    fn add_weight_decay(&self, out: &mut LossBreakdown, grads: Option<&mut JointGrads<F>>, w: &LossWeights) {
        out.l2_r = w.lambda_r * self.reg.store.sq_norm();
        out.l2_s = w.mu * self.strain.store.sq_norm();
        out.l2_l = w.gamma * self.lma.store.sq_norm();
        out.total += out.l2_r + out.l2_s + out.l2_l;
        if let Some(g) = grads {
            g.reg.add_weight_decay(&self.reg.store, w.lambda_r);
            g.strain.add_weight_decay(&self.strain.store, w.mu);
            g.lma.add_weight_decay(&self.lma.store, w.gamma);
        }
    }

    /// Joint loss of one case, itemised.
    pub fn joint_loss(&self, input: &CaseInput<F>, w: &LossWeights) -> Result<LossBreakdown> {
        w.validate(self.config.n_sectors, self.config.t_dense)?;
        let (mut out, _) = self.case_terms(input, w, false)?;
        self.add_weight_decay(&mut out, None, w);
        Ok(out)
    }

    /// Strain loss of one case (TOS components are zero).
    pub fn strain_loss(&self, input: &CaseInput<F>, w: &LossWeights) -> Result<LossBreakdown> {
        let mut b = self.joint_loss(input, w)?;
        b.total -= b.tos_mse + b.l2_l;
        b.tos_mse = 0.0;
        b.l2_l = 0.0;
        Ok(b)
    }

    /// Loss and gradients averaged over `batch`, plus weight decay.
    pub fn loss_and_grad(&self, batch: &[&CaseInput<F>], w: &LossWeights) -> Result<(LossBreakdown, JointGrads<F>)> {
        w.validate(self.config.n_sectors, self.config.t_dense)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut out = LossBreakdown::default();
        let mut grads = self.zero_grads();
        for input in batch {
            let (b, g) = self.case_terms(input, w, true)?;
            b.check_finite(&format!("case {}", input.id))?;
            out.add_scaled(&b, scale);
            grads.add(&g.expect("requested"));
        }
        grads.scale(F::lit(scale));
        self.add_weight_decay(&mut out, Some(&mut grads), w);
        Ok((out, grads))
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_tos_mse: f64,
    pub val_lma_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Parameters at the epoch with the lowest validation TOS MSE.
    pub model: JointModel<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Every optimizer step's batch loss.
    pub steps: Vec<LossBreakdown>,
}

/// Per-epoch component CSV: `epoch,data,reg,strain_sup,tos_mse,l2_r,l2_s,l2_l,total`.
pub fn loss_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,data,reg,strain_sup,tos_mse,l2_r,l2_s,l2_l,total\n");
    for e in history {
        let c = e.train.components();
        s.push_str(&format!("{}", e.epoch));
        for v in c.iter().chain([&e.train.total]) {
            s.push_str(&format!(",{v:.9e}"));
        }
        s.push('\n');
    }
    s
}

/// Validation CSV: `epoch,val_tos_mse,val_lma_accuracy`.
pub fn validation_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,val_tos_mse,val_lma_accuracy\n");
    for e in history {
        s.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.val_tos_mse, e.val_lma_accuracy));
    }
    s
}

fn validation_metrics(model: &JointModel<f32>, val: &[CaseInput<f32>], rank: usize) -> Result<(f64, f64)> {
    let (mut mse, mut acc) = (0.0, 0.0);
    for input in val {
        let p = model.predict(input, rank)?;
        let gt = &input.gt_tos.values;
        mse += p.tos.values.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / gt.len() as f64;
        let flags = classify_lma(&p.tos, LMA_THRESHOLD_MS);
        let gflags = classify_lma(&input.gt_tos, LMA_THRESHOLD_MS);
        acc += flags.iter().zip(&gflags).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64;
    }
    let n = val.len().max(1) as f64;
    Ok((mse / n, acc / n))
}

/// Trains all three parameter groups jointly with Adam.
///
/// `val` selects the returned checkpoint; when empty the training set is used.
pub fn train_joint(
    train: &[PhantomCase],
    val: &[PhantomCase],
    model_cfg: &ModelConfig,
    w: &LossWeights,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.validate()?;
    model_cfg.validate()?;
    w.validate(model_cfg.n_sectors, model_cfg.t_dense)?;
    let train_in: Vec<CaseInput<f32>> = train.iter().map(CaseInput::from_case).collect();
    let val_in: Vec<CaseInput<f32>> =
        if val.is_empty() { train_in.clone() } else { val.iter().map(CaseInput::from_case).collect() };

    let mut model = JointModel::<f32>::init(model_cfg.clone(), cfg.seed)?;
    let mut opt_r = Adam::new(&model.reg.store, cfg.learning_rate);
    let mut opt_s = Adam::new(&model.strain.store, cfg.learning_rate);
    let mut opt_l = Adam::new(&model.lma.store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_5EED);
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, JointModel<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CaseInput<f32>> = chunk.iter().map(|&i| &train_in[i]).collect();
            let (loss, grads) = model.loss_and_grad(&batch, w).map_err(|e| match e {
                Error::NonFinite { component, detail } => {
                    Error::NonFinite { component, detail: format!("epoch {epoch}, {detail}") }
                }
                e => e,
            })?;
            loss.check_finite(&format!("epoch {epoch}"))?;
            opt_r.step(&mut model.reg.store, &grads.reg);
            opt_s.step(&mut model.strain.store, &grads.strain);
            opt_l.step(&mut model.lma.store, &grads.lma);
            if !model.is_finite() {
                return Err(Error::NonFinite { component: "parameters".into(), detail: format!("epoch {epoch} after update") });
            }
            epoch_loss.add_scaled(&loss, chunk.len() as f64 / train_in.len() as f64);
            steps.push(loss);
        }
        let (val_mse, val_acc) = validation_metrics(&model, &val_in, w.svd_rank)?;
        let log = EpochLog { epoch, train: epoch_loss, val_tos_mse: val_mse, val_lma_accuracy: val_acc };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().map_or(true, |b| val_mse < b.0) {
            best = Some((val_mse, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    if let Some(dir) = &cfg.checkpoint_dir {
        crate::io::save_model(dir, &model)?;
        crate::io::write_text(dir.join("loss.csv"), &loss_csv(&history))?;
        crate::io::write_text(dir.join("validation.csv"), &validation_csv(&history))?;
    }
    Ok(TrainResult { model, best_epoch, history, steps })
}
