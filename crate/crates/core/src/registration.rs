//! Registration network and its energy terms.
//!
//! The network is a small U-Net: it takes the pair `(I_1, I_t)` and predicts
//! the Lagrangian displacement `u_t` (in pixels) so that `I_1(x + u_t(x)) ≈ I_t(x)`.
//! Its bottleneck activation is the latent motion feature used by the strain head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward, Conv2d, Grads, Init, ParamStore,
    Real, Tensor,
};
use crate::strain::{bilinear_sample, DisplacementField, Image};

/// Weights of `(−aΔ + b)` in the smoothness penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegOperatorConfig {
    pub a: f64,
    pub b: f64,
}

impl Default for RegOperatorConfig {
    fn default() -> Self {
        RegOperatorConfig { a: 1.0, b: 0.1 }
    }
}

impl RegOperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::invalid(format!(
                "regularizer weights must be positive (a = {}, b = {})",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegNetConfig {
    /// Resolution levels; the bottleneck sits at `1 / 2^(levels−1)` resolution.
    pub levels: usize,
    /// Channels at full resolution; doubled per level.
    pub base_width: usize,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        RegNetConfig { levels: 3, base_width: 16 }
    }
}

impl RegNetConfig {
    pub fn latent_channels(&self) -> usize {
        self.base_width << (self.levels - 1)
    }

    pub fn downsample(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 {
            return Err(Error::invalid("registration network needs ≥ 1 level and width"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
struct BlockCache<F> {
    input: Tensor<F>,
    a_pre: Tensor<F>,
    a_post: Tensor<F>,
    b_pre: Tensor<F>,
    out: Tensor<F>,
}

impl Block {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            a: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, Init::He, rng),
            b: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, Init::He, rng),
        }
    }

    fn forward<F: Real>(&self, store: &ParamStore<F>, input: Tensor<F>) -> BlockCache<F> {
        let a_pre = self.a.forward(store, &input);
        let a_post = silu(&a_pre);
        let b_pre = self.b.forward(store, &a_post);
        let out = silu(&b_pre);
        BlockCache { input, a_pre, a_post, b_pre, out }
    }

    fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, c: &BlockCache<F>, dout: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let db = silu_backward(&c.b_pre, dout);
        let da_post = self.b.backward(store, grads, &c.a_post, &db, true).expect("requested");
        let da = silu_backward(&c.a_pre, &da_post);
        self.a.backward(store, grads, &c.input, &da, need_dx)
    }
}

/// Encoder–decoder with additive skip connections and a zero-initialised
/// two-channel displacement head.
#[derive(Clone, Debug)]
pub struct RegNet {
    pub config: RegNetConfig,
    enc: Vec<Block>,
    /// `skip[l]`: 1×1 conv from level `l+1` channels to level `l` channels.
    skip: Vec<Conv2d>,
    dec: Vec<Block>,
    head: Conv2d,
}

/// Forward activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct RegForward<F> {
    pub u: Tensor<F>,
    enc: Vec<BlockCache<F>>,
    dec: Vec<BlockCache<F>>,
    head_in: Tensor<F>,
}

impl<F: Real> RegForward<F> {
    /// Bottleneck activation `z`.
    pub fn z(&self) -> &Tensor<F> {
        &self.enc.last().expect("at least one level").out
    }
}

impl RegNet {
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: RegNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let width = |l: usize| config.base_width << l;
        let mut enc = Vec::new();
        for l in 0..config.levels {
            let cin = if l == 0 { 2 } else { width(l - 1) };
            enc.push(Block::new(store, &format!("reg.enc{l}"), cin, width(l), rng));
        }
        let mut skip = Vec::new();
        let mut dec = Vec::new();
        for l in 0..config.levels.saturating_sub(1) {
            skip.push(Conv2d::new(store, &format!("reg.up{l}"), width(l + 1), width(l), 1, Init::Lecun, rng));
            dec.push(Block::new(store, &format!("reg.dec{l}"), width(l), width(l), rng));
        }
        let head = Conv2d::new(store, "reg.head", width(0), 2, 3, Init::Zero, rng);
        RegNet { config, enc, skip, dec, head }
    }

    pub fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.downsample();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!("image {h}×{w} is not divisible by {d}")));
        }
        Ok(())
    }

    /// `i1`, `it` are row-major `h × w` images.
    pub fn forward<F: Real>(&self, store: &ParamStore<F>, i1: &[F], it: &[F], h: usize, w: usize) -> RegForward<F> {
        let mut x = Vec::with_capacity(2 * h * w);
        x.extend_from_slice(i1);
        x.extend_from_slice(it);
        let mut input = Tensor::from_vec(2, h, w, x);
        let mut enc: Vec<BlockCache<F>> = Vec::with_capacity(self.enc.len());
        for (l, block) in self.enc.iter().enumerate() {
            if l > 0 {
                input = avg_pool2(&enc[l - 1].out);
            }
            enc.push(block.forward(store, input.clone()));
        }
        let mut dec: Vec<Option<BlockCache<F>>> = vec![None; self.dec.len()];
        let mut d = enc.last().unwrap().out.clone();
        for l in (0..self.dec.len()).rev() {
            let up = upsample2(&self.skip[l].forward(store, &d));
            let cache = self.dec[l].forward(store, up.add(&enc[l].out));
            d = cache.out.clone();
            dec[l] = Some(cache);
        }
        let u = self.head.forward(store, &d);
        RegForward { u, enc, dec: dec.into_iter().map(Option::unwrap).collect(), head_in: d }
    }

    /// Accumulates parameter gradients for upstream gradients `du` (displacement)
    /// and optionally `dz` (bottleneck).
    pub fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, f: &RegForward<F>, du: &Tensor<F>, dz: Option<&Tensor<F>>) {
        let levels = self.enc.len();
        let mut dd = self.head.backward(store, grads, &f.head_in, du, true).unwrap();
        let mut de: Vec<Tensor<F>> = f.enc.iter().map(|c| Tensor::zeros(c.out.c, c.out.h, c.out.w)).collect();
        for l in 0..self.dec.len() {
            let ds = self.dec[l].backward(store, grads, &f.dec[l], &dd, true).unwrap();
            de[l].add_assign(&ds);
            let dskip = upsample2_backward(&ds);
            let coarse = if l + 1 == levels - 1 { &f.enc[levels - 1].out } else { &f.dec[l + 1].out };
            dd = self.skip[l].backward(store, grads, coarse, &dskip, true).unwrap();
        }
        de[levels - 1].add_assign(&dd);
        if let Some(dz) = dz {
            de[levels - 1].add_assign(dz);
        }
        for l in (0..levels).rev() {
            let dx = self.enc[l].backward(store, grads, &f.enc[l], &de[l], l > 0);
            if let Some(dx) = dx {
                let g = avg_pool2_backward(&dx);
                de[l - 1].add_assign(&g);
            }
        }
    }
}

/// Registration network weights together with their architecture.
#[derive(Clone, Debug)]
pub struct RegistrationParams<F = f32> {
    pub net: RegNet,
    pub store: ParamStore<F>,
}

impl<F: Real> RegistrationParams<F> {
    pub fn init(config: RegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = RegNet::new(&mut store, config, &mut rng);
        Ok(RegistrationParams { net, store })
    }
}

pub fn image_to_vec<F: Real>(img: &Image) -> Vec<F> {
    img.data.iter().map(|&v| F::lit(v)).collect()
}

pub fn tensor_to_field<F: Real>(u: &Tensor<F>) -> DisplacementField {
    let n = u.plane();
    DisplacementField {
        h: u.h,
        w: u.w,
        ux: u.data[..n].iter().map(|v| v.to_f64().unwrap()).collect(),
        uy: u.data[n..].iter().map(|v| v.to_f64().unwrap()).collect(),
    }
}

pub fn field_to_tensor<F: Real>(u: &DisplacementField) -> Tensor<F> {
    let data = u.ux.iter().chain(&u.uy).map(|&v| F::lit(v)).collect();
    Tensor::from_vec(2, u.h, u.w, data)
}

/// Runs the network on one frame pair; returns `u_t` and the bottleneck.
pub fn predict_displacement<F: Real>(params: &RegistrationParams<F>, i1: &Image, it: &Image) -> Result<(DisplacementField, Tensor<F>)> {
    if (i1.h, i1.w) != (it.h, it.w) {
        return Err(Error::shape(format!("image shapes differ: {}×{} vs {}×{}", i1.h, i1.w, it.h, it.w)));
    }
    params.net.check_shape(i1.h, i1.w)?;
    let f = params.net.forward(&params.store, &image_to_vec(i1), &image_to_vec(it), i1.h, i1.w);
    Ok((tensor_to_field(&f.u), f.z().clone()))
}

/// `(1/(2σ²))·mean((I_1(x + u) − I_t)²)` and its gradient with respect to `u`.
pub fn data_term_grad<F: Real>(i1: &[F], it: &[F], u: &Tensor<F>, sigma: f64) -> (f64, Tensor<F>) {
    let (h, w) = (u.h, u.w);
    let n = h * w;
    let inv = 1.0 / (sigma * sigma);
    let g_scale = F::lit(inv / n as f64);
    let mut du = Tensor::zeros(2, h, w);
    let mut acc = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let x = F::from_usize(c).unwrap() + u.data[i];
            let y = F::from_usize(r).unwrap() + u.data[n + i];
            let (v, dx, dy) = bilinear_sample(i1, h, w, x, y);
            let res = v - it[i];
            acc += res.to_f64().unwrap().powi(2);
            du.data[i] = g_scale * res * dx;
            du.data[n + i] = g_scale * res * dy;
        }
    }
    (0.5 * inv * acc / n as f64, du)
}

/// Applies `(−aΔ + b)` with a 5-point, zero-Neumann Laplacian to one plane.
fn apply_operator<F: Real>(v: &[F], h: usize, w: usize, a: F, b: F) -> Vec<F> {
    let mut out = vec![F::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut lap = F::zero();
            if r > 0 {
                lap += v[i - w] - v[i];
            }
            if r + 1 < h {
                lap += v[i + w] - v[i];
            }
            if c > 0 {
                lap += v[i - 1] - v[i];
            }
            if c + 1 < w {
                lap += v[i + 1] - v[i];
            }
            out[i] = b * v[i] - a * lap;
        }
    }
    out
}

/// `(1/|grid|)·Σ‖(−aΔ + b)u‖²` and its gradient with respect to `u`.
pub fn reg_term_grad<F: Real>(u: &Tensor<F>, cfg: &RegOperatorConfig) -> (f64, Tensor<F>) {
    let (h, w) = (u.h, u.w);
    let n = h * w;
    let (a, b) = (F::lit(cfg.a), F::lit(cfg.b));
    let scale = F::lit(2.0 / n as f64);
    let mut acc = 0.0f64;
    let mut grad = Vec::with_capacity(2 * n);
    for comp in 0..2 {
        let plane = &u.data[comp * n..(comp + 1) * n];
        let lu = apply_operator(plane, h, w, a, b);
        acc += lu.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
        // the operator is symmetric, so the gradient is 2·L(Lu)/n
        grad.extend(apply_operator(&lu, h, w, a, b).into_iter().map(|v| v * scale));
    }
    (acc / n as f64, Tensor::from_vec(2, h, w, grad))
}

pub fn reg_term(u: &DisplacementField, cfg: &RegOperatorConfig) -> Result<f64> {
    cfg.validate()?;
    if !(u.ux.iter().chain(&u.uy).all(|v| v.is_finite())) {
        return Err(Error::invalid("displacement field is not finite"));
    }
    Ok(reg_term_grad(&field_to_tensor::<f64>(u), cfg).0)
}

/// Data term for an explicit displacement field.
pub fn data_term_for_field(i1: &Image, it: &Image, u: &DisplacementField, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if (i1.h, i1.w) != (it.h, it.w) || (i1.h, i1.w) != (u.h, u.w) {
        return Err(Error::shape("image and field shapes differ"));
    }
    Ok(data_term_grad(&i1.data, &it.data, &field_to_tensor::<f64>(u), sigma).0)
}

/// Data term of the network's prediction for the pair `(i1, it)`.
pub fn data_term<F: Real>(params: &RegistrationParams<F>, i1: &Image, it: &Image, sigma: f64) -> Result<f64> {
    let (u, _) = predict_displacement(params, i1, it)?;
    data_term_for_field(i1, it, &u, sigma)
}
