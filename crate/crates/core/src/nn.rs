//! Small CPU neural-network toolkit: tensors, parameter stores, layers with
//! hand-written backward passes, and Adam.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C = alpha·op(A)·op(B) + beta·C` with row-major storage.
    /// `A` is `m × k` (stored `k × m` when `a_t`), `B` is `k × n` (stored `n × k` when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above; strides describe the stated layouts.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}
impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense `(c, h, w)` tensor. One-dimensional signals use `h = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![F::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, o: &Self) -> bool {
        (self.c, self.h, self.w) == (o.c, o.h, o.w)
    }

    pub fn add(&self, o: &Self) -> Self {
        assert!(self.same_shape(o));
        self.with_data(self.data.iter().zip(&o.data).map(|(&a, &b)| a + b).collect())
    }

    pub fn add_assign(&mut self, o: &Self) {
        assert!(self.same_shape(o));
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<F>) -> Self {
        Tensor::from_vec(self.c, self.h, self.w, data)
    }
}

/// Named parameter tensors. Layers refer to entries by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<F>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads(self.values.iter().map(|v| vec![F::zero(); v.len()]).collect())
    }

    /// Squared L2 norm of all parameters, accumulated in `f64`.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().flatten().map(|v| v.to_f64().unwrap().powi(2)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|&x| G::from_f64(x.to_f64().unwrap()).unwrap()).collect())
                .collect(),
        }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names || self.shapes != other.shapes {
            return Err(Error::shape("parameter layout does not match the model"));
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F>(pub Vec<Vec<F>>);

impl<F: Real> Grads<F> {
    pub fn scale(&mut self, s: F) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn add(&mut self, other: &Grads<F>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Adds `2·coef·θ`, the gradient of `coef·‖θ‖²`.
    pub fn add_weight_decay(&mut self, store: &ParamStore<F>, coef: f64) {
        let k = F::lit(2.0 * coef);
        for (g, v) in self.0.iter_mut().zip(&store.values) {
            for (x, &p) in g.iter_mut().zip(v) {
                *x += k * p;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in`.
    He,
    /// Uniform with variance `1 / fan_in`.
    Lecun,
    Zero,
}

fn init_weights<F: Real>(n: usize, fan_in: usize, init: Init, rng: &mut impl Rng) -> Vec<F> {
    let gain = match init {
        Init::He => 2.0,
        Init::Lecun => 1.0,
        Init::Zero => return vec![F::zero(); n],
    };
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
}

/// 2-D convolution with odd square kernel, stride 1 and zero padding (same size).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn im2col<F: Real>(x: &Tensor<F>, k: usize, out: &mut Vec<F>) {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let p = (k / 2) as isize;
    out.clear();
    out.resize(x.c * k * k * hw, F::zero());
    for ci in 0..x.c {
        let plane = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, k: usize) -> Tensor<F> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut x = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[(xx as isize + dx) as usize] += src[xx];
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize, init: Init, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1);
        let fan_in = cin * k * k;
        let weight = store.add(format!("{name}.weight"), vec![cout, cin, k, k], init_weights(cout * fan_in, fan_in, init, rng));
        let bias = store.add(format!("{name}.bias"), vec![cout], vec![F::zero(); cout]);
        Conv2d { weight, bias, cin, cout, k }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let mut y = Tensor::zeros(self.cout, x.h, x.w);
        let bias = &store.values[self.bias];
        for (co, chunk) in y.data.chunks_mut(hw).enumerate() {
            chunk.fill(bias[co]);
        }
        let kk = self.cin * self.k * self.k;
        let w = &store.values[self.weight];
        if self.k == 1 {
            F::gemm(self.cout, kk, hw, F::one(), w, false, &x.data, false, F::one(), &mut y.data);
        } else {
            let mut cols = Vec::new();
            im2col(x, self.k, &mut cols);
            F::gemm(self.cout, kk, hw, F::one(), w, false, &cols, false, F::one(), &mut y.data);
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, x: &Tensor<F>, dy: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let hw = x.plane();
        let kk = self.cin * self.k * self.k;
        {
            let gb = &mut grads.0[self.bias];
            for (co, chunk) in dy.data.chunks(hw).enumerate() {
                gb[co] += chunk.iter().copied().sum::<F>();
            }
        }
        let w = &store.values[self.weight];
        if self.k == 1 {
            F::gemm(self.cout, hw, kk, F::one(), &dy.data, false, &x.data, true, F::one(), &mut grads.0[self.weight]);
            if !need_dx {
                return None;
            }
            let mut dx = Tensor::zeros(self.cin, x.h, x.w);
            F::gemm(kk, self.cout, hw, F::one(), w, true, &dy.data, false, F::zero(), &mut dx.data);
            return Some(dx);
        }
        let mut cols = Vec::new();
        im2col(x, self.k, &mut cols);
        F::gemm(self.cout, hw, kk, F::one(), &dy.data, false, &cols, true, F::one(), &mut grads.0[self.weight]);
        if !need_dx {
            return None;
        }
        F::gemm(kk, self.cout, hw, F::one(), w, true, &dy.data, false, F::zero(), &mut cols);
        Some(col2im(&cols, self.cin, x.h, x.w, self.k))
    }
}

/// 1-D convolution over a periodic axis (the `w` axis of an `h = 1` tensor).
#[derive(Clone, Debug)]
pub struct Conv1dCircular {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn im2col_circ<F: Real>(x: &Tensor<F>, k: usize) -> Vec<F> {
    let n = x.w;
    let p = (k / 2) as isize;
    let mut cols = vec![F::zero(); x.c * k * n];
    for ci in 0..x.c {
        for j in 0..k {
            let row = &mut cols[(ci * k + j) * n..][..n];
            for (i, r) in row.iter_mut().enumerate() {
                let s = (i as isize + j as isize - p).rem_euclid(n as isize) as usize;
                *r = x.data[ci * n + s];
            }
        }
    }
    cols
}

impl Conv1dCircular {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize, init: Init, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1);
        let fan_in = cin * k;
        let weight = store.add(format!("{name}.weight"), vec![cout, cin, k], init_weights(cout * fan_in, fan_in, init, rng));
        let bias = store.add(format!("{name}.bias"), vec![cout], vec![F::zero(); cout]);
        Conv1dCircular { weight, bias, cin, cout, k }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Tensor<F> {
        assert!(x.c == self.cin && x.h == 1);
        let n = x.w;
        let mut y = Tensor::zeros(self.cout, 1, n);
        for (co, chunk) in y.data.chunks_mut(n).enumerate() {
            chunk.fill(store.values[self.bias][co]);
        }
        let cols = im2col_circ(x, self.k);
        F::gemm(self.cout, self.cin * self.k, n, F::one(), &store.values[self.weight], false, &cols, false, F::one(), &mut y.data);
        y
    }

    pub fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, x: &Tensor<F>, dy: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let n = x.w;
        let kk = self.cin * self.k;
        for (co, chunk) in dy.data.chunks(n).enumerate() {
            grads.0[self.bias][co] += chunk.iter().copied().sum::<F>();
        }
        let mut cols = im2col_circ(x, self.k);
        F::gemm(self.cout, n, kk, F::one(), &dy.data, false, &cols, true, F::one(), &mut grads.0[self.weight]);
        if !need_dx {
            return None;
        }
        F::gemm(kk, self.cout, n, F::one(), &store.values[self.weight], true, &dy.data, false, F::zero(), &mut cols);
        let p = (self.k / 2) as isize;
        let mut dx = Tensor::zeros(self.cin, 1, n);
        for ci in 0..self.cin {
            for j in 0..self.k {
                let row = &cols[(ci * self.k + j) * n..][..n];
                for (i, &g) in row.iter().enumerate() {
                    let s = (i as isize + j as isize - p).rem_euclid(n as isize) as usize;
                    dx.data[ci * n + s] += g;
                }
            }
        }
        Some(dx)
    }
}

/// Fully connected layer on a flattened tensor.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), vec![n_out, n_in], init_weights(n_out * n_in, n_in, init, rng));
        let bias = store.add(format!("{name}.bias"), vec![n_out], vec![F::zero(); n_out]);
        Linear { weight, bias, n_in, n_out }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.n_in, "linear input size");
        let mut y = store.values[self.bias].clone();
        F::gemm(self.n_out, self.n_in, 1, F::one(), &store.values[self.weight], false, x, false, F::one(), &mut y);
        y
    }

    pub fn backward<F: Real>(&self, store: &ParamStore<F>, grads: &mut Grads<F>, x: &[F], dy: &[F]) -> Vec<F> {
        for (g, &d) in grads.0[self.bias].iter_mut().zip(dy) {
            *g += d;
        }
        F::gemm(self.n_out, 1, self.n_in, F::one(), dy, false, x, false, F::one(), &mut grads.0[self.weight]);
        let mut dx = vec![F::zero(); self.n_in];
        F::gemm(self.n_in, self.n_out, 1, F::one(), &store.values[self.weight], true, dy, false, F::zero(), &mut dx);
        dx
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.with_data(x.data.iter().map(|&v| v * sigmoid(v)).collect())
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward<F: Real>(pre: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = pre
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (F::one() + x * (F::one() - s))
        })
        .collect();
    pre.with_data(data)
}

pub fn avg_pool2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pooling needs even sizes");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let q = F::lit(0.25);
    let mut y = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for r in 0..h2 {
            for col in 0..w2 {
                let i = c * x.h * x.w + 2 * r * x.w + 2 * col;
                y.data[(c * h2 + r) * w2 + col] = q * (x.data[i] + x.data[i + 1] + x.data[i + x.w] + x.data[i + x.w + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let q = F::lit(0.25);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for r in 0..h {
            for col in 0..w {
                dx.data[(c * h + r) * w + col] = q * dy.data[(c * dy.h + r / 2) * dy.w + col / 2];
            }
        }
    }
    dx
}

pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for r in 0..h {
            for col in 0..w {
                y.data[(c * h + r) * w + col] = x.data[(c * x.h + r / 2) * x.w + col / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h2, w2);
    for c in 0..dy.c {
        for r in 0..dy.h {
            for col in 0..dy.w {
                dx.data[(c * h2 + r / 2) * w2 + col / 2] += dy.data[(c * dy.h + r) * dy.w + col];
            }
        }
    }
    dx
}

/// Adam optimizer with fixed step size.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let z = store.zero_grads().0;
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: z.clone(), v: z }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) {
        self.t += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = F::lit(self.lr * c2.sqrt() / c1);
        let eps = F::lit(self.eps * c2.sqrt());
        for ((p, g), (m, v)) in store.values.iter_mut().zip(&grads.0).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
