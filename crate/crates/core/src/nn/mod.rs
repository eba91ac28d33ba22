//! A small CPU neural-network toolkit with hand-written backward passes.
//!
//! Everything is `f32`, single-threaded and deterministic: the same inputs and
//! parameters always produce bit-identical outputs and gradients. Image tensors
//! are NHWC, sequence tensors are `(batch, time, channels)`, all row-major.

mod attention;
mod layers;

pub use attention::{AttentionCache, CausalSelfAttention};
pub use layers::{
    depth_to_space, gelu, gelu_backward, silu, silu_backward, space_to_depth, Conv2d, ConvCache,
    Embedding, LayerNorm, LayerNormCache, Linear,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Whether AdamW weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            decay,
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f32, decay: bool) -> Self {
        let mut p = Self::zeros(name, shape, decay);
        p.value.fill(v);
        p
    }

    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f32, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape, true);
        let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        for v in &mut p.value {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn uniform<R: Rng>(name: impl Into<String>, shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape, true);
        for v in &mut p.value {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn grad_norm(&self) -> f64 {
        let mut s = 0.0f64;
        self.visit_params(&mut |p| s += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>());
        s.sqrt()
    }

    /// Scale gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = (max_norm / norm) as f32;
            self.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= scale));
        }
        norm
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape `m x k` and `op(B)` of `k x n`.
/// `A` and `B` are row-major in their stored (untransposed) layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: A has {} elements, want {m}x{k}", a.len());
    assert_eq!(b.len(), k * n, "gemm: B has {} elements, want {k}x{n}", b.len());
    assert_eq!(c.len(), m * n, "gemm: C has {} elements, want {m}x{n}", c.len());
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers follow parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f32) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_params_mut(&mut |p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            let wd = if p.decay { c.weight_decay } else { 0.0 };
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * p.value[i]);
            }
            idx += 1;
        });
    }
}

/// Linear warmup then cosine decay to `min_ratio * base`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_ratio: f32,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f32 / span as f32).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.base * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences in f64 around f32 parameters.

    /// Compare an analytic gradient against `(f(x+h) - f(x-h)) / 2h` for a sample of indices.
    pub fn check(
        name: &str,
        analytic: &[f32],
        n: usize,
        mut eval: impl FnMut(usize, f32) -> f64,
        h: f32,
        tol: f64,
    ) {
        let stride = (n / 40).max(1);
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let plus = eval(i, h);
            let minus = eval(i, -h);
            let numeric = (plus - minus) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let err = (a - numeric).abs() / (1e-3 + a.abs().max(numeric.abs()));
            worst = worst.max(err);
            assert!(
                err < tol,
                "{name}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel err {err:.3e})"
            );
        }
        assert!(worst.is_finite());
    }
}
