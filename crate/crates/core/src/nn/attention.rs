use rand::Rng;

use super::{gemm, Linear, Module, Param};

/// Multi-head self-attention with a strict causal mask: position `i` attends to `j <= i` only.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    merged: Vec<f32>,
    b: usize,
    t: usize,
}

impl CausalSelfAttention {
    pub fn new<R: Rng>(name: &str, dim: usize, n_heads: usize, proj_std: f32, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(n_heads), "embed dim must divide into heads");
        Self {
            qkv: Linear::new(&format!("{name}.qkv"), dim, 3 * dim, 0.02, rng),
            proj: Linear::new(&format!("{name}.proj"), dim, dim, proj_std, rng),
            n_heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// `x` is `(b, t, dim)`.
    pub fn forward(&self, x: &[f32], b: usize, t: usize) -> (Vec<f32>, AttentionCache) {
        let (e, nh, dh) = (self.dim, self.n_heads, self.head_dim());
        let qkv = self.qkv.forward(x);
        let head_len = t * dh;
        let mut q = vec![0.0; b * nh * head_len];
        let mut k = vec![0.0; b * nh * head_len];
        let mut v = vec![0.0; b * nh * head_len];
        for bi in 0..b {
            for ti in 0..t {
                let row = &qkv[(bi * t + ti) * 3 * e..(bi * t + ti + 1) * 3 * e];
                for h in 0..nh {
                    let dst = (bi * nh + h) * head_len + ti * dh;
                    q[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                    k[dst..dst + dh].copy_from_slice(&row[e + h * dh..e + (h + 1) * dh]);
                    v[dst..dst + dh].copy_from_slice(&row[2 * e + h * dh..2 * e + (h + 1) * dh]);
                }
            }
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; b * nh * t * t];
        let mut out = vec![0.0; b * nh * head_len];
        for bh in 0..b * nh {
            let qs = &q[bh * head_len..(bh + 1) * head_len];
            let ks = &k[bh * head_len..(bh + 1) * head_len];
            let vs = &v[bh * head_len..(bh + 1) * head_len];
            let p = &mut probs[bh * t * t..(bh + 1) * t * t];
            gemm(t, dh, t, scale, qs, false, ks, true, 0.0, p);
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= sum;
                }
                row[i + 1..].fill(0.0);
            }
            gemm(t, t, dh, 1.0, p, false, vs, false, 0.0, &mut out[bh * head_len..(bh + 1) * head_len]);
        }
        let mut merged = vec![0.0; b * t * e];
        for bi in 0..b {
            for h in 0..nh {
                for ti in 0..t {
                    let src = (bi * nh + h) * head_len + ti * dh;
                    let dst = (bi * t + ti) * e + h * dh;
                    merged[dst..dst + dh].copy_from_slice(&out[src..src + dh]);
                }
            }
        }
        let y = self.proj.forward(&merged);
        (
            y,
            AttentionCache {
                x: x.to_vec(),
                q,
                k,
                v,
                probs,
                merged,
                b,
                t,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &[f32]) -> Vec<f32> {
        let (e, nh, dh) = (self.dim, self.n_heads, self.head_dim());
        let (b, t) = (cache.b, cache.t);
        let head_len = t * dh;
        let dmerged = self.proj.backward(&cache.merged, dy);
        let mut dout = vec![0.0; b * nh * head_len];
        for bi in 0..b {
            for h in 0..nh {
                for ti in 0..t {
                    let dst = (bi * nh + h) * head_len + ti * dh;
                    let src = (bi * t + ti) * e + h * dh;
                    dout[dst..dst + dh].copy_from_slice(&dmerged[src..src + dh]);
                }
            }
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0.0; b * nh * head_len];
        let mut dk = vec![0.0; b * nh * head_len];
        let mut dv = vec![0.0; b * nh * head_len];
        let mut dp = vec![0.0; t * t];
        for bh in 0..b * nh {
            let r = bh * head_len..(bh + 1) * head_len;
            let p = &cache.probs[bh * t * t..(bh + 1) * t * t];
            let d_out = &dout[r.clone()];
            gemm(t, dh, t, 1.0, d_out, false, &cache.v[r.clone()], true, 0.0, &mut dp);
            gemm(t, t, dh, 1.0, p, true, d_out, false, 0.0, &mut dv[r.clone()]);
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: f32 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    drow[j] = if j <= i { prow[j] * (drow[j] - dot) } else { 0.0 };
                }
            }
            gemm(t, t, dh, scale, &dp, false, &cache.k[r.clone()], false, 0.0, &mut dq[r.clone()]);
            gemm(t, t, dh, scale, &dp, true, &cache.q[r.clone()], false, 0.0, &mut dk[r]);
        }
        let mut dqkv = vec![0.0; b * t * 3 * e];
        for bi in 0..b {
            for ti in 0..t {
                let row = (bi * t + ti) * 3 * e;
                for h in 0..nh {
                    let src = (bi * nh + h) * head_len + ti * dh;
                    dqkv[row + h * dh..row + (h + 1) * dh].copy_from_slice(&dq[src..src + dh]);
                    dqkv[row + e + h * dh..row + e + (h + 1) * dh].copy_from_slice(&dk[src..src + dh]);
                    dqkv[row + 2 * e + h * dh..row + 2 * e + (h + 1) * dh]
                        .copy_from_slice(&dv[src..src + dh]);
                }
            }
        }
        self.qkv.backward(&cache.x, &dqkv)
    }
}

impl Module for CausalSelfAttention {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.qkv.visit_params(f);
        self.proj.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.qkv.visit_params_mut(f);
        self.proj.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (CausalSelfAttention, Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut att = CausalSelfAttention::new("a", 8, 2, 0.3, &mut rng);
        for v in att.qkv.w.value.iter_mut() {
            *v *= 15.0;
        }
        let x: Vec<f32> = (0..2 * 5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..2 * 5 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        (att, x, r)
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn attention_gradients() {
        let (mut att, x, r) = setup();
        let (_, cache) = att.forward(&x, 2, 5);
        let dx = att.backward(&cache, &r);
        let base = att.clone();
        check("att.dx", &dx, x.len(), |i, d| {
            let mut xx = x.clone();
            xx[i] += d;
            dot(&base.forward(&xx, 2, 5).0, &r)
        }, 1e-3, 3e-2);
        let gq = att.qkv.w.grad.clone();
        check("att.dqkv", &gq, gq.len(), |i, d| {
            let mut a = base.clone();
            a.qkv.w.value[i] += d;
            dot(&a.forward(&x, 2, 5).0, &r)
        }, 1e-3, 3e-2);
    }

    #[test]
    fn output_is_causal() {
        let (att, x, _) = setup();
        let (full, _) = att.forward(&x[..5 * 8], 1, 5);
        let mut changed = x[..5 * 8].to_vec();
        for v in &mut changed[3 * 8..] {
            *v += 1.0;
        }
        let (alt, _) = att.forward(&changed, 1, 5);
        assert_eq!(&full[..3 * 8], &alt[..3 * 8]);
        assert_ne!(&full[3 * 8..], &alt[3 * 8..]);
    }
}
