//! Pre-LayerNorm decoder-only transformer over token ids.

use rand::Rng;

use super::ForecasterConfig;
use crate::nn::{
    gelu, gelu_backward, AttentionCache, CausalSelfAttention, Embedding, LayerNorm, LayerNormCache,
    Linear, Module, Param,
};

/// Fixed factorized sinusoidal position code for `(frame, row, col)`.
///
/// The embedding is split into three even-width bands, one per axis, each a
/// standard sin/cos ladder. No parameters, so the model size does not depend
/// on the context geometry.
pub fn position_encoding(config: &ForecasterConfig) -> Vec<f32> {
    let e = config.embed_dim;
    let band = (e / 3) & !1;
    let bands = [e - 2 * band, band, band];
    let (h, w) = (config.tokens_h, config.tokens_w);
    let mut out = vec![0.0f32; config.context_length() * e];
    for pos in 0..config.context_length() {
        let coords = [pos / (h * w), (pos / w) % h, pos % w];
        let row = &mut out[pos * e..(pos + 1) * e];
        let mut off = 0;
        for (axis, &width) in bands.iter().enumerate() {
            for i in 0..width / 2 {
                let freq = 1.0 / 100f64.powf(2.0 * i as f64 / width as f64);
                let a = coords[axis] as f64 * freq;
                row[off + 2 * i] = (POS_SCALE * a.sin()) as f32;
                row[off + 2 * i + 1] = (POS_SCALE * a.cos()) as f32;
            }
            off += width;
        }
    }
    out
}

const POS_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: CausalSelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    n2: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
}

impl Block {
    fn new<R: Rng>(i: usize, e: usize, heads: usize, n_layers: usize, rng: &mut R) -> Self {
        let proj_std = 0.02 / (2.0 * n_layers as f32).sqrt();
        let mut fc2 = Linear::new(&format!("h{i}.fc2"), 4 * e, e, 0.02, rng);
        fc2.w.value.iter_mut().for_each(|v| *v *= proj_std / 0.02);
        Self {
            ln1: LayerNorm::new(&format!("h{i}.ln1"), e),
            attn: CausalSelfAttention::new(&format!("h{i}.attn"), e, heads, proj_std, rng),
            ln2: LayerNorm::new(&format!("h{i}.ln2"), e),
            fc1: Linear::new(&format!("h{i}.fc1"), e, 4 * e, 0.02, rng),
            fc2,
        }
    }

    fn forward(&self, x: &mut [f32], b: usize, t: usize) -> BlockCache {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, b, t);
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
        let (n2, ln2) = self.ln2.forward(x);
        let u = self.fc1.forward(&n2);
        let g = gelu(&u);
        let m = self.fc2.forward(&g);
        x.iter_mut().zip(&m).for_each(|(x, m)| *x += m);
        BlockCache { ln1, attn, ln2, n2, u, g }
    }

    fn backward(&mut self, c: &BlockCache, dx: &mut [f32]) {
        let dg = self.fc2.backward(&c.g, dx);
        let du = gelu_backward(&c.u, &dg);
        let dn2 = self.fc1.backward(&c.n2, &du);
        let d = self.ln2.backward(&c.ln2, &dn2);
        dx.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        let dn1 = self.attn.backward(&c.attn, dx);
        let d = self.ln1.backward(&c.ln1, &dn1);
        dx.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
}

impl Module for Block {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        self.ln2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.ln2.visit_params_mut(f);
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Gpt {
    tok: Embedding,
    pos: Vec<f32>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    embed_dim: usize,
    vocab: usize,
}

pub struct GptCache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    xf: Vec<f32>,
}

impl Gpt {
    pub fn new<R: Rng>(config: &ForecasterConfig, rng: &mut R) -> Self {
        let e = config.embed_dim;
        Self {
            tok: Embedding::new("wte", config.vocab_size, e, 0.5, rng),
            pos: position_encoding(config),
            blocks: (0..config.n_layers)
                .map(|i| Block::new(i, e, config.n_heads, config.n_layers, rng))
                .collect(),
            ln_f: LayerNorm::new("ln_f", e),
            head: Linear::new("head", e, config.vocab_size, 0.02, rng),
            embed_dim: e,
            vocab: config.vocab_size,
        }
    }

    /// Logits `(b, t, K)` for `ids` laid out `(b, t)`; position `i` sees ids `0..=i`.
    pub fn forward(&self, ids: &[usize], b: usize, t: usize) -> (Vec<f32>, GptCache) {
        let e = self.embed_dim;
        let mut x = self.tok.forward(ids);
        for bi in 0..b {
            for ti in 0..t {
                let row = &mut x[(bi * t + ti) * e..(bi * t + ti + 1) * e];
                row.iter_mut().zip(&self.pos[ti * e..(ti + 1) * e]).for_each(|(a, p)| *a += p);
            }
        }
        let blocks = self.blocks.iter().map(|blk| blk.forward(&mut x, b, t)).collect();
        let (xf, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(&xf);
        (
            logits,
            GptCache {
                ids: ids.to_vec(),
                blocks,
                ln_f,
                xf,
            },
        )
    }

    /// Logits at the last position of a single sequence.
    pub fn last_logits(&self, ids: &[usize]) -> Vec<f32> {
        let e = self.embed_dim;
        let t = ids.len();
        let mut x = self.tok.forward(ids);
        for ti in 0..t {
            x[ti * e..(ti + 1) * e]
                .iter_mut()
                .zip(&self.pos[ti * e..(ti + 1) * e])
                .for_each(|(a, p)| *a += p);
        }
        for blk in &self.blocks {
            blk.forward(&mut x, 1, t);
        }
        let (xf, _) = self.ln_f.forward(&x[(t - 1) * e..]);
        self.head.forward(&xf)
    }

    pub fn backward(&mut self, cache: &GptCache, dlogits: &[f32]) {
        let mut dx = self.head.backward(&cache.xf, dlogits);
        dx = self.ln_f.backward(&cache.ln_f, &dx);
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            blk.backward(c, &mut dx);
        }
        self.tok.backward(&cache.ids, &dx);
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

impl Module for Gpt {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.tok.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.ln_f.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.tok.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.ln_f.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

/// Mean next-token cross-entropy over all positions and its gradient wrt logits.
///
/// Position `i` predicts `targets[i]` (the id at `i + 1` in the source window).
pub fn cross_entropy(logits: &[f32], targets: &[usize], k: usize) -> (f64, Vec<f32>) {
    let n = targets.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (i, &y) in targets.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let lse = max as f64 + sum.ln();
        loss += lse - row[y] as f64;
        let g = &mut grad[i * k..(i + 1) * k];
        for j in 0..k {
            g[j] = ((((row[j] - max) as f64).exp() / sum) as f32) / n as f32;
        }
        g[y] -= 1.0 / n as f32;
    }
    (loss / n as f64, grad)
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&v| (v / sum) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ForecasterConfig {
        ForecasterConfig {
            vocab_size: 7,
            context_frames: 2,
            tokens_h: 2,
            tokens_w: 2,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 12,
        }
    }

    #[test]
    fn position_codes_are_distinct() {
        let cfg = ForecasterConfig::default();
        let p = position_encoding(&cfg);
        let e = cfg.embed_dim;
        for i in 0..cfg.context_length() {
            for j in 0..i {
                let d: f32 = (0..e).map(|k| (p[i * e + k] - p[j * e + k]).abs()).sum();
                assert!(d > 1e-3, "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits: Vec<f32> = (0..3 * 5).map(|i| ((i * 7) % 11) as f32 * 0.3 - 1.0).collect();
        let targets = [1, 4, 0];
        let (_, g) = cross_entropy(&logits, &targets, 5);
        check("ce", &g, logits.len(), |i, h| {
            let mut l = logits.clone();
            l[i] += h;
            cross_entropy(&l, &targets, 5).0
        }, 1e-3, 1e-2);
        let (u, _) = cross_entropy(&[0.0; 10], &[0, 1], 5);
        assert!((u - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn gpt_gradients() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gpt = Gpt::new(&cfg, &mut rng);
        // larger weights so the check exercises non-trivial attention
        gpt.visit_params_mut(&mut |p| {
            if p.decay {
                p.value.iter_mut().for_each(|v| *v *= 10.0);
            }
        });
        let ids = [1, 3, 0, 6, 2, 2, 5, 4];
        let targets = [3, 0, 6, 2, 2, 5, 4, 1];
        let (logits, cache) = gpt.forward(&ids, 2, 4);
        let (_, dl) = cross_entropy(&logits, &targets, 7);
        gpt.backward(&cache, &dl);
        let base = gpt.clone();
        let mut grads = Vec::new();
        gpt.visit_params(&mut |p| grads.push(p.grad.clone()));
        for (pi, g) in grads.iter().enumerate() {
            check(&format!("gpt param {pi}"), g, g.len(), |i, h| {
                let mut m = base.clone();
                let mut k = 0;
                m.visit_params_mut(&mut |p| {
                    if k == pi {
                        p.value[i] += h;
                    }
                    k += 1;
                });
                cross_entropy(&m.forward(&ids, 2, 4).0, &targets, 7).0
            }, 1e-2, 5e-2);
        }
    }

    #[test]
    fn last_logits_match_full_forward() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gpt = Gpt::new(&cfg, &mut rng);
        let ids = [1, 3, 0, 6, 2];
        let (full, _) = gpt.forward(&ids, 1, 5);
        let last = gpt.last_logits(&ids);
        for (a, b) in last.iter().zip(&full[4 * 7..]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
