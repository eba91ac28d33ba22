use rand::Rng;

use super::{gemm, Module, Param};

/// Dense layer `y = x W + b`, `W` stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_dim: usize, out_dim: usize, std: f32, rng: &mut R) -> Self {
        Self {
            w: Param::normal(format!("{name}.w"), &[in_dim, out_dim], std, rng),
            b: Param::zeros(format!("{name}.b"), &[out_dim], false),
            in_dim,
            out_dim,
        }
    }

    /// LeCun-normal initialisation (`std = 1/sqrt(fan_in)`).
    pub fn lecun<R: Rng>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::new(name, in_dim, out_dim, 1.0 / (in_dim as f32).sqrt(), rng)
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() / self.in_dim;
        let mut y = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            y.extend_from_slice(&self.b.value);
        }
        gemm(n, self.in_dim, self.out_dim, 1.0, x, false, &self.w.value, false, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`. `x` is the forward input.
    pub fn backward(&mut self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        self.accumulate(x, dy);
        self.input_grad(dy)
    }

    pub fn accumulate(&mut self, x: &[f32], dy: &[f32]) {
        let n = x.len() / self.in_dim;
        gemm(self.in_dim, n, self.out_dim, 1.0, x, true, dy, false, 1.0, &mut self.w.grad);
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in self.b.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    pub fn input_grad(&self, dy: &[f32]) -> Vec<f32> {
        let n = dy.len() / self.out_dim;
        let mut dx = vec![0.0; n * self.in_dim];
        gemm(n, self.out_dim, self.in_dim, 1.0, dy, false, &self.w.value, true, 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Square `k x k` convolution, stride 1, zero "same" padding, NHWC.
/// Implemented as im2col followed by one GEMM; weights are `(k*k*cin, cout)`
/// with rows ordered `(ky, kx, cin)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub lin: Linear,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

pub struct ConvCache {
    cols: Vec<f32>,
    dims: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "only odd kernels keep 'same' padding symmetric");
        Self {
            lin: Linear::lecun(name, k * k * cin, cout, rng),
            k,
            cin,
            cout,
        }
    }

    fn im2col(&self, x: &[f32], b: usize, h: usize, w: usize) -> Vec<f32> {
        let (k, c) = (self.k, self.cin);
        if k == 1 {
            return x.to_vec();
        }
        let p = k / 2;
        let row_len = k * k * c;
        let mut cols = vec![0.0f32; b * h * w * row_len];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * row_len;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], b: usize, h: usize, w: usize) -> Vec<f32> {
        let (k, c) = (self.k, self.cin);
        if k == 1 {
            return dcols.to_vec();
        }
        let p = k / 2;
        let row_len = k * k * c;
        let mut dx = vec![0.0f32; b * h * w * c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * row_len;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for (d, s) in dx[dst..dst + c].iter_mut().zip(&dcols[src..src + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &[f32], b: usize, h: usize, w: usize) -> (Vec<f32>, ConvCache) {
        debug_assert_eq!(x.len(), b * h * w * self.cin);
        let cols = self.im2col(x, b, h, w);
        let y = self.lin.forward(&cols);
        (y, ConvCache { cols, dims: (b, h, w) })
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &[f32]) -> Vec<f32> {
        let (b, h, w) = cache.dims;
        let dcols = self.lin.backward(&cache.cols, dy);
        self.col2im(&dcols, b, h, w)
    }

    /// Weight gradient for `dy` without accumulating it.
    pub fn weight_grad(&self, cache: &ConvCache, dy: &[f32]) -> Vec<f32> {
        let n = dy.len() / self.cout;
        let mut g = vec![0.0; self.lin.in_dim * self.cout];
        gemm(self.lin.in_dim, n, self.cout, 1.0, &cache.cols, true, dy, false, 0.0, &mut g);
        g
    }

    /// `dL/dx` without touching parameter gradients.
    pub fn input_grad(&self, cache: &ConvCache, dy: &[f32]) -> Vec<f32> {
        let (b, h, w) = cache.dims;
        self.col2im(&self.lin.input_grad(dy), b, h, w)
    }

    /// Parameter gradients only, for a first layer whose input needs no gradient.
    pub fn backward_params(&mut self, cache: &ConvCache, dy: &[f32]) {
        self.lin.accumulate(&cache.cols, dy);
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.lin.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.lin.visit_params_mut(f)
    }
}

/// `(b, h, w, c)` to `(b, h/f, w/f, f*f*c)`, channel order `(fy, fx, c)`.
pub fn space_to_depth(x: &[f32], b: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<f32> {
    let (ho, wo) = (h / f, w / f);
    let co = f * f * c;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * ho + y / f) * wo + xx / f) * co + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]: `(b, h, w, f*f*c)` to `(b, h*f, w*f, c)`.
pub fn depth_to_space(x: &[f32], b: usize, h: usize, w: usize, cin: usize, f: usize) -> Vec<f32> {
    let c = cin / (f * f);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = ((bi * ho + y) * wo + xx) * c;
                let src = ((bi * h + y / f) * w + xx / f) * cin + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect()
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub dim: usize,
    pub eps: f32,
}

pub struct LayerNormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[dim], 1.0, false),
            beta: Param::zeros(format!("{name}.beta"), &[dim], false),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[f32]) -> (Vec<f32>, LayerNormCache) {
        let d = self.dim;
        let n = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + self.eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                xhat[i * d + j] = xh;
                y[i * d + j] = xh * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &[f32]) -> Vec<f32> {
        let d = self.dim;
        let n = dy.len() / d;
        let mut dx = vec![0.0; dy.len()];
        let mut dxhat = vec![0.0f32; d];
        for i in 0..n {
            let (xh, g) = (&cache.xhat[i * d..(i + 1) * d], &dy[i * d..(i + 1) * d]);
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..d {
                self.gamma.grad[j] += g[j] * xh[j];
                self.beta.grad[j] += g[j];
                dxhat[j] = g[j] * self.gamma.value[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat /= d as f32;
            mean_dxhat_xhat /= d as f32;
            for j in 0..d {
                dx[i * d + j] = cache.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Lookup table `(vocab, dim)`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Param,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(name: &str, vocab: usize, dim: usize, std: f32, rng: &mut R) -> Self {
        Self {
            table: Param::normal(format!("{name}.table"), &[vocab, dim], std, rng),
            vocab,
            dim,
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            out.extend_from_slice(&self.table.value[id * self.dim..(id + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&mut self, ids: &[usize], dy: &[f32]) {
        for (i, &id) in ids.iter().enumerate() {
            let g = &mut self.table.grad[id * self.dim..(id + 1) * self.dim];
            for (a, b) in g.iter_mut().zip(&dy[i * self.dim..(i + 1) * self.dim]) {
                *a += b;
            }
        }
    }
}

impl Module for Embedding {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.table);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, h, w, cin, cout) = (2, 5, 4, 3, 2);
        let mut conv = Conv2d::new("c", cin, cout, 3, &mut rng);
        conv.lin.b.value = rand_vec(cout, &mut rng);
        let x = rand_vec(b * h * w * cin, &mut rng);
        let (y, _) = conv.forward(&x, b, h, w);
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    for co in 0..cout {
                        let mut s = conv.lin.b.value[co] as f64;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = yy as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x[((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let wv = conv.lin.w.value[((ky * 3 + kx) * cin + ci) * cout + co];
                                    s += xv as f64 * wv as f64;
                                }
                            }
                        }
                        let got = y[((bi * h + yy) * w + xx) * cout + co] as f64;
                        assert!((got - s).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, h, w, cin, cout) = (2, 4, 5, 2, 3);
        let mut conv = Conv2d::new("c", cin, cout, 3, &mut rng);
        let x = rand_vec(b * h * w * cin, &mut rng);
        let r = rand_vec(b * h * w * cout, &mut rng);
        let (_, cache) = conv.forward(&x, b, h, w);
        let dx = conv.backward(&cache, &r);
        let base = conv.clone();
        let loss = |c: &Conv2d, x: &[f32]| dot(&c.forward(x, b, h, w).0, &r);
        check("conv.dx", &dx, x.len(), |i, d| {
            let mut xx = x.clone();
            xx[i] += d;
            loss(&base, &xx)
        }, 1e-2, 1e-2);
        let gw = conv.lin.w.grad.clone();
        check("conv.dw", &gw, gw.len(), |i, d| {
            let mut c = base.clone();
            c.lin.w.value[i] += d;
            loss(&c, &x)
        }, 1e-2, 1e-2);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::lecun("l", 4, 3, &mut rng);
        let x = rand_vec(5 * 4, &mut rng);
        let r = rand_vec(5 * 3, &mut rng);
        let dx = lin.backward(&x, &r);
        let base = lin.clone();
        check("lin.dx", &dx, x.len(), |i, d| {
            let mut xx = x.clone();
            xx[i] += d;
            dot(&base.forward(&xx), &r)
        }, 1e-2, 1e-3);
        let gb = lin.b.grad.clone();
        check("lin.db", &gb, 3, |i, d| {
            let mut l = base.clone();
            l.b.value[i] += d;
            dot(&l.forward(&x), &r)
        }, 1e-2, 1e-3);
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ln = LayerNorm::new("ln", 6);
        ln.gamma.value = rand_vec(6, &mut rng);
        let x = rand_vec(4 * 6, &mut rng);
        let r = rand_vec(4 * 6, &mut rng);
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &r);
        let base = ln.clone();
        check("ln.dx", &dx, x.len(), |i, d| {
            let mut xx = x.clone();
            xx[i] += d;
            dot(&base.forward(&xx).0, &r)
        }, 1e-3, 2e-2);
        let gg = ln.gamma.grad.clone();
        check("ln.dgamma", &gg, 6, |i, d| {
            let mut l = base.clone();
            l.gamma.value[i] += d;
            dot(&l.forward(&x).0, &r)
        }, 1e-2, 1e-2);
    }

    #[test]
    fn activation_gradients() {
        let x: Vec<f32> = (0..41).map(|i| -4.0 + 0.2 * i as f32).collect();
        let ones = vec![1.0; x.len()];
        let ds = silu_backward(&x, &ones);
        let dg = gelu_backward(&x, &ones);
        for i in 0..x.len() {
            let h = 1e-3f32;
            let ns = (silu(&[x[i] + h])[0] - silu(&[x[i] - h])[0]) / (2.0 * h);
            let ng = (gelu(&[x[i] + h])[0] - gelu(&[x[i] - h])[0]) / (2.0 * h);
            assert!((ds[i] - ns).abs() < 1e-2, "silu at {}", x[i]);
            assert!((dg[i] - ng).abs() < 1e-2, "gelu at {}", x[i]);
        }
    }

    #[test]
    fn space_depth_round_trip() {
        let (b, h, w, c) = (2, 4, 6, 3);
        let x: Vec<f32> = (0..b * h * w * c).map(|i| i as f32).collect();
        let s = space_to_depth(&x, b, h, w, c, 2);
        assert_eq!(depth_to_space(&s, b, h / 2, w / 2, 4 * c, 2), x);
        // top-left output pixel gathers the 2x2 block in (fy, fx) order
        assert_eq!(&s[..12], &[0., 1., 2., 3., 4., 5., 18., 19., 20., 21., 22., 23.]);
    }

    #[test]
    fn embedding_gradient_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut e = Embedding::new("e", 4, 2, 0.1, &mut rng);
        e.backward(&[1, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&e.table.grad, &[0., 0., 6., 8., 0., 0., 3., 4.]);
    }
}
