//! Convolutional encoder, decoder and patch discriminator.
//!
//! Every down step is a 2×2 space-to-depth followed by a pointwise projection
//! (a stride-2, kernel-2 convolution); every up step is the transpose (pointwise
//! projection then depth-to-space). Residual blocks of two 3×3 convolutions mix
//! spatial context at every resolution below the input.

use rand::Rng;

use crate::nn::{
    depth_to_space, silu, silu_backward, space_to_depth, Conv2d, ConvCache, Linear, Module, Param,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(b: usize, h: usize, w: usize) -> Self {
        Self { b, h, w }
    }
    fn down(self) -> Self {
        Self::new(self.b, self.h / 2, self.w / 2)
    }
    fn up(self) -> Self {
        Self::new(self.b, self.h * 2, self.w * 2)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct ResCache {
    x: Vec<f32>,
    u1: Vec<f32>,
    k1: ConvCache,
    k2: ConvCache,
}

impl ResBlock {
    pub fn new<R: Rng>(name: &str, c: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), c, c, 3, rng);
        let mut conv2 = Conv2d::new(&format!("{name}.conv2"), c, c, 3, rng);
        // start close to identity
        conv2.lin.w.value.iter_mut().for_each(|v| *v *= 0.1);
        Self { conv1, conv2 }
    }

    pub fn forward(&self, x: &[f32], d: Dims) -> (Vec<f32>, ResCache) {
        let (u1, k1) = self.conv1.forward(&silu(x), d.b, d.h, d.w);
        let (u2, k2) = self.conv2.forward(&silu(&u1), d.b, d.h, d.w);
        let y = x.iter().zip(&u2).map(|(a, b)| a + b).collect();
        (
            y,
            ResCache {
                x: x.to_vec(),
                u1,
                k1,
                k2,
            },
        )
    }

    pub fn backward(&mut self, c: &ResCache, dy: &[f32]) -> Vec<f32> {
        let ds1 = self.conv2.backward(&c.k2, dy);
        let du1 = silu_backward(&c.u1, &ds1);
        let ds0 = self.conv1.backward(&c.k1, &du1);
        let dx0 = silu_backward(&c.x, &ds0);
        dy.iter().zip(&dx0).map(|(a, b)| a + b).collect()
    }
}

impl Module for ResBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
    }
}

/// Channel width at each resolution level `0..=alpha` (level 0 is full resolution).
pub fn channel_schedule(alpha: usize, base: usize, max: usize) -> Vec<usize> {
    (0..=alpha).map(|l| (base << l.min(16)).min(max)).collect()
}

#[derive(Debug, Clone)]
struct DownLevel {
    proj: Linear,
    res: ResBlock,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    levels: Vec<DownLevel>,
    out: Linear,
    channels: Vec<usize>,
}

struct DownCache {
    s2d: Vec<f32>,
    u: Vec<f32>,
    res: ResCache,
    dims: Dims,
    cin: usize,
}

pub struct EncoderCache {
    stem: ConvCache,
    a: Vec<f32>,
    levels: Vec<DownCache>,
    last: Vec<f32>,
}

impl Encoder {
    pub fn new<R: Rng>(channels: &[usize], latent_dim: usize, rng: &mut R) -> Self {
        let alpha = channels.len() - 1;
        let stem = Conv2d::new("enc.stem", 1, channels[0], 3, rng);
        let levels = (1..=alpha)
            .map(|l| DownLevel {
                proj: Linear::lecun(&format!("enc.down{l}"), 4 * channels[l - 1], channels[l], rng),
                res: ResBlock::new(&format!("enc.res{l}"), channels[l], rng),
            })
            .collect();
        let out = Linear::lecun("enc.out", channels[alpha], latent_dim, rng);
        Self {
            stem,
            levels,
            out,
            channels: channels.to_vec(),
        }
    }

    /// `x` is `(b, h, w, 1)`; returns latents `(b, h/2^α, w/2^α, d)`.
    pub fn forward(&self, x: &[f32], d: Dims) -> (Vec<f32>, EncoderCache) {
        let (a, stem) = self.stem.forward(x, d.b, d.h, d.w);
        let mut s = silu(&a);
        let mut dims = d;
        let mut caches = Vec::with_capacity(self.levels.len());
        for (i, lvl) in self.levels.iter().enumerate() {
            let cin = self.channels[i];
            let s2d = space_to_depth(&s, dims.b, dims.h, dims.w, cin, 2);
            dims = dims.down();
            let u = lvl.proj.forward(&s2d);
            let (h, res) = lvl.res.forward(&silu(&u), dims);
            caches.push(DownCache {
                s2d,
                u,
                res,
                dims,
                cin,
            });
            s = h;
        }
        let z = self.out.forward(&s);
        (
            z,
            EncoderCache {
                stem,
                a,
                levels: caches,
                last: s,
            },
        )
    }

    pub fn backward(&mut self, c: &EncoderCache, dz: &[f32]) {
        let mut g = self.out.backward(&c.last, dz);
        for (lvl, lc) in self.levels.iter_mut().zip(&c.levels).rev() {
            let dv = lvl.res.backward(&lc.res, &g);
            let du = silu_backward(&lc.u, &dv);
            let ds2d = lvl.proj.backward(&lc.s2d, &du);
            let d = lc.dims;
            g = depth_to_space(&ds2d, d.b, d.h, d.w, 4 * lc.cin, 2);
        }
        let da = silu_backward(&c.a, &g);
        self.stem.backward_params(&c.stem, &da);
    }
}

impl Module for Encoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.visit_params(f);
        for l in &self.levels {
            l.proj.visit_params(f);
            l.res.visit_params(f);
        }
        self.out.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params_mut(f);
        for l in &mut self.levels {
            l.proj.visit_params_mut(f);
            l.res.visit_params_mut(f);
        }
        self.out.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
struct UpLevel {
    proj: Linear,
    res: Option<ResBlock>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    inp: Linear,
    res_top: ResBlock,
    levels: Vec<UpLevel>,
    head: Conv2d,
    channels: Vec<usize>,
}

struct UpCache {
    s_in: Vec<f32>,
    h_in: Vec<f32>,
    res: Option<ResCache>,
    dims_in: Dims,
    cout: usize,
}

pub struct DecoderCache {
    z: Vec<f32>,
    top: ResCache,
    levels: Vec<UpCache>,
    h_last: Vec<f32>,
    head: ConvCache,
}

impl DecoderCache {
    /// Input of the final convolution and its im2col buffer, used to weigh
    /// adversarial against reconstruction gradients at the last layer.
    pub fn head_cache(&self) -> &ConvCache {
        &self.head
    }
}

impl Decoder {
    pub fn new<R: Rng>(channels: &[usize], latent_dim: usize, rng: &mut R) -> Self {
        let alpha = channels.len() - 1;
        let inp = Linear::lecun("dec.in", latent_dim, channels[alpha], rng);
        let res_top = ResBlock::new("dec.res_top", channels[alpha], rng);
        let levels = (1..=alpha)
            .rev()
            .map(|l| UpLevel {
                proj: Linear::lecun(&format!("dec.up{l}"), channels[l], 4 * channels[l - 1], rng),
                res: (l > 1).then(|| ResBlock::new(&format!("dec.res{}", l - 1), channels[l - 1], rng)),
            })
            .collect();
        let head = Conv2d::new("dec.head", channels[0], 1, 3, rng);
        Self {
            inp,
            res_top,
            levels,
            head,
            channels: channels.to_vec(),
        }
    }

    /// `z` is `(b, h, w, d)` at token resolution; returns `(b, h·2^α, w·2^α, 1)` logits.
    pub fn forward(&self, z: &[f32], d: Dims) -> (Vec<f32>, DecoderCache) {
        let alpha = self.channels.len() - 1;
        let a = self.inp.forward(z);
        let (mut h, top) = self.res_top.forward(&a, d);
        let mut dims = d;
        let mut caches = Vec::with_capacity(alpha);
        for (i, lvl) in self.levels.iter().enumerate() {
            let cout = self.channels[alpha - 1 - i];
            let s = silu(&h);
            let u = lvl.proj.forward(&s);
            let v = depth_to_space(&u, dims.b, dims.h, dims.w, 4 * cout, 2);
            let dims_in = dims;
            dims = dims.up();
            let (next, res) = match &lvl.res {
                Some(r) => {
                    let (o, c) = r.forward(&v, dims);
                    (o, Some(c))
                }
                None => (v, None),
            };
            caches.push(UpCache {
                s_in: s,
                h_in: h,
                res,
                dims_in,
                cout,
            });
            h = next;
        }
        let (y, head) = self.head.forward(&silu(&h), dims.b, dims.h, dims.w);
        (
            y,
            DecoderCache {
                z: z.to_vec(),
                top,
                levels: caches,
                h_last: h,
                head,
            },
        )
    }

    pub fn backward(&mut self, c: &DecoderCache, dy: &[f32]) -> Vec<f32> {
        let ds = self.head.backward(&c.head, dy);
        let mut g = silu_backward(&c.h_last, &ds);
        for (lvl, lc) in self.levels.iter_mut().zip(&c.levels).rev() {
            let dv = match (&mut lvl.res, &lc.res) {
                (Some(r), Some(rc)) => r.backward(rc, &g),
                _ => g,
            };
            let d = lc.dims_in;
            let du = space_to_depth(&dv, d.b, d.h * 2, d.w * 2, lc.cout, 2);
            let ds = lvl.proj.backward(&lc.s_in, &du);
            g = silu_backward(&lc.h_in, &ds);
        }
        let da = self.res_top.backward(&c.top, &g);
        self.inp.backward(&c.z, &da)
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }
}

impl Module for Decoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.inp.visit_params(f);
        self.res_top.visit_params(f);
        for l in &self.levels {
            l.proj.visit_params(f);
            if let Some(r) = &l.res {
                r.visit_params(f);
            }
        }
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.inp.visit_params_mut(f);
        self.res_top.visit_params_mut(f);
        for l in &mut self.levels {
            l.proj.visit_params_mut(f);
            if let Some(r) = &mut l.res {
                r.visit_params_mut(f);
            }
        }
        self.head.visit_params_mut(f);
    }
}

/// Patch discriminator: one logit per `4×4` input patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    stem: Conv2d,
    down1: Linear,
    down2: Linear,
    head: Conv2d,
    c: usize,
}

pub struct DiscCache {
    stem: ConvCache,
    a0: Vec<f32>,
    s1: Vec<f32>,
    a1: Vec<f32>,
    s2: Vec<f32>,
    a2: Vec<f32>,
    head: ConvCache,
    dims: Dims,
}

impl Discriminator {
    pub fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        Self {
            stem: Conv2d::new("disc.stem", 1, c, 3, rng),
            down1: Linear::lecun("disc.down1", 4 * c, 2 * c, rng),
            down2: Linear::lecun("disc.down2", 8 * c, 4 * c, rng),
            head: Conv2d::new("disc.head", 4 * c, 1, 3, rng),
            c,
        }
    }

    pub fn forward(&self, x: &[f32], d: Dims) -> (Vec<f32>, DiscCache) {
        let c = self.c;
        let (a0, stem) = self.stem.forward(x, d.b, d.h, d.w);
        let s1 = space_to_depth(&silu(&a0), d.b, d.h, d.w, c, 2);
        let a1 = self.down1.forward(&s1);
        let d1 = d.down();
        let s2 = space_to_depth(&silu(&a1), d1.b, d1.h, d1.w, 2 * c, 2);
        let a2 = self.down2.forward(&s2);
        let d2 = d1.down();
        let (y, head) = self.head.forward(&silu(&a2), d2.b, d2.h, d2.w);
        (
            y,
            DiscCache {
                stem,
                a0,
                s1,
                a1,
                s2,
                a2,
                head,
                dims: d,
            },
        )
    }

    /// Returns `dL/dx`; parameter gradients are accumulated only when `params` is true.
    pub fn backward(&mut self, cc: &DiscCache, dy: &[f32], params: bool) -> Vec<f32> {
        let c = self.c;
        let d = cc.dims;
        let (d1, d2) = (d.down(), d.down().down());
        let g = if params {
            self.head.backward(&cc.head, dy)
        } else {
            self.head.input_grad(&cc.head, dy)
        };
        let g = silu_backward(&cc.a2, &g);
        let g = if params {
            self.down2.backward(&cc.s2, &g)
        } else {
            self.down2.input_grad(&g)
        };
        let g = depth_to_space(&g, d2.b, d2.h, d2.w, 8 * c, 2);
        let g = silu_backward(&cc.a1, &g);
        let g = if params {
            self.down1.backward(&cc.s1, &g)
        } else {
            self.down1.input_grad(&g)
        };
        let g = depth_to_space(&g, d1.b, d1.h, d1.w, 4 * c, 2);
        let g = silu_backward(&cc.a0, &g);
        if params {
            self.stem.backward(&cc.stem, &g)
        } else {
            self.stem.input_grad(&cc.stem, &g)
        }
    }
}

impl Module for Discriminator {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.visit_params(f);
        self.down1.visit_params(f);
        self.down2.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params_mut(f);
        self.down1.visit_params_mut(f);
        self.down2.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}
