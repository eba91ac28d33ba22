//! Spatial tokenizer: a vector-quantized autoencoder that maps each
//! `2^α × 2^α` reflectivity patch to one of `K` codebook indices and back.

pub mod loss;
pub mod model;
pub mod quantize;
mod train;

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::{PreprocessSpec, RadarSequence, ReflectivityField};
use crate::nn::{Module, Param};

pub use loss::{mwae_loss, sigmoid, ReconLoss};
pub use model::{channel_schedule, Decoder, Dims, Discriminator, Encoder};
pub use quantize::{quantize, quantize_backward, Codebook, Quantized};
pub use train::{
    evaluate_reconstruction, train_tokenizer, ReconstructionEval, TokenizerLogRecord,
    TokenizerRun, TokenizerSchedule,
};

const CHECKPOINT_KIND: &str = "tokenizer";

/// Affine map between dBZ and model units: `x = (dbz - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub offset_dbz: f32,
    pub scale_dbz: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        // [0, 60] dBZ -> [-3, 3], where the sigmoid spans 0.047..0.953
        Self {
            offset_dbz: 30.0,
            scale_dbz: 10.0,
        }
    }
}

impl Normalization {
    pub fn to_model(&self, dbz: f32) -> f32 {
        (dbz - self.offset_dbz) / self.scale_dbz
    }

    pub fn to_dbz(&self, x: f32) -> f32 {
        x * self.scale_dbz + self.offset_dbz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Number of 2× downsampling steps; patch size is `2^alpha`.
    pub alpha: usize,
    pub bottleneck_channels: usize,
    pub codebook_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub use_adversarial: bool,
    pub commitment_beta: f32,
    pub dynamic_range_levels: usize,
    pub recon_loss: ReconLoss,
    pub normalization: Normalization,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            alpha: 3,
            bottleneck_channels: 8,
            codebook_size: 64,
            base_channels: 16,
            max_channels: 64,
            use_adversarial: false,
            commitment_beta: 0.25,
            dynamic_range_levels: 601,
            recon_loss: ReconLoss::Mwae,
            normalization: Normalization::default(),
        }
    }
}

impl TokenizerConfig {
    /// The large configuration: 16× downsampling and a 1024-entry codebook.
    pub fn paper_scale() -> Self {
        Self {
            alpha: 4,
            codebook_size: 1024,
            base_channels: 128,
            max_channels: 512,
            ..Self::default()
        }
    }

    pub fn patch_size(&self) -> usize {
        1 << self.alpha
    }

    pub fn channels(&self) -> Vec<usize> {
        channel_schedule(self.alpha, self.base_channels, self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1 || self.alpha > 8 {
            return Err(Error::config(format!("alpha must be in 1..=8, got {}", self.alpha)));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size must be at least 2"));
        }
        if self.bottleneck_channels < 1 || self.base_channels < 1 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::config("max_channels must be >= base_channels"));
        }
        if !(self.commitment_beta >= 0.0 && self.commitment_beta.is_finite()) {
            return Err(Error::config("commitment_beta must be finite and non-negative"));
        }
        if self.dynamic_range_levels < 2 {
            return Err(Error::config("dynamic_range_levels must be at least 2"));
        }
        let n = self.normalization;
        if !(n.scale_dbz > 0.0 && n.scale_dbz.is_finite() && n.offset_dbz.is_finite()) {
            return Err(Error::config("normalization scale must be positive and finite"));
        }
        Ok(())
    }

    /// Token-grid shape for a field, or the padding needed to make it divisible.
    pub fn token_shape(&self, hw: (usize, usize)) -> Result<(usize, usize)> {
        let p = self.patch_size();
        if !hw.0.is_multiple_of(p) || !hw.1.is_multiple_of(p) || hw.0 == 0 || hw.1 == 0 {
            return Err(Error::NotDivisible {
                dims: hw,
                patch: p,
                padded: (hw.0.div_ceil(p).max(1) * p, hw.1.div_ceil(p).max(1) * p),
            });
        }
        Ok((hw.0 / p, hw.1 / p))
    }
}

/// `(H·W·levels) / (h·w·K)`: input information over token information,
/// counting each pixel and token as one symbol from its alphabet.
pub fn compression_ratio(
    config: &TokenizerConfig,
    input_hw: (usize, usize),
    dynamic_range_levels: usize,
) -> Result<f64> {
    let (h, w) = config.token_shape(input_hw)?;
    Ok((input_hw.0 * input_hw.1 * dynamic_range_levels) as f64
        / (h * w * config.codebook_size) as f64)
}

/// Codebook indices for one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub indices: Array2<usize>,
}

impl TokenGrid {
    pub fn new(indices: Array2<usize>) -> Self {
        Self { indices }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.indices.dim()
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= k) {
            Some(&index) => Err(Error::TokenOutOfRange { index, size: k }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerMeta {
    config: TokenizerConfig,
    preprocess: PreprocessSpec,
    step: u64,
}

/// A tokenizer's trainable state plus everything needed to apply it.
///
/// `encode`/`decode` take `&self`, so one loaded tokenizer can serve
/// concurrent callers.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    /// Output lattice for decoded fields.
    pub preprocess: PreprocessSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub step: u64,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let preprocess = PreprocessSpec::default();
        if preprocess.dynamic_range_levels() != config.dynamic_range_levels {
            return Err(Error::config(format!(
                "dynamic_range_levels {} does not match the preprocessing lattice ({})",
                config.dynamic_range_levels,
                preprocess.dynamic_range_levels()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels();
        let encoder = Encoder::new(&ch, config.bottleneck_channels, &mut rng);
        let decoder = Decoder::new(&ch, config.bottleneck_channels, &mut rng);
        let codebook = Codebook::random(config.codebook_size, config.bottleneck_channels, &mut rng);
        Ok(Self {
            config,
            preprocess,
            encoder,
            decoder,
            codebook,
            step: 0,
        })
    }

    /// Pack fields (all the same shape) into a normalized NHWC batch.
    pub fn normalize_batch(&self, fields: &[&ReflectivityField]) -> Result<(Vec<f32>, Dims)> {
        let first = fields.first().ok_or(Error::Empty("no fields to encode"))?;
        let hw = first.shape();
        self.config.token_shape(hw)?;
        let norm = self.config.normalization;
        let mut x = Vec::with_capacity(fields.len() * hw.0 * hw.1);
        for f in fields {
            if f.shape() != hw {
                return Err(Error::ShapeMismatch {
                    expected: vec![hw.0, hw.1],
                    found: vec![f.height(), f.width()],
                });
            }
            let bad = f.values.iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFinite { count: bad });
            }
            x.extend(f.values.iter().map(|&v| norm.to_model(v)));
        }
        Ok((x, Dims::new(fields.len(), hw.0, hw.1)))
    }

    /// Continuous encoder output `(b, h, w, d)` before quantization.
    pub fn latents(&self, fields: &[&ReflectivityField]) -> Result<(Vec<f32>, Dims)> {
        let (x, d) = self.normalize_batch(fields)?;
        let (z, _) = self.encoder.forward(&x, d);
        let p = self.config.patch_size();
        Ok((z, Dims::new(d.b, d.h / p, d.w / p)))
    }

    pub fn encode(&self, field: &ReflectivityField) -> Result<TokenGrid> {
        Ok(self.encode_batch(&[field])?.pop().expect("one grid per field"))
    }

    pub fn encode_batch(&self, fields: &[&ReflectivityField]) -> Result<Vec<TokenGrid>> {
        let (z, d) = self.latents(fields)?;
        let q = quantize(&z, &self.codebook)?;
        Ok(q.indices
            .chunks_exact(d.h * d.w)
            .map(|c| {
                TokenGrid::new(Array2::from_shape_vec((d.h, d.w), c.to_vec()).expect("grid shape"))
            })
            .collect())
    }

    /// Decoder output in model units, before mapping back to dBZ.
    pub fn decode_raw(&self, grids: &[&TokenGrid]) -> Result<(Vec<f32>, Dims)> {
        let first = grids.first().ok_or(Error::Empty("no token grids to decode"))?;
        let hw = first.shape();
        let dim = self.codebook.dim;
        let mut zq = Vec::with_capacity(grids.len() * hw.0 * hw.1 * dim);
        for g in grids {
            if g.shape() != hw {
                return Err(Error::ShapeMismatch {
                    expected: vec![hw.0, hw.1],
                    found: vec![g.shape().0, g.shape().1],
                });
            }
            g.check_range(self.codebook.size)?;
            for &k in g.indices.iter() {
                zq.extend_from_slice(self.codebook.vector(k));
            }
        }
        let (y, _) = self.decoder.forward(&zq, Dims::new(grids.len(), hw.0, hw.1));
        let p = self.config.patch_size();
        Ok((y, Dims::new(grids.len(), hw.0 * p, hw.1 * p)))
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<ReflectivityField> {
        Ok(self.decode_batch(&[grid])?.pop().expect("one field per grid"))
    }

    /// Decode to dBZ fields on the preprocessing lattice.
    pub fn decode_batch(&self, grids: &[&TokenGrid]) -> Result<Vec<ReflectivityField>> {
        let (y, d) = self.decode_raw(grids)?;
        Ok(y.chunks_exact(d.h * d.w)
            .map(|c| self.to_field(c, (d.h, d.w)))
            .collect())
    }

    /// Map model-unit values back to a quantized dBZ field.
    pub fn to_field(&self, values: &[f32], hw: (usize, usize)) -> ReflectivityField {
        let norm = self.config.normalization;
        let v = values
            .iter()
            .map(|&x| {
                let dbz = norm.to_dbz(x);
                // a non-finite decoder output can only come from a broken model; map it to the floor
                let dbz = if dbz.is_finite() { dbz } else { self.preprocess.clip_min_dbz as f32 };
                self.preprocess.quantize_value(dbz)
            })
            .collect();
        ReflectivityField::new(Array2::from_shape_vec(hw, v).expect("field shape"))
    }

    /// Encode then decode.
    pub fn reconstruct(&self, fields: &[&ReflectivityField]) -> Result<Vec<ReflectivityField>> {
        let grids = self.encode_batch(fields)?;
        self.decode_batch(&grids.iter().collect::<Vec<_>>())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = TokenizerMeta {
            config: self.config.clone(),
            preprocess: self.preprocess,
            step: self.step,
        };
        checkpoint::to_bytes(CHECKPOINT_KIND, &meta, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let loaded = checkpoint::from_bytes::<TokenizerMeta>(CHECKPOINT_KIND, bytes)?;
        let meta = loaded.meta.clone();
        meta.preprocess.validate()?;
        let mut tok = Tokenizer::new(meta.config, 0)?;
        tok.preprocess = meta.preprocess;
        tok.step = meta.step;
        loaded.restore(&mut tok)?;
        if tok.codebook.vectors.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite codebook vector".into()));
        }
        Ok(tok)
    }

    /// Write the checkpoint and return its SHA-256.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        checkpoint::write_file(path.as_ref(), &bytes)?;
        Ok(checkpoint::sha256_hex(&bytes))
    }

    /// Read a checkpoint, returning it with its SHA-256.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, checkpoint::sha256_hex(&bytes)))
    }
}

impl Module for Tokenizer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit_params(f);
        self.codebook.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params_mut(f);
        self.codebook.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}

/// Fraction of codebook entries selected at least once over every frame of `sequences`.
pub fn codebook_utilization(tokenizer: &Tokenizer, sequences: &[RadarSequence]) -> Result<f64> {
    let frames: Vec<&ReflectivityField> = sequences.iter().flat_map(|s| s.frames()).collect();
    if frames.is_empty() {
        return Err(Error::Empty("no frames to measure codebook utilization on"));
    }
    let mut used = HashSet::new();
    for chunk in frames.chunks(32) {
        for g in tokenizer.encode_batch(chunk)? {
            used.extend(g.indices.iter().copied());
        }
    }
    Ok(used.len() as f64 / tokenizer.codebook.size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TokenizerConfig {
        TokenizerConfig {
            alpha: 2,
            base_channels: 4,
            max_channels: 8,
            codebook_size: 16,
            bottleneck_channels: 4,
            ..TokenizerConfig::default()
        }
    }

    fn field(h: usize, w: usize) -> ReflectivityField {
        ReflectivityField::new(Array2::from_shape_fn((h, w), |(r, c)| {
            ((r * 7 + c * 3) % 61) as f32
        }))
    }

    #[test]
    fn compression_ratio_values() {
        let paper = TokenizerConfig::paper_scale();
        let r = compression_ratio(&paper, (192, 192), 601).unwrap();
        // 192²·601 / (12²·1024)
        assert!((r - 150.25).abs() < 1e-9, "{r}");
        let desk = TokenizerConfig::default();
        assert_eq!(compression_ratio(&desk, (128, 128), 601).unwrap(), 601.0);
        let unit = TokenizerConfig {
            codebook_size: 64 * 601,
            ..desk.clone()
        };
        assert_eq!(compression_ratio(&unit, (8, 8), 601).unwrap(), 1.0);
    }

    #[test]
    fn token_shapes() {
        let paper = TokenizerConfig::paper_scale();
        assert_eq!(paper.token_shape((192, 192)).unwrap(), (12, 12));
        assert_eq!(paper.token_shape((128, 128)).unwrap(), (8, 8));
        match paper.token_shape((100, 64)) {
            Err(Error::NotDivisible { padded, patch, .. }) => {
                assert_eq!(patch, 16);
                assert_eq!(padded, (112, 64));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_decode_shapes_and_range() {
        let tok = Tokenizer::new(small(), 1).unwrap();
        let f = field(16, 24);
        let g = tok.encode(&f).unwrap();
        assert_eq!(g.shape(), (4, 6));
        assert_eq!(g, tok.encode(&f).unwrap());
        let out = tok.decode(&g).unwrap();
        assert_eq!(out.shape(), (16, 24));
        for &v in out.values.iter() {
            assert!((0.0..=60.0).contains(&v));
            assert_eq!(v, tok.preprocess.quantize_value(v));
        }
        let bad = TokenGrid::new(Array2::from_elem((2, 2), 16));
        assert!(matches!(tok.decode(&bad), Err(Error::TokenOutOfRange { index: 16, size: 16 })));
    }

    #[test]
    fn token_level_round_trip_is_idempotent() {
        let tok = Tokenizer::new(small(), 2).unwrap();
        let t0 = tok.encode(&field(16, 16)).unwrap();
        let t1 = tok.encode(&tok.decode(&t0).unwrap()).unwrap();
        let t2 = tok.encode(&tok.decode(&t1).unwrap()).unwrap();
        let t3 = tok.encode(&tok.decode(&t2).unwrap()).unwrap();
        // once a grid is a fixed point of decode→encode it stays one
        if t1 == t2 {
            assert_eq!(t2, t3);
        }
        assert_eq!(t1.shape(), t0.shape());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let tok = Tokenizer::new(small(), 3).unwrap();
        let bytes = tok.to_bytes().unwrap();
        let back = Tokenizer::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let probe = [field(16, 16), field(16, 16).clone()];
        let refs: Vec<_> = probe.iter().collect();
        assert_eq!(tok.latents(&refs).unwrap().0, back.latents(&refs).unwrap().0);
        let g = tok.encode(&probe[0]).unwrap();
        assert_eq!(tok.decode(&g).unwrap(), back.decode(&g).unwrap());
    }

    #[test]
    fn utilization_counts_distinct_tokens() {
        let tok = Tokenizer::new(small(), 4).unwrap();
        let f = field(8, 8);
        let seq = RadarSequence::new(vec![f.clone(), f.clone(), f.clone()], 5).unwrap();
        let g = tok.encode(&f).unwrap();
        let distinct: HashSet<_> = g.indices.iter().collect();
        let u = codebook_utilization(&tok, &[seq]).unwrap();
        assert_eq!(u, distinct.len() as f64 / 16.0);
        assert!(u <= 4.0 / 16.0);
        assert!(matches!(codebook_utilization(&tok, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn rejects_invalid_configs() {
        for bad in [
            TokenizerConfig { alpha: 0, ..small() },
            TokenizerConfig { codebook_size: 1, ..small() },
            TokenizerConfig { bottleneck_channels: 0, ..small() },
            TokenizerConfig { dynamic_range_levels: 300, ..small() },
        ] {
            assert!(matches!(Tokenizer::new(bad, 0), Err(Error::InvalidConfig(_))));
        }
    }
}
