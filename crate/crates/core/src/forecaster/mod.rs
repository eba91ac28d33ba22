//! Causal transformer that predicts the next codebook index of a flattened
//! spatiotemporal token sequence.
//!
//! Sequences are frame-major (oldest frame first) and row-major within each
//! frame. There are no separator tokens; the frame layout is carried by the
//! position code alone.

mod model;
mod train;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::{cross_entropy, position_encoding, softmax, Gpt, GptCache};
pub use train::{
    evaluate_forecaster, train_forecaster, ForecasterLogRecord, ForecasterRun, ForecasterSchedule,
    TokenDataset,
};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tokenizer::{TokenGrid, Tokenizer};

const CHECKPOINT_KIND: &str = "forecaster";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub vocab_size: usize,
    /// Frames per context window, `T`.
    pub context_frames: usize,
    pub tokens_h: usize,
    pub tokens_w: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_frames: 4,
            tokens_h: 4,
            tokens_w: 4,
            n_layers: 4,
            n_heads: 4,
            embed_dim: 128,
        }
    }
}

impl ForecasterConfig {
    /// Same network with a different context geometry.
    pub fn with_geometry(&self, frames: usize, tokens_h: usize, tokens_w: usize) -> Self {
        Self {
            context_frames: frames,
            tokens_h,
            tokens_w,
            ..self.clone()
        }
    }

    /// 8 frames of 16×16 tokens (2048 positions).
    pub fn large_context(&self) -> Self {
        self.with_geometry(8, 16, 16)
    }

    /// 8 frames of 8×8 tokens (512 positions).
    pub fn small_context(&self) -> Self {
        self.with_geometry(8, 8, 8)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_h * self.tokens_w
    }

    pub fn context_length(&self) -> usize {
        self.context_frames * self.tokens_per_frame()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.context_frames,
            self.tokens_h,
            self.tokens_w,
            self.n_layers,
            self.n_heads,
            self.embed_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config("forecaster dimensions must be positive"));
        }
        if self.context_frames < 2 {
            return Err(Error::config("context_frames must be at least 2"));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        // three sin/cos bands need at least one pair each
        if !self.embed_dim.is_multiple_of(2) || self.embed_dim < 6 {
            return Err(Error::config("embed_dim must be even and at least 6"));
        }
        Ok(())
    }
}

/// Flattened token ids with the frame layout they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub tokens_h: usize,
    pub tokens_w: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of complete frames.
    pub fn frames(&self) -> usize {
        self.tokens.len() / (self.tokens_h * self.tokens_w)
    }

    /// Inverse of [`flatten_spatiotemporal`]; the sequence must hold whole frames.
    pub fn unflatten(&self) -> Result<Vec<TokenGrid>> {
        let n = self.tokens_h * self.tokens_w;
        if n == 0 || !self.tokens.len().is_multiple_of(n) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.tokens.len().div_ceil(n.max(1)) * n],
                found: vec![self.tokens.len()],
            });
        }
        Ok(self
            .tokens
            .chunks_exact(n)
            .map(|c| {
                TokenGrid::new(
                    Array2::from_shape_vec((self.tokens_h, self.tokens_w), c.to_vec())
                        .expect("chunk has h*w entries"),
                )
            })
            .collect())
    }
}

/// `out[t·h·w + r·w + c] = grids[t][r][c]`, oldest grid first.
pub fn flatten_spatiotemporal(grids: &[TokenGrid]) -> Result<TokenSequence> {
    let first = grids.first().ok_or(Error::Empty("no token grids to flatten"))?;
    let (h, w) = first.shape();
    let mut tokens = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.shape() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                found: vec![g.shape().0, g.shape().1],
            });
        }
        tokens.extend(g.indices.iter().copied());
    }
    Ok(TokenSequence {
        tokens,
        tokens_h: h,
        tokens_w: w,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ForecasterMeta {
    config: ForecasterConfig,
    tokenizer_sha256: String,
    step: u64,
}

/// Trained forecaster plus the hash of the tokenizer checkpoint it was trained against.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub config: ForecasterConfig,
    pub gpt: Gpt,
    pub tokenizer_sha256: String,
    pub step: u64,
}

impl Forecaster {
    pub fn new(config: ForecasterConfig, tokenizer_sha256: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            gpt: Gpt::new(&config, &mut rng),
            config,
            tokenizer_sha256: tokenizer_sha256.into(),
            step: 0,
        })
    }

    fn check_context(&self, ctx: &[usize]) -> Result<()> {
        let max = self.config.context_length();
        if ctx.is_empty() || ctx.len() > max {
            return Err(Error::ContextLength { len: ctx.len(), max });
        }
        if let Some(&bad) = ctx.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                index: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for the token following `ctx`.
    pub fn next_token_logits(&self, ctx: &[usize]) -> Result<Vec<f32>> {
        self.check_context(ctx)?;
        Ok(self.gpt.last_logits(ctx))
    }

    /// Categorical distribution over the codebook for the token following `ctx`.
    pub fn next_token_distribution(&self, ctx: &TokenSequence) -> Result<Vec<f32>> {
        Ok(softmax(&self.next_token_logits(&ctx.tokens)?))
    }

    /// Logits `(len, K)` at every position of `ctx`.
    pub fn all_logits(&self, ctx: &[usize]) -> Result<Vec<f32>> {
        self.check_context(ctx)?;
        Ok(self.gpt.forward(ctx, 1, ctx.len()).0)
    }

    /// Refuse a tokenizer whose checkpoint hash or vocabulary differs from the
    /// one this model was trained with. `allow_hash_mismatch` skips the hash check only.
    pub fn check_tokenizer(&self, tokenizer: &Tokenizer, sha256: &str, allow_hash_mismatch: bool) -> Result<()> {
        if tokenizer.config.codebook_size != self.config.vocab_size {
            return Err(Error::VocabMismatch {
                forecaster: self.config.vocab_size,
                tokenizer: tokenizer.config.codebook_size,
            });
        }
        if !allow_hash_mismatch && sha256 != self.tokenizer_sha256 {
            return Err(Error::CheckpointMismatch {
                expected: self.tokenizer_sha256.clone(),
                found: sha256.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ForecasterMeta {
            config: self.config.clone(),
            tokenizer_sha256: self.tokenizer_sha256.clone(),
            step: self.step,
        };
        checkpoint::to_bytes(CHECKPOINT_KIND, &meta, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let loaded = checkpoint::from_bytes::<ForecasterMeta>(CHECKPOINT_KIND, bytes)?;
        let meta = loaded.meta.clone();
        let mut f = Forecaster::new(meta.config, meta.tokenizer_sha256, 0)?;
        f.step = meta.step;
        loaded.restore(&mut f)?;
        Ok(f)
    }

    /// Write the checkpoint and return its SHA-256.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        checkpoint::write_file(path.as_ref(), &bytes)?;
        Ok(checkpoint::sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, checkpoint::sha256_hex(&bytes)))
    }
}

impl Module for Forecaster {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.gpt.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.gpt.visit_params_mut(f);
    }
}
