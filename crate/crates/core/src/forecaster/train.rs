use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, Forecaster, ForecasterConfig};
use crate::error::{Error, Result};
use crate::grid::{RadarSequence, ReflectivityField};
use crate::nn::{AdamW, AdamWConfig, LrSchedule, Module};
use crate::tokenizer::{TokenGrid, Tokenizer};

/// Token grids of whole sequences, encoded once by a frozen tokenizer.
#[derive(Debug, Clone)]
pub struct TokenDataset {
    /// `sequences[s][t]` is frame `t` of sequence `s`.
    pub sequences: Vec<Vec<TokenGrid>>,
    pub vocab_size: usize,
    pub tokenizer_sha256: String,
}

impl TokenDataset {
    pub fn encode(tokenizer: &Tokenizer, tokenizer_sha256: &str, sequences: &[RadarSequence]) -> Result<Self> {
        let mut out = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let frames: Vec<&ReflectivityField> = seq.frames().iter().collect();
            let mut grids = Vec::with_capacity(frames.len());
            for chunk in frames.chunks(32) {
                grids.extend(tokenizer.encode_batch(chunk)?);
            }
            out.push(grids);
        }
        Ok(Self {
            sequences: out,
            vocab_size: tokenizer.config.codebook_size,
            tokenizer_sha256: tokenizer_sha256.to_string(),
        })
    }

    /// Every `(sequence, first frame)` pair of a contiguous `frames`-long window.
    pub fn windows(&self, frames: usize) -> Vec<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, g)| (0..(g.len() + 1).saturating_sub(frames)).map(move |t| (s, t)))
            .collect()
    }

    fn check(&self, config: &ForecasterConfig) -> Result<()> {
        if self.vocab_size != config.vocab_size {
            return Err(Error::VocabMismatch {
                forecaster: config.vocab_size,
                tokenizer: self.vocab_size,
            });
        }
        for g in self.sequences.iter().flatten() {
            let (h, w) = g.shape();
            if h < config.tokens_h || w < config.tokens_w {
                return Err(Error::CropTooLarge {
                    crop: (config.tokens_h, config.tokens_w),
                    frame: (h, w),
                });
            }
        }
        Ok(())
    }

    /// Flattened ids of one window cropped at a random token offset.
    fn sample(&self, config: &ForecasterConfig, (s, t0): (usize, usize), rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        let grids = &self.sequences[s][t0..t0 + config.context_frames];
        let (h, w) = grids[0].shape();
        let r0 = rng.random_range(0..=h - config.tokens_h);
        let c0 = rng.random_range(0..=w - config.tokens_w);
        for g in grids {
            for r in r0..r0 + config.tokens_h {
                for c in c0..c0 + config.tokens_w {
                    out.push(g.indices[[r, c]]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub min_lr_ratio: f32,
    pub weight_decay: f32,
    pub grad_clip: f64,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Held-out windows drawn (with a fixed seed) for each evaluation.
    pub eval_windows: usize,
}

impl Default for ForecasterSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 500,
            eval_windows: 256,
        }
    }
}

impl ForecasterSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterLogRecord {
    pub step: usize,
    pub lr: f32,
    pub loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ForecasterRun {
    pub forecaster: Forecaster,
    pub log: Vec<ForecasterLogRecord>,
    /// Held-out cross-entropy of the returned model, when a validation set was given.
    pub final_val_loss: Option<f64>,
}

/// Mean next-token cross-entropy (nats) on `n_windows` windows drawn with `seed`.
pub fn evaluate_forecaster(forecaster: &Forecaster, data: &TokenDataset, n_windows: usize, seed: u64) -> Result<f64> {
    let config = &forecaster.config;
    data.check(config)?;
    let windows = data.windows(config.context_frames);
    if windows.is_empty() || n_windows == 0 {
        return Err(Error::Empty("no evaluation windows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.context_length();
    let (mut total, mut n) = (0.0, 0usize);
    let mut ids = Vec::with_capacity(l);
    for _ in 0..n_windows {
        let w = windows[rng.random_range(0..windows.len())];
        ids.clear();
        data.sample(config, w, &mut rng, &mut ids);
        let (logits, _) = forecaster.gpt.forward(&ids[..l - 1], 1, l - 1);
        total += cross_entropy(&logits, &ids[1..], config.vocab_size).0;
        n += 1;
    }
    Ok(total / n as f64)
}

const EVAL_SEED: u64 = 0xe7a1;

/// Train on shuffled stride-1 windows with random spatial crops.
///
/// Each window of `L` tokens yields `L − 1` next-token targets, so the last
/// position never needs to be fed as input. Deterministic for fixed inputs.
pub fn train_forecaster(
    train: &TokenDataset,
    val: Option<&TokenDataset>,
    config: &ForecasterConfig,
    schedule: &ForecasterSchedule,
    mut on_log: impl FnMut(&ForecasterLogRecord),
) -> Result<ForecasterRun> {
    config.validate()?;
    schedule.validate()?;
    train.check(config)?;
    if let Some(v) = val {
        v.check(config)?;
    }
    let mut windows = train.windows(config.context_frames);
    if windows.is_empty() {
        return Err(Error::Empty("no training windows"));
    }
    let mut model = Forecaster::new(config.clone(), train.tokenizer_sha256.clone(), schedule.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0xf0ca_57e5);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: schedule.weight_decay,
        ..AdamWConfig::default()
    });
    let lr_at = LrSchedule {
        base: schedule.lr,
        warmup_steps: schedule.warmup_steps,
        total_steps: schedule.steps,
        min_ratio: schedule.min_lr_ratio,
    };
    let l = config.context_length();
    let b = schedule.batch_size;
    let mut cursor = windows.len();
    let mut ids = Vec::with_capacity(l);
    let mut inputs = Vec::with_capacity(b * (l - 1));
    let mut targets = Vec::with_capacity(b * (l - 1));
    let mut log = Vec::with_capacity(schedule.steps);
    let evaluate = |m: &Forecaster| val.map(|v| evaluate_forecaster(m, v, schedule.eval_windows, EVAL_SEED)).transpose();

    for step in 0..schedule.steps {
        inputs.clear();
        targets.clear();
        for _ in 0..b {
            if cursor == windows.len() {
                windows.shuffle(&mut rng);
                cursor = 0;
            }
            ids.clear();
            train.sample(config, windows[cursor], &mut rng, &mut ids);
            cursor += 1;
            inputs.extend_from_slice(&ids[..l - 1]);
            targets.extend_from_slice(&ids[1..]);
        }
        model.zero_grad();
        let (logits, cache) = model.gpt.forward(&inputs, b, l - 1);
        let (loss, dl) = cross_entropy(&logits, &targets, config.vocab_size);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        model.gpt.backward(&cache, &dl);
        let grad_norm = model.clip_grad_norm(schedule.grad_clip);
        let lr = lr_at.at(step);
        opt.step(&mut model, lr);
        model.step += 1;

        let last = step + 1 == schedule.steps;
        let due = schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0;
        let val_loss = if due || last { evaluate(&model)? } else { None };
        let rec = ForecasterLogRecord {
            step,
            lr,
            loss,
            grad_norm,
            val_loss,
        };
        on_log(&rec);
        log.push(rec);
    }
    let final_val_loss = match log.last() {
        Some(r) => r.val_loss,
        None => evaluate(&model)?,
    };
    Ok(ForecasterRun {
        forecaster: model,
        log,
        final_val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn config() -> ForecasterConfig {
        ForecasterConfig {
            vocab_size: 8,
            context_frames: 3,
            tokens_h: 2,
            tokens_w: 2,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 16,
        }
    }

    /// Tokens that shift one column per frame: fully predictable from the past.
    fn dataset(n_seq: usize) -> TokenDataset {
        let sequences = (0..n_seq)
            .map(|s| {
                (0..6)
                    .map(|t| TokenGrid::new(Array2::from_shape_fn((3, 3), |(r, c)| (r + c + t + s) % 8)))
                    .collect()
            })
            .collect();
        TokenDataset {
            sequences,
            vocab_size: 8,
            tokenizer_sha256: "h".into(),
        }
    }

    #[test]
    fn windows_are_stride_one() {
        let d = dataset(2);
        let w = d.windows(3);
        assert_eq!(w.len(), 8);
        assert_eq!(w[0], (0, 0));
        assert_eq!(w[3], (0, 3));
        assert_eq!(w[4], (1, 0));
    }

    #[test]
    fn zero_steps_is_uniform_baseline() {
        let d = dataset(4);
        let f = Forecaster::new(config(), "h", 0).unwrap();
        let ce = evaluate_forecaster(&f, &d, 64, 1).unwrap();
        let ln_k = 8f64.ln();
        assert!((ce - ln_k).abs() < 0.05 * ln_k, "{ce} vs {ln_k}");
    }

    #[test]
    fn learns_and_is_deterministic() {
        let d = dataset(4);
        let sched = ForecasterSchedule {
            steps: 150,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 10,
            eval_every: 50,
            eval_windows: 32,
            ..ForecasterSchedule::default()
        };
        let a = train_forecaster(&d, Some(&d), &config(), &sched, |_| {}).unwrap();
        let b = train_forecaster(&d, Some(&d), &config(), &sched, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.forecaster.tokenizer_sha256, "h");
        assert!(a.final_val_loss.unwrap() < 0.5 * 8f64.ln(), "{:?}", a.final_val_loss);
        assert_eq!(a.log.iter().filter(|r| r.val_loss.is_some()).count(), 3);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let d = dataset(1);
        let cfg = ForecasterConfig { vocab_size: 16, ..config() };
        let r = train_forecaster(&d, None, &cfg, &ForecasterSchedule::default(), |_| {});
        assert!(matches!(r, Err(Error::VocabMismatch { forecaster: 16, tokenizer: 8 })));
    }
}
