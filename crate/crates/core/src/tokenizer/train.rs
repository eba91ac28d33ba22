use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, quantize_backward, Dims, Discriminator, ReconLoss, Tokenizer, TokenizerConfig};
use crate::augment::{transform, AugmentParams};
use crate::error::{Error, Result};
use crate::grid::{RadarSequence, ReflectivityField};
use crate::nn::{AdamW, AdamWConfig, LrSchedule, Module};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSchedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Square training crop side; must be a multiple of the patch size.
    pub crop: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub min_lr_ratio: f32,
    pub weight_decay: f32,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps before the adversarial term switches on (when enabled in the config).
    pub disc_start: usize,
    pub disc_weight: f32,
    pub disc_lr: f32,
    /// Reseed codebook entries unused for this many steps from current encoder outputs.
    pub revive_dead_after: Option<usize>,
    /// Revival stops after this fraction of the schedule so revived codes can settle.
    pub revive_until_fraction: f32,
}

impl Default for TokenizerSchedule {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            crop: 32,
            lr: 2e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.05,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            disc_start: 2000,
            disc_weight: 0.1,
            disc_lr: 2e-4,
            revive_dead_after: None,
            revive_until_fraction: 0.9,
        }
    }
}

impl TokenizerSchedule {
    pub fn validate(&self, config: &TokenizerConfig) -> Result<()> {
        let p = config.patch_size();
        if self.crop == 0 || !self.crop.is_multiple_of(p) {
            return Err(Error::NotDivisible {
                dims: (self.crop, self.crop),
                patch: p,
                padded: (self.crop.div_ceil(p).max(1) * p, self.crop.div_ceil(p).max(1) * p),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.revive_dead_after == Some(0) {
            return Err(Error::config("revive_dead_after must be positive"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerLogRecord {
    pub step: usize,
    pub lr: f32,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub adversarial: Option<f64>,
    pub discriminator: Option<f64>,
    /// Fraction of the codebook used by this batch.
    pub batch_utilization: f64,
    pub grad_norm: f64,
    pub revived: usize,
}

#[derive(Debug, Clone)]
pub struct TokenizerRun {
    pub tokenizer: Tokenizer,
    pub log: Vec<TokenizerLogRecord>,
    /// Set when a non-finite loss stopped training; the tokenizer holds the last finite state.
    pub diverged_at: Option<usize>,
}

fn sample_batch(
    frames: &[&ReflectivityField],
    crop: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ReflectivityField> {
    (0..batch)
        .map(|_| {
            let f = frames[rng.random_range(0..frames.len())];
            let params = AugmentParams::draw(rng, f.shape(), (crop, crop));
            ReflectivityField::new(transform(&f.values, (crop, crop), &params))
        })
        .collect()
}

fn hinge_disc_loss(real: &[f32], fake: &[f32]) -> (f64, Vec<f32>, Vec<f32>) {
    let n = real.len() as f32;
    let mut loss = 0.0;
    let d_real = real
        .iter()
        .map(|&r| {
            loss += (1.0 - r).max(0.0) as f64;
            if r < 1.0 { -1.0 / n } else { 0.0 }
        })
        .collect();
    let d_fake = fake
        .iter()
        .map(|&f| {
            loss += (1.0 + f).max(0.0) as f64;
            if f > -1.0 { 1.0 / n } else { 0.0 }
        })
        .collect();
    (loss / n as f64, d_real, d_fake)
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Train a tokenizer on random augmented crops of `train` frames.
///
/// Training is single-threaded and deterministic for a fixed
/// `(config, schedule, data)`. `on_log` sees every record as it is produced.
pub fn train_tokenizer(
    train: &[RadarSequence],
    config: &TokenizerConfig,
    schedule: &TokenizerSchedule,
    mut on_log: impl FnMut(&TokenizerLogRecord),
) -> Result<TokenizerRun> {
    config.validate()?;
    schedule.validate(config)?;
    let frames: Vec<&ReflectivityField> = train.iter().flat_map(|s| s.frames()).collect();
    if frames.is_empty() {
        return Err(Error::Empty("no training frames"));
    }
    if let Some(f) = frames.iter().find(|f| f.height() < schedule.crop || f.width() < schedule.crop) {
        return Err(Error::CropTooLarge {
            crop: (schedule.crop, schedule.crop),
            frame: f.shape(),
        });
    }

    let mut model = Tokenizer::new(config.clone(), schedule.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed_da7a);
    let mut disc = config
        .use_adversarial
        .then(|| Discriminator::new(config.base_channels, &mut rng));
    let adam_cfg = AdamWConfig {
        weight_decay: schedule.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adam_cfg);
    let mut disc_opt = AdamW::new(AdamWConfig {
        beta1: 0.5,
        beta2: 0.9,
        ..AdamWConfig::default()
    });
    let lr_at = LrSchedule {
        base: schedule.lr,
        warmup_steps: schedule.warmup_steps,
        total_steps: schedule.steps,
        min_ratio: schedule.min_lr_ratio,
    };
    let k = config.codebook_size;
    let dim = config.bottleneck_channels;
    let mut last_used = vec![0usize; k];
    let mut log = Vec::with_capacity(schedule.steps);
    // state whose loss was last seen finite
    let mut good: Option<Tokenizer> = None;

    for step in 0..schedule.steps {
        let batch = sample_batch(&frames, schedule.crop, schedule.batch_size, &mut rng);
        let refs: Vec<&ReflectivityField> = batch.iter().collect();
        let (x, d) = model.normalize_batch(&refs)?;
        let p = config.patch_size();
        let dq = Dims::new(d.b, d.h / p, d.w / p);

        model.zero_grad();
        let (z, enc_cache) = model.encoder.forward(&x, d);
        let q = quantize(&z, &model.codebook)?;
        let (y, dec_cache) = model.decoder.forward(&q.quantized, dq);
        let (recon, mut dy) = config.recon_loss.value_and_grad(&x, &y);
        if !recon.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Ok(TokenizerRun {
                tokenizer: good.unwrap_or(model),
                log,
                diverged_at: Some(step),
            });
        }
        good = Some(model.clone());

        let mut adversarial = None;
        let mut disc_loss = None;
        if let Some(disc) = disc.as_mut().filter(|_| step >= schedule.disc_start) {
            let (logits, dc) = disc.forward(&y, d);
            let n = logits.len() as f32;
            let g_adv = -(logits.iter().map(|&v| v as f64).sum::<f64>() / n as f64);
            let dy_adv = disc.backward(&dc, &vec![-1.0 / n; logits.len()], false);
            let head = model.decoder.head();
            let g_rec_norm = l2(&head.weight_grad(dec_cache.head_cache(), &dy));
            let g_adv_norm = l2(&head.weight_grad(dec_cache.head_cache(), &dy_adv));
            let lambda = ((g_rec_norm / (g_adv_norm + 1e-4)).clamp(0.0, 1e4) as f32) * schedule.disc_weight;
            for (a, b) in dy.iter_mut().zip(&dy_adv) {
                *a += lambda * b;
            }
            adversarial = Some(g_adv);

            disc.zero_grad();
            let (real, rc) = disc.forward(&x, d);
            let (fake, fc) = disc.forward(&y, d);
            let (dl, d_real, d_fake) = hinge_disc_loss(&real, &fake);
            disc.backward(&rc, &d_real, true);
            disc.backward(&fc, &d_fake, true);
            disc.clip_grad_norm(schedule.grad_clip);
            disc_opt.step(disc, schedule.disc_lr);
            disc_loss = Some(dl);
        }

        let dzq = model.decoder.backward(&dec_cache, &dy);
        let dz = quantize_backward(&z, &q, &dzq, config.commitment_beta, &mut model.codebook);
        model.encoder.backward(&enc_cache, &dz);
        let grad_norm = model.clip_grad_norm(schedule.grad_clip);
        if !grad_norm.is_finite() {
            let mut tokenizer = good.take().expect("snapshot taken this step");
            tokenizer.zero_grad();
            return Ok(TokenizerRun {
                tokenizer,
                log,
                diverged_at: Some(step),
            });
        }
        let lr = lr_at.at(step);
        opt.step(&mut model, lr);
        model.step += 1;

        let mut seen = vec![false; k];
        for &i in &q.indices {
            seen[i] = true;
            model.codebook.usage_counts[i] += 1;
            last_used[i] = step;
        }
        let mut revived = 0;
        let revive_window = step as f32 <= schedule.revive_until_fraction * schedule.steps as f32;
        if let Some(after) = schedule.revive_dead_after.filter(|_| revive_window) {
            let n_lat = q.indices.len();
            for (code, last) in last_used.iter_mut().enumerate() {
                if step >= *last + after {
                    let src = rng.random_range(0..n_lat);
                    model.codebook.vectors.value[code * dim..(code + 1) * dim]
                        .copy_from_slice(&z[src * dim..(src + 1) * dim]);
                    *last = step;
                    revived += 1;
                }
            }
        }

        let rec = TokenizerLogRecord {
            step,
            lr,
            recon,
            codebook: q.codebook_loss,
            commitment: q.commitment_loss,
            adversarial,
            discriminator: disc_loss,
            batch_utilization: seen.iter().filter(|&&s| s).count() as f64 / k as f64,
            grad_norm,
            revived,
        };
        on_log(&rec);
        log.push(rec);
    }
    Ok(TokenizerRun {
        tokenizer: model,
        log,
        diverged_at: None,
    })
}

/// Per-pixel reconstruction errors over a set of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionEval {
    /// Mean MWAE per pixel, in model units.
    pub mwae: f64,
    /// Mean absolute error in dBZ after decoding to the output lattice.
    pub mae_dbz: f64,
    pub n_frames: usize,
}

pub fn evaluate_reconstruction(tokenizer: &Tokenizer, frames: &[&ReflectivityField]) -> Result<ReconstructionEval> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames to evaluate"));
    }
    let (mut mwae, mut mae, mut n) = (0.0, 0.0, 0usize);
    for chunk in frames.chunks(16) {
        let (x, _) = tokenizer.normalize_batch(chunk)?;
        let grids = tokenizer.encode_batch(chunk)?;
        let (y, _) = tokenizer.decode_raw(&grids.iter().collect::<Vec<_>>())?;
        mwae += ReconLoss::Mwae.value_and_grad(&x, &y).0 * x.len() as f64;
        let norm = tokenizer.config.normalization;
        for (a, b) in x.iter().zip(&y) {
            let obs = norm.to_dbz(*a);
            let rec = tokenizer.preprocess.quantize_value(norm.to_dbz(*b));
            mae += (obs - rec).abs() as f64;
        }
        n += x.len();
    }
    Ok(ReconstructionEval {
        mwae: mwae / n as f64,
        mae_dbz: mae / n as f64,
        n_frames: frames.len(),
    })
}
