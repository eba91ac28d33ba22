//! Ensemble nowcasting: encode the context, roll the forecaster forward one
//! token grid at a time, decode.
//!
//! Domains larger than the forecaster's spatial window are generated with a
//! sliding window. Targets are visited in row-major order; for each target the
//! window is placed so the target sits at its bottom-right-most slot, clamped to
//! the domain edges. The context is the window crop of the `T − 1` history
//! grids followed by the already generated current-frame tokens that precede
//! the target inside the window, so ungenerated positions never enter the
//! context.

mod sampling;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use sampling::{sample_token, Sampling};

use crate::error::{Error, Result};
use crate::forecaster::{softmax, Forecaster};
use crate::grid::{RadarSequence, ReflectivityField};
use crate::rprc;
use crate::tokenizer::{TokenGrid, Tokenizer};

/// Window origin used for one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlacement {
    pub target: (usize, usize),
    pub origin: (usize, usize),
}

/// Window origin for `target` in a `domain`-sized grid with a `window`-sized model view.
pub fn window_origin(target: (usize, usize), domain: (usize, usize), window: (usize, usize)) -> (usize, usize) {
    let clamp = |t: usize, d: usize, w: usize| (t + 1).saturating_sub(w).min(d - w);
    (clamp(target.0, domain.0, window.0), clamp(target.1, domain.1, window.1))
}

/// Every placement of a full-frame pass, in generation order.
pub fn window_placements(domain: (usize, usize), window: (usize, usize)) -> Vec<WindowPlacement> {
    (0..domain.0)
        .flat_map(|r| (0..domain.1).map(move |c| (r, c)))
        .map(|target| WindowPlacement {
            target,
            origin: window_origin(target, domain, window),
        })
        .collect()
}

fn domain_of(history: &[TokenGrid], forecaster: &Forecaster) -> Result<(usize, usize)> {
    let cfg = &forecaster.config;
    if history.len() != cfg.context_frames - 1 {
        return Err(Error::ContextLength {
            len: history.len(),
            max: cfg.context_frames - 1,
        });
    }
    let domain = history[0].shape();
    for g in history {
        if g.shape() != domain {
            return Err(Error::ShapeMismatch {
                expected: vec![domain.0, domain.1],
                found: vec![g.shape().0, g.shape().1],
            });
        }
        g.check_range(cfg.vocab_size)?;
    }
    if domain.0 < cfg.tokens_h || domain.1 < cfg.tokens_w {
        return Err(Error::CropTooLarge {
            crop: (cfg.tokens_h, cfg.tokens_w),
            frame: domain,
        });
    }
    Ok(domain)
}

/// Generate the token grid that follows `history` (exactly `T − 1` grids, oldest first).
pub fn generate_next_frame<R: rand::Rng + ?Sized>(
    history: &[TokenGrid],
    forecaster: &Forecaster,
    sampling: Sampling,
    rng: &mut R,
) -> Result<TokenGrid> {
    let domain = domain_of(history, forecaster)?;
    let cfg = &forecaster.config;
    let (wh, ww) = (cfg.tokens_h, cfg.tokens_w);
    let mut out = Array2::<usize>::zeros(domain);
    let mut ctx = Vec::with_capacity(cfg.context_length());
    for p in window_placements(domain, (wh, ww)) {
        let (r0, c0) = p.origin;
        let (tr, tc) = (p.target.0 - r0, p.target.1 - c0);
        ctx.clear();
        for g in history {
            for r in r0..r0 + wh {
                ctx.extend((c0..c0 + ww).map(|c| g.indices[[r, c]]));
            }
        }
        for i in 0..tr * ww + tc {
            ctx.push(out[[r0 + i / ww, c0 + i % ww]]);
        }
        let probs = softmax(&forecaster.next_token_logits(&ctx)?);
        out[p.target] = sample_token(&probs, sampling, rng)?;
    }
    Ok(TokenGrid::new(out))
}

/// Seed of ensemble member `index`: the first 8 bytes of `SHA-256(seed ‖ index)`, little-endian.
pub fn member_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NowcastRequest {
    /// Exactly `T − 1` observed frames, oldest first.
    pub context: RadarSequence,
    pub lead_steps: usize,
    pub n_members: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

/// One sampled trajectory.
#[derive(Debug, Clone)]
pub struct MemberForecast {
    pub seed: u64,
    /// Generated token grids, one per lead step.
    pub tokens: Vec<TokenGrid>,
    pub frames: Vec<ReflectivityField>,
    /// Wall-clock seconds spent generating each lead step.
    pub step_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleNowcast {
    pub members: Vec<MemberForecast>,
    pub context_tokens: Vec<TokenGrid>,
    /// Shared by every lead step and member.
    pub placements: Vec<WindowPlacement>,
    pub timestep_minutes: u16,
}

/// A tokenizer and forecaster that are known to belong together.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub tokenizer: Tokenizer,
    pub tokenizer_sha256: String,
    pub forecaster: Forecaster,
    pub forecaster_sha256: String,
}

impl Pipeline {
    /// Pair checkpoints; fails on a tokenizer hash mismatch unless `allow_hash_mismatch`.
    pub fn new(
        tokenizer: Tokenizer,
        tokenizer_sha256: String,
        forecaster: Forecaster,
        forecaster_sha256: String,
        allow_hash_mismatch: bool,
    ) -> Result<Self> {
        forecaster.check_tokenizer(&tokenizer, &tokenizer_sha256, allow_hash_mismatch)?;
        Ok(Self {
            tokenizer,
            tokenizer_sha256,
            forecaster,
            forecaster_sha256,
        })
    }

    pub fn load(tokenizer: impl AsRef<Path>, forecaster: impl AsRef<Path>, allow_hash_mismatch: bool) -> Result<Self> {
        let (tok, th) = Tokenizer::load(tokenizer)?;
        let (fc, fh) = Forecaster::load(forecaster)?;
        Self::new(tok, th, fc, fh, allow_hash_mismatch)
    }

    /// Encode context frames; there must be exactly `T − 1` of them.
    pub fn encode_context(&self, context: &RadarSequence) -> Result<Vec<TokenGrid>> {
        let need = self.forecaster.config.context_frames - 1;
        if context.len() != need {
            return Err(Error::ContextLength {
                len: context.len(),
                max: need,
            });
        }
        self.tokenizer.encode_batch(&context.frames().iter().collect::<Vec<_>>())
    }

    /// Roll one member forward `lead_steps` grids from encoded context.
    pub fn generate_member(
        &self,
        context_tokens: &[TokenGrid],
        lead_steps: usize,
        sampling: Sampling,
        seed: u64,
    ) -> Result<MemberForecast> {
        if lead_steps == 0 {
            return Err(Error::config("lead_steps must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history = context_tokens.to_vec();
        let mut tokens = Vec::with_capacity(lead_steps);
        let mut step_seconds = Vec::with_capacity(lead_steps);
        for _ in 0..lead_steps {
            let t0 = Instant::now();
            let next = generate_next_frame(&history, &self.forecaster, sampling, &mut rng)?;
            history.remove(0);
            history.push(next.clone());
            tokens.push(next);
            step_seconds.push(t0.elapsed().as_secs_f64());
        }
        let frames = self.tokenizer.decode_batch(&tokens.iter().collect::<Vec<_>>())?;
        Ok(MemberForecast {
            seed,
            tokens,
            frames,
            step_seconds,
        })
    }

    /// Members run in parallel; member `i` uses [`member_seed`]`(req.seed, i)`.
    pub fn nowcast(&self, req: &NowcastRequest) -> Result<EnsembleNowcast> {
        req.sampling.validate()?;
        if req.n_members == 0 {
            return Err(Error::config("n_members must be at least 1"));
        }
        let context_tokens = self.encode_context(&req.context)?;
        let domain = domain_of(&context_tokens, &self.forecaster)?;
        let cfg = &self.forecaster.config;
        let members = (0..req.n_members)
            .into_par_iter()
            .map(|i| self.generate_member(&context_tokens, req.lead_steps, req.sampling, member_seed(req.seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleNowcast {
            members,
            placements: window_placements(domain, (cfg.tokens_h, cfg.tokens_w)),
            context_tokens,
            timestep_minutes: req.context.timestep_minutes,
        })
    }
}

/// Echo of a nowcast run, written next to the member files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NowcastManifest {
    pub lead_steps: usize,
    pub n_members: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub member_seeds: Vec<u64>,
    pub tokenizer_sha256: String,
    pub forecaster_sha256: String,
    pub timestep_minutes: u16,
    /// Observed frames the nowcast was conditioned on (`T − 1`).
    pub context_frames: usize,
    pub member_files: Vec<String>,
    /// `[member][step]` generation time in seconds.
    pub step_seconds: Vec<Vec<f64>>,
}

pub const NOWCAST_MANIFEST: &str = "nowcast.json";

impl EnsembleNowcast {
    /// Forecast frames of member `i` as a sequence.
    pub fn member_sequence(&self, i: usize) -> Result<RadarSequence> {
        RadarSequence::new(self.members[i].frames.clone(), self.timestep_minutes)
    }

    /// Write `member_NNN.rprc` files and `nowcast.json` into `dir`.
    pub fn write(&self, dir: &Path, req: &NowcastRequest, pipeline: &Pipeline) -> Result<NowcastManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.members.len());
        for i in 0..self.members.len() {
            let name = format!("member_{i:03}.rprc");
            rprc::write_sequence(&self.member_sequence(i)?, dir.join(&name))?;
            files.push(name);
        }
        let manifest = NowcastManifest {
            lead_steps: req.lead_steps,
            n_members: req.n_members,
            sampling: req.sampling,
            seed: req.seed,
            member_seeds: self.members.iter().map(|m| m.seed).collect(),
            tokenizer_sha256: pipeline.tokenizer_sha256.clone(),
            forecaster_sha256: pipeline.forecaster_sha256.clone(),
            timestep_minutes: self.timestep_minutes,
            context_frames: req.context.len(),
            member_files: files,
            step_seconds: self.members.iter().map(|m| m.step_seconds.clone()).collect(),
        };
        let path = dir.join(NOWCAST_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

impl NowcastManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(NOWCAST_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            message: e.to_string(),
        })
    }

    /// Member sequences in order.
    pub fn read_members(&self, dir: &Path) -> Result<Vec<RadarSequence>> {
        self.member_files.iter().map(|f| rprc::read_sequence(dir.join(f))).collect()
    }

    pub fn member_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.member_files.iter().map(|f| dir.join(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ForecasterConfig;
    use crate::tokenizer::TokenizerConfig;
    use rand::Rng;

    fn forecaster(t: usize, wh: usize, ww: usize, k: usize) -> Forecaster {
        let cfg = ForecasterConfig {
            vocab_size: k,
            context_frames: t,
            tokens_h: wh,
            tokens_w: ww,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 16,
        };
        Forecaster::new(cfg, "tok", 7).unwrap()
    }

    fn random_grids(n: usize, hw: (usize, usize), k: usize, seed: u64) -> Vec<TokenGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TokenGrid::new(Array2::from_shape_fn(hw, |_| rng.random_range(0..k))))
            .collect()
    }

    #[test]
    fn placements_on_two_by_three_domain() {
        // 2×2 window on a 2×3 domain: the window slides right once, row by row
        let p = window_placements((2, 3), (2, 2));
        let origins: Vec<_> = p.iter().map(|p| (p.target, p.origin)).collect();
        assert_eq!(
            origins,
            vec![
                ((0, 0), (0, 0)),
                ((0, 1), (0, 0)),
                ((0, 2), (0, 1)),
                ((1, 0), (0, 0)),
                ((1, 1), (0, 0)),
                ((1, 2), (0, 1)),
            ]
        );
        assert_eq!(window_placements((4, 5), (4, 4)).len(), 4 * 5);
    }

    #[test]
    fn placement_keeps_target_inside_and_maximizes_context() {
        for (h, w, wh, ww) in [(8, 8, 4, 4), (5, 9, 2, 3), (3, 3, 3, 3)] {
            for p in window_placements((h, w), (wh, ww)) {
                let (r0, c0) = p.origin;
                assert!(r0 + wh <= h && c0 + ww <= w);
                assert!((r0..r0 + wh).contains(&p.target.0) && (c0..c0 + ww).contains(&p.target.1));
                // the target is as far down/right as the domain allows
                assert!(p.target.0 - r0 == wh - 1 || r0 == 0);
                assert!(p.target.1 - c0 == ww - 1 || c0 == 0);
            }
        }
    }

    /// Plain autoregressive generation over a window-sized domain.
    fn plain_generate(history: &[TokenGrid], f: &Forecaster, rng: &mut ChaCha8Rng) -> TokenGrid {
        let (h, w) = history[0].shape();
        let mut ctx: Vec<usize> = history.iter().flat_map(|g| g.indices.iter().copied()).collect();
        let mut out = Vec::new();
        for _ in 0..h * w {
            let p = softmax(&f.next_token_logits(&ctx).unwrap());
            let t = sample_token(&p, Sampling::Multinomial, rng).unwrap();
            ctx.push(t);
            out.push(t);
        }
        TokenGrid::new(Array2::from_shape_vec((h, w), out).unwrap())
    }

    #[test]
    fn no_slide_equals_plain_generation() {
        let f = forecaster(3, 3, 3, 8);
        let history = random_grids(2, (3, 3), 8, 1);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let slid = generate_next_frame(&history, &f, Sampling::Multinomial, &mut a).unwrap();
        assert_eq!(slid, plain_generate(&history, &f, &mut b));
    }

    #[test]
    fn sliding_context_contents() {
        // With a one-token window the model sees only the same pixel of past frames.
        let f = forecaster(2, 1, 1, 8);
        let history = random_grids(1, (3, 4), 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = generate_next_frame(&history, &f, Sampling::Greedy, &mut rng).unwrap();
        for ((r, c), &v) in g.indices.indexed_iter() {
            let p = softmax(&f.next_token_logits(&[history[0].indices[[r, c]]]).unwrap());
            assert_eq!(v, sample_token(&p, Sampling::Greedy, &mut rng).unwrap());
        }
    }

    #[test]
    fn generation_errors() {
        let f = forecaster(3, 2, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let small = random_grids(2, (1, 3), 8, 0);
        assert!(matches!(generate_next_frame(&small, &f, Sampling::Greedy, &mut rng), Err(Error::CropTooLarge { .. })));
        let one = random_grids(1, (2, 2), 8, 0);
        assert!(matches!(generate_next_frame(&one, &f, Sampling::Greedy, &mut rng), Err(Error::ContextLength { .. })));
        let out_of_range = random_grids(2, (2, 2), 9, 3)
            .into_iter()
            .map(|g| TokenGrid::new(g.indices.mapv(|_| 8)))
            .collect::<Vec<_>>();
        assert!(generate_next_frame(&out_of_range, &f, Sampling::Greedy, &mut rng).is_err());
    }

    #[test]
    fn member_seeds_are_stable_and_distinct() {
        assert_eq!(member_seed(1, 0), member_seed(1, 0));
        let seeds: std::collections::HashSet<_> = (0..100).map(|i| member_seed(1, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_ne!(member_seed(1, 0), member_seed(2, 0));
    }

    fn pipeline(t: usize) -> Pipeline {
        let tok = Tokenizer::new(
            TokenizerConfig {
                alpha: 1,
                base_channels: 4,
                max_channels: 4,
                codebook_size: 8,
                bottleneck_channels: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let hash = crate::checkpoint::sha256_hex(&tok.to_bytes().unwrap());
        let mut f = forecaster(t, 2, 2, 8);
        f.tokenizer_sha256 = hash.clone();
        Pipeline::new(tok, hash, f, "fc".into(), false).unwrap()
    }

    fn context(n: usize) -> RadarSequence {
        let frames = (0..n)
            .map(|t| {
                ReflectivityField::new(Array2::from_shape_fn((6, 8), |(r, c)| ((r * 7 + c * 3 + t * 5) % 50) as f32))
            })
            .collect();
        RadarSequence::new(frames, 5).unwrap()
    }

    #[test]
    fn nowcast_shapes_seeds_and_rolling_context() {
        let p = pipeline(4);
        let req = NowcastRequest {
            context: context(3),
            lead_steps: 3,
            n_members: 3,
            sampling: Sampling::Multinomial,
            seed: 11,
        };
        let out = p.nowcast(&req).unwrap();
        assert_eq!(out.members.len(), 3);
        assert_eq!(out.placements.len(), 3 * 4);
        for (i, m) in out.members.iter().enumerate() {
            assert_eq!(m.seed, member_seed(11, i));
            assert_eq!(m.frames.len(), 3);
            assert_eq!(m.frames[0].shape(), (6, 8));
            assert!(m.tokens.iter().all(|g| g.indices.iter().all(|&t| t < 8)));
            // member i equals an independent single-member run with its seed
            let solo = p.generate_member(&out.context_tokens, 3, Sampling::Multinomial, m.seed).unwrap();
            assert_eq!(solo.tokens, m.tokens);
            assert_eq!(solo.frames, m.frames);
        }
        // for T = 4 the third step is conditioned on exactly the three generated grids
        let m = &out.members[0];
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        let mut hist = out.context_tokens.clone();
        for step in 0..3 {
            let g = generate_next_frame(&hist, &p.forecaster, Sampling::Multinomial, &mut rng).unwrap();
            assert_eq!(g, m.tokens[step]);
            hist.remove(0);
            hist.push(g);
        }
        assert_eq!(hist, m.tokens);
    }

    #[test]
    fn greedy_members_coincide_and_runs_repeat() {
        let p = pipeline(3);
        let req = NowcastRequest {
            context: context(2),
            lead_steps: 2,
            n_members: 2,
            sampling: Sampling::Greedy,
            seed: 0,
        };
        let a = p.nowcast(&req).unwrap();
        let b = p.nowcast(&req).unwrap();
        assert_eq!(a.members[0].frames, a.members[1].frames);
        assert_eq!(a.members[0].frames, b.members[0].frames);
    }

    #[test]
    fn request_validation() {
        let p = pipeline(3);
        let mut req = NowcastRequest {
            context: context(3),
            lead_steps: 1,
            n_members: 1,
            sampling: Sampling::Greedy,
            seed: 0,
        };
        assert!(matches!(p.nowcast(&req), Err(Error::ContextLength { len: 3, max: 2 })));
        req.context = context(2);
        req.n_members = 0;
        assert!(p.nowcast(&req).is_err());
        req.n_members = 1;
        req.lead_steps = 0;
        assert!(p.nowcast(&req).is_err());
    }

    #[test]
    fn hash_link_enforced() {
        let p = pipeline(3);
        let r = Pipeline::new(p.tokenizer.clone(), "other".into(), p.forecaster.clone(), "fc".into(), false);
        assert!(matches!(r, Err(Error::CheckpointMismatch { .. })));
        assert!(Pipeline::new(p.tokenizer.clone(), "other".into(), p.forecaster.clone(), "fc".into(), true).is_ok());
    }

    #[test]
    fn write_outputs() {
        let p = pipeline(3);
        let req = NowcastRequest {
            context: context(2),
            lead_steps: 2,
            n_members: 2,
            sampling: Sampling::Multinomial,
            seed: 4,
        };
        let out = p.nowcast(&req).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = out.write(dir.path(), &req, &p).unwrap();
        let back = NowcastManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let seqs = back.read_members(dir.path()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].frames(), &out.members[1].frames[..]);
    }
}
