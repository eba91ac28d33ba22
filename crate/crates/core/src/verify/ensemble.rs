use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::continuous::same_shape;
use crate::error::{Error, Result};

/// Empirical-CDF CRPS: `mean|X − y| − ½·mean|X − X'|` over all member pairs.
pub fn crps(members: &[f32], obs: f32) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Empty("CRPS needs at least one member"));
    }
    let mut sorted: Vec<f64> = members.iter().map(|&v| v as f64).collect();
    Ok(crps_sorted(&mut sorted, obs as f64))
}

fn crps_sorted(x: &mut [f64], y: f64) -> f64 {
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    let skill = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i) for sorted x
    let pairs: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v)
        .sum::<f64>()
        * 2.0;
    skill - 0.5 * pairs / (n * n)
}

/// Pixel-mean CRPS of an ensemble of fields against one observed field.
pub fn crps_field(members: &[&Array2<f32>], obs: &Array2<f32>) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Empty("CRPS needs at least one member"));
    }
    for m in members {
        same_shape(obs, m)?;
    }
    let mut buf = vec![0.0f64; members.len()];
    let mut total = 0.0;
    for ((i, j), &y) in obs.indexed_iter() {
        for (b, m) in buf.iter_mut().zip(members) {
            *b = m[[i, j]] as f64;
        }
        total += crps_sorted(&mut buf, y as f64);
    }
    Ok(total / obs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogramResult {
    /// Counts for ranks `0..=n_members`.
    pub counts: Vec<u64>,
    pub kl_from_uniform: f64,
    pub n_samples: u64,
}

/// `Σ p_i ln(p_i · (n+1))` over the observed rank frequencies; empty bins contribute 0.
pub fn kl_from_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let k = counts.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * (p * k).ln()
        })
        .sum()
}

/// Accumulates observation ranks within ensembles. Ties between the
/// observation and members are broken uniformly at random.
#[derive(Debug, Clone)]
pub struct RankHistogram {
    n_members: usize,
    counts: Vec<u64>,
    rng: ChaCha8Rng,
    /// When set, samples where the observation and every member are below it are skipped.
    pub wet_threshold: Option<f32>,
}

impl RankHistogram {
    pub fn new(n_members: usize, seed: u64) -> Self {
        Self {
            n_members,
            counts: vec![0; n_members + 1],
            rng: ChaCha8Rng::seed_from_u64(seed),
            wet_threshold: None,
        }
    }

    pub fn wet_only(mut self, threshold: f32) -> Self {
        self.wet_threshold = Some(threshold);
        self
    }

    pub fn add(&mut self, members: &[f32], obs: f32) -> Result<()> {
        if members.len() != self.n_members {
            return Err(Error::ShapeMismatch {
                expected: vec![self.n_members],
                found: vec![members.len()],
            });
        }
        if let Some(t) = self.wet_threshold {
            if obs < t && members.iter().all(|&m| m < t) {
                return Ok(());
            }
        }
        let below = members.iter().filter(|&&m| m < obs).count();
        let ties = members.iter().filter(|&&m| m == obs).count();
        let rank = below + if ties > 0 { self.rng.random_range(0..=ties) } else { 0 };
        self.counts[rank] += 1;
        Ok(())
    }

    /// Add every pixel of an ensemble of fields.
    pub fn add_fields(&mut self, members: &[&Array2<f32>], obs: &Array2<f32>) -> Result<()> {
        for m in members {
            same_shape(obs, m)?;
        }
        let mut buf = vec![0.0f32; members.len()];
        for ((i, j), &y) in obs.indexed_iter() {
            for (b, m) in buf.iter_mut().zip(members) {
                *b = m[[i, j]];
            }
            self.add(&buf, y)?;
        }
        Ok(())
    }

    pub fn result(&self) -> RankHistogramResult {
        RankHistogramResult {
            counts: self.counts.clone(),
            kl_from_uniform: kl_from_uniform(&self.counts),
            n_samples: self.counts.iter().sum(),
        }
    }
}

/// One-shot rank histogram over `(members, observation)` samples.
pub fn rank_histogram(
    ensembles: &[Vec<f32>],
    observations: &[f32],
    n_members: usize,
    seed: u64,
) -> Result<RankHistogramResult> {
    if ensembles.len() != observations.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![ensembles.len()],
            found: vec![observations.len()],
        });
    }
    let mut h = RankHistogram::new(n_members, seed);
    for (m, &y) in ensembles.iter().zip(observations) {
        h.add(m, y)?;
    }
    Ok(h.result())
}
