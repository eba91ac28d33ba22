use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a token is drawn from the predicted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Multinomial,
    /// Argmax; ties go to the lowest index.
    Greedy,
    /// Multinomial over the `k` most probable entries.
    TopK(usize),
    /// Multinomial after dividing the logits by `τ`.
    Temperature(f32),
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampling::TopK(0) => Err(Error::config("top_k needs k >= 1")),
            Sampling::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::config("temperature must be positive and finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Sampling::Greedy | Sampling::TopK(1))
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::Multinomial => write!(f, "multinomial"),
            Sampling::Greedy => write!(f, "greedy"),
            Sampling::TopK(k) => write!(f, "top_k:{k}"),
            Sampling::Temperature(t) => write!(f, "temperature:{t}"),
        }
    }
}

/// Accepts `multinomial`, `greedy`, `top_k:K` and `temperature:T` (`=` also works as separator).
impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once([':', '=']) {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::config(format!("unknown sampling mode {s:?}"));
        let mode = match (name.trim().to_ascii_lowercase().replace('-', "_").as_str(), arg) {
            ("multinomial", None) => Sampling::Multinomial,
            ("greedy", None) => Sampling::Greedy,
            ("top_k", Some(a)) => Sampling::TopK(a.trim().parse().map_err(|_| bad())?),
            ("temperature", Some(a)) => Sampling::Temperature(a.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonNormalizable);
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    // rounding left u at the top of the range
    Ok(last)
}

/// Draw a codebook index from `probs` (need not sum exactly to 1).
pub fn sample_token<R: Rng + ?Sized>(probs: &[f32], sampling: Sampling, rng: &mut R) -> Result<usize> {
    sampling.validate()?;
    if probs.is_empty() || probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::NonNormalizable);
    }
    let p: Vec<f64> = probs.iter().map(|&v| v as f64).collect();
    if p.iter().sum::<f64>() <= 0.0 {
        return Err(Error::NonNormalizable);
    }
    match sampling {
        Sampling::Multinomial => draw(&p, rng),
        Sampling::Greedy => Ok(argmax(&p)),
        Sampling::TopK(k) => {
            let mut order: Vec<usize> = (0..p.len()).collect();
            // stable sort keeps lower indices first among equal probabilities
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
            let mut kept = vec![0.0; p.len()];
            for &i in order.iter().take(k) {
                kept[i] = p[i];
            }
            draw(&kept, rng)
        }
        Sampling::Temperature(t) => {
            // softmax(log p / τ) ∝ p^(1/τ), scaled by the max for stability
            let inv = 1.0 / t as f64;
            let max = p.iter().copied().fold(0.0, f64::max);
            let w: Vec<f64> = p.iter().map(|&v| if v > 0.0 { (v / max).powf(inv) } else { 0.0 }).collect();
            if w.iter().sum::<f64>() == 0.0 {
                // every non-max entry underflowed; only the mode remains
                return Ok(argmax(&p));
            }
            draw(&w, rng)
        }
    }
}
