//! Reconstruction losses.
//!
//! The magnitude-weighted absolute error squashes both arguments through a
//! sigmoid and weights each pixel's error by the squashed *target*, so heavy
//! precipitation dominates the objective:
//!
//! `MWAE(x, y) = sum_i |σ(x_i) − σ(y_i)| · σ(x_i)`
//!
//! where `x` is the autoencoder input (target) and `y` its reconstruction,
//! both in normalized logit units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Summed MWAE over all elements, accumulated in `f64`.
pub fn mwae_loss(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![x.len()],
            found: vec![y.len()],
        });
    }
    Ok(x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let sx = sigmoid64(xi as f64);
            (sx - sigmoid64(yi as f64)).abs() * sx
        })
        .sum())
}

/// Which reconstruction objective the tokenizer trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    Mwae,
    Mae,
}

impl ReconLoss {
    /// Mean loss over elements and its gradient with respect to the reconstruction `y`.
    pub fn value_and_grad(&self, target: &[f32], recon: &[f32]) -> (f64, Vec<f32>) {
        let n = target.len() as f32;
        let mut total = 0.0f64;
        let grad = target
            .iter()
            .zip(recon)
            .map(|(&x, &y)| match self {
                ReconLoss::Mwae => {
                    let (sx, sy) = (sigmoid(x), sigmoid(y));
                    let diff = sx - sy;
                    total += (diff.abs() * sx) as f64;
                    // d/dy |sx - sy| * sx = -sign(sx - sy) * sx * sy (1 - sy)
                    -diff.signum() * (diff != 0.0) as u8 as f32 * sx * sy * (1.0 - sy) / n
                }
                ReconLoss::Mae => {
                    let diff = y - x;
                    total += diff.abs() as f64;
                    diff.signum() * (diff != 0.0) as u8 as f32 / n
                }
            })
            .collect();
        (total / n as f64, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Scalar-loop oracle in f64 with its own sigmoid.
    fn oracle(x: &[f32], y: &[f32]) -> f64 {
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut acc = 0.0;
        for i in 0..x.len() {
            let sx = s(x[i] as f64);
            let sy = s(y[i] as f64);
            acc += (sx - sy).abs() * sx;
        }
        acc
    }

    #[test]
    fn reference_values() {
        assert_eq!(mwae_loss(&[1.3, -2.0], &[1.3, -2.0]).unwrap(), 0.0);
        let a = mwae_loss(&[0.0], &[10.0]).unwrap();
        assert!((a - 0.24998).abs() < 1e-5, "{a}");
        // (σ(10) − 0.5)·σ(10) = 0.4999546·0.9999546
        let b = mwae_loss(&[10.0], &[0.0]).unwrap();
        assert!((b - 0.499932).abs() < 1e-6, "{b}");
        assert!(b > a);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(mwae_loss(&[0.0], &[0.0, 1.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x: Vec<f32> = (0..20).map(|i| -3.0 + 0.31 * i as f32).collect();
        let y: Vec<f32> = (0..20).map(|i| 2.5 - 0.27 * i as f32).collect();
        for loss in [ReconLoss::Mwae, ReconLoss::Mae] {
            let (_, g) = loss.value_and_grad(&x, &y);
            for i in 0..y.len() {
                let h = 1e-3;
                let mut yp = y.clone();
                yp[i] += h;
                let mut ym = y.clone();
                ym[i] -= h;
                let num = (loss.value_and_grad(&x, &yp).0 - loss.value_and_grad(&x, &ym).0)
                    / (2.0 * h as f64);
                assert!((num - g[i] as f64).abs() < 1e-4, "{loss:?}[{i}]");
            }
        }
    }

    #[test]
    fn mean_training_loss_is_scaled_sum() {
        let x = [0.5f32, -1.0, 2.0];
        let y = [0.0f32, 1.0, -2.0];
        let (mean, _) = ReconLoss::Mwae.value_and_grad(&x, &y);
        assert!((mean * 3.0 - mwae_loss(&x, &y).unwrap()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn matches_oracle_and_properties(
            pairs in proptest::collection::vec((-8.0f32..8.0, -8.0f32..8.0), 1..64)
        ) {
            let (x, y): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let got = mwae_loss(&x, &y).unwrap();
            let want = oracle(&x, &y);
            prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12) + 1e-12);
            prop_assert!(got >= 0.0);
            prop_assert_eq!(mwae_loss(&x, &x).unwrap(), 0.0);
        }
    }
}
