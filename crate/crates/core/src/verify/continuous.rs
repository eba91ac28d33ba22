use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of preprocessed reflectivity, `60 − 0` dBZ.
pub const SSIM_DATA_RANGE: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousScores {
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
}

pub(crate) fn same_shape(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.nrows(), a.ncols()],
            found: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

/// MAE, MSE and SSIM between two fields in the same units (dBZ).
pub fn continuous_scores(obs: &Array2<f32>, pred: &Array2<f32>) -> Result<ContinuousScores> {
    same_shape(obs, pred)?;
    let n = obs.len().max(1) as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&o, &p) in obs.iter().zip(pred) {
        let d = p as f64 - o as f64;
        abs += d.abs();
        sq += d * d;
    }
    Ok(ContinuousScores {
        mae: abs / n,
        mse: sq / n,
        ssim: ssim(obs, pred, SSIM_DATA_RANGE)?,
    })
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable weighted filter, "valid" mode.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for r in 0..h {
        for c in 0..wo {
            rows[[r, c]] = (0..n).map(|i| k[i] * x[[r, c + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for r in 0..ho {
        for c in 0..wo {
            out[[r, c]] = (0..n).map(|i| k[i] * rows[[r + i, c]]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// all fully-contained window positions. Fields smaller than 11 pixels use the
/// largest odd window that fits.
pub fn ssim(a: &Array2<f32>, b: &Array2<f32>, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(Error::Empty("SSIM of an empty field"));
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let x = a.mapv(|v| v as f64);
    let y = b.mapv(|v| v as f64);
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let mxx = filter_valid(&(&x * &x), &k);
    let myy = filter_valid(&(&y * &y), &k);
    let mxy = filter_valid(&(&x * &y), &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = mxx.as_slice().unwrap()[i] - ux * ux;
        let vy = myy.as_slice().unwrap()[i] - uy * uy;
        let cxy = mxy.as_slice().unwrap()[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..60.0))
    }

    /// Direct window-by-window SSIM with a 2-D kernel.
    fn ssim_oracle(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
        let k = gaussian_kernel(11, 1.5);
        let (h, w) = a.dim();
        let (c1, c2) = ((0.01f64 * 60.0).powi(2), (0.03f64 * 60.0).powi(2));
        let mut acc = 0.0;
        let mut n = 0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i] * k[j];
                        let x = a[[r + i, c + j]] as f64;
                        let y = b[[r + i, c + j]] as f64;
                        ux += wt * x;
                        uy += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn identical_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(&mut rng, 16, 16);
        let s = continuous_scores(&a, &a).unwrap();
        assert_eq!((s.mae, s.mse), (0.0, 0.0));
        assert!((s.ssim - 1.0).abs() < 1e-12);
        let b = a.mapv(|v| v + 1.0);
        let s = continuous_scores(&a, &b).unwrap();
        assert!((s.mae - 1.0).abs() < 1e-6 && (s.mse - 1.0).abs() < 1e-5);
        assert!(s.ssim < 1.0);
    }

    #[test]
    fn matches_naive_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random(&mut rng, 8, 8);
            let b = random(&mut rng, 8, 8);
            let s = continuous_scores(&a, &b).unwrap();
            let (mut abs, mut sq) = (0.0f64, 0.0f64);
            for i in 0..8 {
                for j in 0..8 {
                    let d = b[[i, j]] as f64 - a[[i, j]] as f64;
                    abs += d.abs();
                    sq += d * d;
                }
            }
            assert!((s.mae - abs / 64.0).abs() < 1e-10);
            assert!((s.mse - sq / 64.0).abs() < 1e-10);
        }
        for _ in 0..10 {
            let a = random(&mut rng, 14, 17);
            let b = random(&mut rng, 14, 17);
            assert!((ssim(&a, &b, 60.0).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::<f32>::zeros((4, 4));
        let b = Array2::<f32>::zeros((4, 5));
        assert!(matches!(continuous_scores(&a, &b), Err(Error::ShapeMismatch { .. })));
    }
}
