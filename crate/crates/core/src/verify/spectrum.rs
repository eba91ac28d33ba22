use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radially averaged power spectrum. Bin `i` holds radial wavenumber `i + 1`
/// (cycles per `min(H, W)` pixels); the zero-frequency term is excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub wavenumbers: Vec<usize>,
    pub wavelengths_km: Vec<f64>,
    /// Mean `|F|²` per bin.
    pub power: Vec<f64>,
    /// `10·log10(power)`; `-inf` for an empty-power bin (null in JSON, NaN when read back).
    #[serde(deserialize_with = "super::non_finite::vec")]
    pub power_db: Vec<f64>,
}

/// Unnormalized 2-D DFT power `|F(ky, kx)|²`.
pub fn power_spectrum_2d(field: &Array2<f32>) -> Array2<f64> {
    let (h, w) = field.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut data: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    Array2::from_shape_vec((h, w), data.iter().map(|z| z.norm_sqr()).collect()).expect("shape")
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Radially averaged power spectral density of a 2-D field.
pub fn rapsd(field: &Array2<f32>, resolution_km: f64) -> Result<SpectrumResult> {
    let (h, w) = field.dim();
    if h < 4 || w < 4 {
        return Err(Error::ShapeMismatch {
            expected: vec![4, 4],
            found: vec![h, w],
        });
    }
    let l = h.min(w);
    let n_bins = l / 2;
    let p = power_spectrum_2d(field);
    let mut sum = vec![0.0f64; n_bins];
    let mut count = vec![0usize; n_bins];
    for ky in 0..h {
        let fy = signed_freq(ky, h) * l as f64 / h as f64;
        for kx in 0..w {
            let fx = signed_freq(kx, w) * l as f64 / w as f64;
            let bin = (fy * fy + fx * fx).sqrt().round() as usize;
            if (1..=n_bins).contains(&bin) {
                sum[bin - 1] += p[[ky, kx]];
                count[bin - 1] += 1;
            }
        }
    }
    let power: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(SpectrumResult {
        wavenumbers: (1..=n_bins).collect(),
        wavelengths_km: (1..=n_bins).map(|k| l as f64 * resolution_km / k as f64).collect(),
        power_db: power.iter().map(|&v| 10.0 * v.log10()).collect(),
        power,
    })
}

/// Bin-wise mean of several spectra with identical binning.
pub fn mean_spectrum(spectra: &[SpectrumResult]) -> Option<SpectrumResult> {
    let first = spectra.first()?;
    let n = spectra.len() as f64;
    let power: Vec<f64> = (0..first.power.len())
        .map(|i| spectra.iter().map(|s| s.power[i]).sum::<f64>() / n)
        .collect();
    Some(SpectrumResult {
        wavenumbers: first.wavenumbers.clone(),
        wavelengths_km: first.wavelengths_km.clone(),
        power_db: power.iter().map(|&v| 10.0 * v.log10()).collect(),
        power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// O(N²) direct DFT.
    fn dft_power(f: &Array2<f32>) -> Array2<f64> {
        let (h, w) = f.dim();
        Array2::from_shape_fn((h, w), |(ky, kx)| {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                    re += f[[y, x]] as f64 * ang.cos();
                    im += f[[y, x]] as f64 * ang.sin();
                }
            }
            re * re + im * im
        })
    }

    #[test]
    fn constant_field_has_only_dc() {
        let f = Array2::from_elem((16, 16), 7.0f32);
        let s = rapsd(&f, 1.0).unwrap();
        let total: f64 = power_spectrum_2d(&f).sum();
        assert_eq!(s.power.len(), 8);
        assert!(s.power.iter().all(|&p| p < 1e-12 * total));
    }

    #[test]
    fn sinusoid_concentrates_in_its_bin() {
        let f = Array2::from_shape_fn((32, 32), |(_, x)| (2.0 * PI * 4.0 * x as f64 / 32.0).sin() as f32);
        let s = rapsd(&f, 1.0).unwrap();
        let binned: f64 = s.power.iter().zip(&s.wavenumbers).map(|(p, _)| p).sum();
        assert!(s.power[3] / binned > 0.99);
        assert_eq!(s.wavelengths_km[3], 8.0);
    }

    #[test]
    fn parseval_and_dft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(8, 8), (6, 10), (12, 7)] {
            let f = Array2::from_shape_fn((h, w), |_| rng.random_range(-5.0f32..5.0));
            let p = power_spectrum_2d(&f);
            let energy: f64 = f.iter().map(|&v| v as f64 * v as f64).sum();
            let n = (h * w) as f64;
            assert!((p.sum() - n * energy).abs() <= 1e-6 * n * energy);
            let oracle = dft_power(&f);
            for (a, b) in p.iter().zip(oracle.iter()) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
            }
            assert_eq!(rapsd(&f, 2.0).unwrap().power.len(), h.min(w) / 2);
        }
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(rapsd(&Array2::zeros((3, 8)), 1.0).is_err());
    }
}
