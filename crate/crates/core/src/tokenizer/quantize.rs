use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};

/// `K` learned latent vectors of dimension `d`, shared by tokenizer and forecaster.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub vectors: Param,
    pub size: usize,
    pub dim: usize,
    /// Number of times each entry was selected during training (diagnostic only).
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    /// Uniform initialisation in the cube `[-1/K, 1/K]^d`.
    pub fn random<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Self {
        let mut vectors = Param::uniform("codebook", &[size, dim], 1.0 / size as f32, rng);
        vectors.decay = false;
        Self {
            vectors,
            size,
            dim,
            usage_counts: vec![0; size],
        }
    }

    pub fn from_vectors(size: usize, dim: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), size * dim);
        let mut vectors = Param::zeros("codebook", &[size, dim], false);
        vectors.value = values;
        Self {
            vectors,
            size,
            dim,
            usage_counts: vec![0; size],
        }
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors.value[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the Euclidean-nearest entry; ties resolve to the lowest index.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for k in 0..self.size {
            let d: f32 = z
                .iter()
                .zip(self.vector(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

impl Module for Codebook {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.vectors);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.vectors);
    }
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// The selected codebook vectors, `(n, d)`.
    pub quantized: Vec<f32>,
    /// `mean ||sg(z) - e||²`, the term that moves codebook entries.
    pub codebook_loss: f64,
    /// `mean ||z - sg(e)||²`, the term that holds encoder outputs near their codes (before β).
    pub commitment_loss: f64,
}

/// Map each `d`-vector row of `latents` to its nearest codebook entry.
pub fn quantize(latents: &[f32], codebook: &Codebook) -> Result<Quantized> {
    let d = codebook.dim;
    if d == 0 || !latents.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch {
            expected: vec![d],
            found: vec![latents.len()],
        });
    }
    let n = latents.len() / d;
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(latents.len());
    let mut sq = 0.0f64;
    for z in latents.chunks_exact(d) {
        let k = codebook.nearest(z);
        let e = codebook.vector(k);
        sq += z.iter().zip(e).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        indices.push(k);
        quantized.extend_from_slice(e);
    }
    let mse = if n == 0 { 0.0 } else { sq / (n * d) as f64 };
    Ok(Quantized {
        indices,
        quantized,
        codebook_loss: mse,
        commitment_loss: mse,
    })
}

/// Backward pass of the VQ layer.
///
/// The straight-through estimator copies `d_quantized` onto the encoder latents
/// unchanged, adds the commitment gradient `beta * d/dz ||z - sg(e)||²`, and
/// accumulates `d/de ||sg(z) - e||²` into the codebook gradient.
pub fn quantize_backward(
    latents: &[f32],
    q: &Quantized,
    d_quantized: &[f32],
    beta: f32,
    codebook: &mut Codebook,
) -> Vec<f32> {
    let d = codebook.dim;
    let scale = 2.0 / latents.len().max(1) as f32;
    let mut dz = d_quantized.to_vec();
    for (row, &k) in q.indices.iter().enumerate() {
        for j in 0..d {
            let i = row * d + j;
            let diff = latents[i] - q.quantized[i];
            dz[i] += beta * scale * diff;
            codebook.vectors.grad[k * d + j] -= scale * diff;
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(z: &[f32], book: &[f32], d: usize) -> usize {
        let k_total = book.len() / d;
        let dists: Vec<f64> = (0..k_total)
            .map(|k| {
                (0..d)
                    .map(|j| (z[j] as f64 - book[k * d + j] as f64).powi(2))
                    .sum()
            })
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&x| x == min).unwrap()
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::random(16, 4, &mut rng);
        let z = cb.vector(7).to_vec();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![7]);
        assert_eq!(q.codebook_loss, 0.0);
        assert_eq!(q.commitment_loss, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut book = vec![5.0f32; 8 * 2];
        book[2 * 2..2 * 2 + 2].copy_from_slice(&[1.0, 0.0]);
        book[5 * 2..5 * 2 + 2].copy_from_slice(&[-1.0, 0.0]);
        let cb = Codebook::from_vectors(8, 2, book);
        assert_eq!(quantize(&[0.0, 0.0], &cb).unwrap().indices, vec![2]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let book: Vec<f32> = (0..8 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::from_vectors(8, d, book.clone());
        let z: Vec<f32> = (0..16 * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let q = quantize(&z, &cb).unwrap();
        for (i, row) in z.chunks_exact(d).enumerate() {
            assert_eq!(q.indices[i], brute_force(row, &book, d));
        }
    }

    #[test]
    fn straight_through_and_vq_gradients() {
        let mut cb = Codebook::from_vectors(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let z = vec![0.2f32, -0.1, 0.9, 1.3];
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![0, 1]);
        let upstream = vec![0.5f32, -0.5, 0.25, 1.0];
        let dz = quantize_backward(&z, &q, &upstream, 0.25, &mut cb);
        // scale = 2 / 4 elements
        let want_dz = [0.5 + 0.25 * 0.5 * 0.2, -0.5 + 0.25 * 0.5 * -0.1, 0.25 + 0.25 * 0.5 * -0.1, 1.0 + 0.25 * 0.5 * 0.3];
        for (a, b) in dz.iter().zip(want_dz) {
            assert!((a - b).abs() < 1e-6);
        }
        let want_cb = [-0.5 * 0.2, -0.5 * -0.1, -0.5 * -0.1, -0.5 * 0.3];
        for (a, b) in cb.vectors.grad.iter().zip(want_cb) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
