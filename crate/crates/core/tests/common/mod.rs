#![allow(dead_code)]

use httm::{Matrix, TokenTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(h: usize, n: usize, d: usize, frame_len: usize, seed: u64) -> TokenTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    TokenTensor::new(data, h, n, d, frame_len).unwrap()
}

pub fn rel_frobenius(reference: &Matrix, other: &Matrix) -> f64 {
    let num: f64 = reference
        .as_slice()
        .iter()
        .zip(other.as_slice())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let den: f64 = reference.as_slice().iter().map(|&x| (x as f64).powi(2)).sum();
    (num / den).sqrt()
}

/// Naive cosine in f64, independent of the library's normalization path.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
