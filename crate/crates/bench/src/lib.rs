//! Synthetic inputs shared by the benchmarks.

use divkit_core::PreferenceSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `count` samples with prompts of 8 to 40 words over a vocabulary of
/// `vocab` words, skewed toward low word ids.
pub fn synthetic_corpus(count: usize, vocab: usize, seed: u64) -> Vec<PreferenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let len = rng.random_range(8..40);
            let prompt = (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    format!("w{}", (u * u * vocab as f64) as usize)
                })
                .collect::<Vec<_>>()
                .join(" ");
            let id = format!("{seed}-{i}");
            let responses = vec![format!("{id} a"), format!("{id} b")];
            PreferenceSample::new(id, prompt, responses).expect("valid sample")
        })
        .collect()
}

/// Strictly decreasing rewards and non-positive log-probabilities for a
/// ranking of length `n` with `tokens` top-candidate tokens.
pub fn ranking_instance(n: usize, tokens: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = (0..n).map(|_| -rng.random_range(0.1..20.0)).collect();
    let top = (0..tokens).map(|_| -rng.random_range(0.0..5.0)).collect();
    let rewards = (0..n).rev().map(|k| k as f64 + rng.random_range(0.1..0.9)).collect();
    (candidates, top, rewards)
}
