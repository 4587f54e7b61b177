//! Independent oracles and mock-world fixtures shared by the integration
//! tests. Nothing here calls the code under test to compute an expected value.

#![allow(dead_code)]

use augpe::embed::MockHashEmbedder;
use augpe::genapi::MockLlm;
use augpe::mockworld::{sample_private_corpus, CorpusSpec, MockUniverse, UniverseParams};
use augpe::types::PrivateDataset;

/// Density of N(mean, sigma²).
fn normal_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Composite Simpson rule with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// δ(ε) of the Gaussian mechanism by direct integration of the hockey-stick
/// divergence between N(0, σ²) and N(Δ, σ²):
/// `∫ max(0, p(x) − e^ε q(x)) dx`.
///
/// The integrand is positive exactly left of `x* = Δ/2 − εσ²/Δ`, so the kink
/// sits on the upper limit and Simpson only sees a smooth function there.
pub fn hockey_stick_delta(sigma: f64, epsilon: f64, sensitivity: f64) -> f64 {
    let x_star = sensitivity / 2.0 - epsilon * sigma * sigma / sensitivity;
    let lo = x_star.min(0.0) - 40.0 * sigma;
    let f = |x: f64| normal_pdf(x, 0.0, sigma) - epsilon.exp() * normal_pdf(x, sensitivity, sigma);
    // dense panels near the kink, coarse in the far tail
    let near = x_star - 8.0 * sigma;
    let mass = simpson(f, near.max(lo), x_star, 40_000)
        + if near > lo { simpson(f, lo, near, 4_000) } else { 0.0 };
    mass.max(0.0)
}

/// Vote tally by explicit triple loop: each private row votes for the
/// synthetic row with the smallest squared distance, first one on ties.
pub fn brute_force_votes(syn: &[Vec<f64>], pri: &[Vec<f64>]) -> Vec<u64> {
    let mut votes = vec![0u64; syn.len()];
    for p in pri {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, s) in syn.iter().enumerate() {
            let mut d = 0.0;
            for k in 0..p.len() {
                let diff = p[k] - s[k];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        votes[best] += 1;
    }
    votes
}

pub fn universe(seed: u64) -> UniverseParams {
    UniverseParams {
        seed,
        ..Default::default()
    }
}

pub fn mock_llm(seed: u64, mutation_rate: f64) -> MockLlm {
    MockLlm::new(universe(seed), mutation_rate, 30).unwrap()
}

pub fn embedder() -> MockHashEmbedder {
    MockHashEmbedder::new(MockHashEmbedder::DEFAULT_DIMENSION, true).unwrap()
}

/// The three-topic corpus used by the convergence checks.
pub fn corpus(seed: u64, n: usize, length_mean: f64, length_std: f64, labeled: bool) -> PrivateDataset {
    let u = MockUniverse::new(universe(seed)).unwrap();
    sample_private_corpus(
        &u,
        &CorpusSpec {
            n,
            topic_mix: vec![0.5, 0.3, 0.2],
            length_mean,
            length_std,
            labeled,
        },
    )
    .unwrap()
}

/// Row-major copy of an embedding matrix.
pub fn rows(m: &augpe::types::EmbeddingMatrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.to_vec()).collect()
}
