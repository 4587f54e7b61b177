//! Private nearest-neighbor voting and Gaussian noising of the vote histogram.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::nearest_row;
use crate::error::{Error, Result};
use crate::types::EmbeddingMatrix;

/// Per-candidate vote counts. Raw counts are private; only the noisy counts
/// may leave the process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteHistogram {
    #[serde(skip)]
    raw_counts: Vec<u64>,
    noisy_counts: Option<Vec<f64>>,
    probabilities: Option<Vec<f64>>,
}

impl VoteHistogram {
    pub fn from_raw(raw_counts: Vec<u64>) -> Self {
        VoteHistogram {
            raw_counts,
            noisy_counts: None,
            probabilities: None,
        }
    }

    /// A histogram known only through its noisy counts (e.g. from a checkpoint).
    pub fn from_noisy(noisy_counts: Vec<f64>) -> Self {
        VoteHistogram {
            raw_counts: Vec::new(),
            noisy_counts: Some(noisy_counts),
            probabilities: None,
        }
    }

    pub fn raw_counts(&self) -> &[u64] {
        &self.raw_counts
    }

    pub fn noisy_counts(&self) -> Option<&[f64]> {
        self.noisy_counts.as_deref()
    }

    pub fn probabilities(&self) -> Option<&[f64]> {
        self.probabilities.as_deref()
    }

    pub fn len(&self) -> usize {
        self.noisy_counts
            .as_ref()
            .map(Vec::len)
            .unwrap_or(self.raw_counts.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Each private row votes for its nearest synthetic row.
///
/// Voters are processed in fixed-size chunks whose tallies are summed in
/// chunk order, so the result does not depend on thread scheduling.
pub fn nn_histogram(e_syn: &EmbeddingMatrix, e_pri: &EmbeddingMatrix) -> Result<VoteHistogram> {
    if e_syn.rows() == 0 {
        return Err(Error::domain("no synthetic samples to vote for"));
    }
    if e_pri.rows() > 0 && e_pri.dim() != e_syn.dim() {
        return Err(Error::domain(format!(
            "private dimension {} differs from synthetic dimension {}",
            e_pri.dim(),
            e_syn.dim()
        )));
    }
    const CHUNK: usize = 256;
    let n = e_syn.rows();
    let partials: Vec<Vec<u64>> = (0..e_pri.rows())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            let mut tally = vec![0u64; n];
            for &r in rows {
                tally[nearest_row(e_pri.row(r), e_syn).0] += 1;
            }
            tally
        })
        .collect();
    let mut counts = vec![0u64; n];
    for p in partials {
        counts.iter_mut().zip(p).for_each(|(c, x)| *c += x);
    }
    Ok(VoteHistogram::from_raw(counts))
}

/// Adds i.i.d. `N(0, σ²)` noise to every bin, sequentially from `rng`.
/// With `σ = 0` the noisy counts equal the raw counts and `rng` is untouched.
pub fn add_noise<R: Rng + ?Sized>(hist: &VoteHistogram, sigma: f64, rng: &mut R) -> Result<VoteHistogram> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be non-negative, got {sigma}")));
    }
    let noisy = if sigma == 0.0 {
        hist.raw_counts.iter().map(|&c| c as f64).collect()
    } else {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
        hist.raw_counts
            .iter()
            .map(|&c| c as f64 + normal.sample(rng))
            .collect()
    };
    Ok(VoteHistogram {
        raw_counts: hist.raw_counts.clone(),
        noisy_counts: Some(noisy),
        probabilities: None,
    })
}

/// Clamps negative noisy counts to zero and normalizes; falls back to the
/// uniform distribution when nothing positive remains.
pub fn to_probabilities(hist: &VoteHistogram) -> Result<VoteHistogram> {
    let noisy = hist
        .noisy_counts
        .as_ref()
        .ok_or_else(|| Error::domain("noisy counts are required"))?;
    let clamped: Vec<f64> = noisy
        .iter()
        .map(|&x| if x.is_finite() && x > 0.0 { x } else { 0.0 })
        .collect();
    let total: f64 = clamped.iter().sum();
    let probs = if total > 0.0 {
        clamped.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / noisy.len() as f64; noisy.len()]
    };
    Ok(VoteHistogram {
        raw_counts: hist.raw_counts.clone(),
        noisy_counts: hist.noisy_counts.clone(),
        probabilities: Some(probs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows, false).unwrap()
    }

    #[test]
    fn two_voters_one_winner() {
        let syn = m(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pri = m(vec![vec![0.9, 0.1], vec![0.8, 0.3]]);
        assert_eq!(nn_histogram(&syn, &pri).unwrap().raw_counts(), &[2, 0]);
        let one = m(vec![vec![0.1, 0.9]]);
        assert_eq!(nn_histogram(&syn, &one).unwrap().raw_counts(), &[0, 1]);
    }

    #[test]
    fn noise_free_and_deterministic() {
        let h = VoteHistogram::from_raw(vec![2, 0]);
        let mut rng = StreamKey::new(1, "t", 0, "vote").rng();
        assert_eq!(add_noise(&h, 0.0, &mut rng).unwrap().noisy_counts(), Some(&[2.0, 0.0][..]));
        let key = StreamKey::new(9, "t", 2, "vote");
        let a = add_noise(&h, 3.0, &mut key.rng()).unwrap();
        let b = add_noise(&h, 3.0, &mut key.rng()).unwrap();
        assert_eq!(a, b);
        assert!(add_noise(&h, -1.0, &mut key.rng()).is_err());
    }

    #[test]
    fn noise_has_the_requested_distribution() {
        let n = 10_000;
        let h = VoteHistogram::from_raw(vec![0; n]);
        let noisy = add_noise(&h, 1.0, &mut StreamKey::new(5, "t", 0, "vote").rng()).unwrap();
        let xs = noisy.noisy_counts().unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "{}", var.sqrt());
    }

    #[test]
    fn probability_examples() {
        let p = |v: Vec<f64>| to_probabilities(&VoteHistogram::from_noisy(v)).unwrap().probabilities().unwrap().to_vec();
        assert_eq!(p(vec![2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(p(vec![-1.0, -2.0]), vec![0.5, 0.5]);
        assert_eq!(p(vec![3.0, 1.0]), vec![0.75, 0.25]);
        assert!(to_probabilities(&VoteHistogram::from_raw(vec![1])).is_err());
    }

    #[test]
    fn raw_counts_never_serialize() {
        let h = add_noise(&VoteHistogram::from_raw(vec![7, 3]), 0.0, &mut StreamKey::new(0, "", 0, "vote").rng()).unwrap();
        let json = serde_json::to_string(&h).unwrap();
        assert!(!json.contains("raw"), "{json}");
    }

    proptest! {
        #[test]
        fn probabilities_are_a_distribution(v in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
            let h = to_probabilities(&VoteHistogram::from_noisy(v)).unwrap();
            let p = h.probabilities().unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn histogram_ignores_voter_order(seed in 0u64..1000) {
            let mut rng = StreamKey::new(seed, "p", 0, "t").rng();
            let pri: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let syn: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let mut rev = pri.clone();
            rev.reverse();
            let a = nn_histogram(&m(syn.clone()), &m(pri)).unwrap();
            let b = nn_histogram(&m(syn), &m(rev)).unwrap();
            prop_assert_eq!(a.raw_counts(), b.raw_counts());
            prop_assert_eq!(a.raw_counts().iter().sum::<u64>(), 40);
        }
    }
}
