//! Choosing survivors from a voted population and growing the next one.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Population, Sample};
use crate::vote::VoteHistogram;

/// Indices of the `n_syn` largest noisy counts (ties to the lower index),
/// returned in ascending index order.
pub fn rank_select_indices(noisy: &[f64], n_syn: usize) -> Result<Vec<usize>> {
    if n_syn > noisy.len() {
        return Err(Error::domain(format!(
            "cannot select {n_syn} samples from a population of {}",
            noisy.len()
        )));
    }
    let mut order: Vec<usize> = (0..noisy.len()).collect();
    order.sort_by(|&a, &b| noisy[b].total_cmp(&noisy[a]).then(a.cmp(&b)));
    let mut picked = order[..n_syn].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn rank_select(hist: &VoteHistogram, population: &Population, n_syn: usize) -> Result<Population> {
    let noisy = hist
        .noisy_counts()
        .ok_or_else(|| Error::domain("rank selection needs noisy counts"))?;
    if noisy.len() != population.len() {
        return Err(Error::domain("histogram and population sizes differ"));
    }
    Ok(population.select(&rank_select_indices(noisy, n_syn)?))
}

/// `n_syn` independent draws with replacement, weighted by `probabilities`.
pub fn probability_select_indices<R: Rng + ?Sized>(
    probabilities: &[f64],
    n_syn: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(probabilities).map_err(|e| Error::domain(e.to_string()))?;
    Ok((0..n_syn).map(|_| dist.sample(rng)).collect())
}

pub fn probability_select<R: Rng + ?Sized>(
    hist: &VoteHistogram,
    population: &Population,
    n_syn: usize,
    rng: &mut R,
) -> Result<Population> {
    let probs = hist
        .probabilities()
        .ok_or_else(|| Error::domain("probability selection needs probabilities"))?;
    if probs.len() != population.len() {
        return Err(Error::domain("histogram and population sizes differ"));
    }
    Ok(population.select(&probability_select_indices(probs, n_syn, rng)?))
}

/// The selected samples followed by `big_l − 1` rounds of variations of each.
///
/// Output layout: originals, then round 1 in original order, then round 2,
/// and so on, regardless of completion order. `vary(sample, index, round)`
/// failures are replaced by the unvaried original.
pub fn expand_population<F>(selected: &Population, vary: F, big_l: usize) -> Result<Population>
where
    F: Fn(&Sample, usize, usize) -> Result<Sample> + Sync,
{
    if big_l == 0 {
        return Err(Error::domain("big_l must be at least 1"));
    }
    let mut out: Vec<Sample> = selected.samples().to_vec();
    out.extend(variation_rounds(selected, &vary, 1..big_l));
    Ok(Population::new(out))
}

/// Variations for the given rounds, laid out round-major.
pub(crate) fn variation_rounds<F>(
    selected: &Population,
    vary: &F,
    rounds: std::ops::Range<usize>,
) -> Vec<Sample>
where
    F: Fn(&Sample, usize, usize) -> Result<Sample> + Sync,
{
    let n = selected.len();
    let jobs: Vec<(usize, usize)> = rounds.flat_map(|r| (0..n).map(move |i| (r, i))).collect();
    jobs.par_iter()
        .map(|&(round, i)| {
            let original = &selected.samples()[i];
            vary(original, i, round).unwrap_or_else(|e| {
                warn!("variation of sample {i} (round {round}) failed, keeping original: {e}");
                original.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::*;

    fn pop(n: usize) -> Population {
        Population::new((0..n).map(|i| Sample::new(format!("s{i}"), None)).collect())
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_select_indices(&[5.2, 1.1, 3.3], 2).unwrap(), vec![0, 2]);
        assert_eq!(rank_select_indices(&[1.0; 6], 3).unwrap(), vec![0, 1, 2]);
        assert!(rank_select_indices(&[1.0], 2).is_err());
        let p = rank_select(&VoteHistogram::from_noisy(vec![5.2, 1.1, 3.3]), &pop(3), 2).unwrap();
        let texts: Vec<&str> = p.samples().iter().map(Sample::text).collect();
        assert_eq!(texts, vec!["s0", "s2"]);
    }

    #[test]
    fn probability_examples() {
        let key = StreamKey::new(3, "t", 0, "select");
        let idx = probability_select_indices(&[1.0, 0.0], 50, &mut key.rng()).unwrap();
        assert!(idx.iter().all(|&i| i == 0));

        let idx = probability_select_indices(&[0.25; 4], 4000, &mut key.rng()).unwrap();
        for b in 0..4 {
            let c = idx.iter().filter(|&&i| i == b).count() as f64;
            assert!((c - 1000.0).abs() <= 50.0, "bin {b}: {c}");
        }
        let again = probability_select_indices(&[0.25; 4], 4000, &mut key.rng()).unwrap();
        assert_eq!(idx, again);
    }

    #[test]
    fn expansion_layout() {
        let sel = pop(2);
        let tag = |s: &Sample, _i: usize, r: usize| Ok(s.with_text(format!("{} v{r}", s.text())));
        assert_eq!(expand_population(&sel, tag, 1).unwrap(), sel);
        let out = expand_population(&sel, tag, 4).unwrap();
        let texts: Vec<&str> = out.samples().iter().map(Sample::text).collect();
        assert_eq!(
            texts,
            vec!["s0", "s1", "s0 v1", "s1 v1", "s0 v2", "s1 v2", "s0 v3", "s1 v3"]
        );
        let same = expand_population(&sel, |s: &Sample, _, _| Ok(s.clone()), 3).unwrap();
        assert_eq!(same.len(), 6);
        assert!(same.samples().iter().filter(|s| s.text() == "s0").count() == 3);
    }

    #[test]
    fn failed_variations_keep_the_original() {
        let sel = pop(3);
        let flaky = |s: &Sample, i: usize, _r: usize| {
            if i == 1 {
                Err(Error::Backend("boom".into()))
            } else {
                Ok(s.with_text("new"))
            }
        };
        let out = expand_population(&sel, flaky, 2).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.samples()[4].text(), "s1");
        assert_eq!(out.samples()[3].text(), "new");
    }

    proptest! {
        #[test]
        fn rank_matches_full_sort(v in proptest::collection::vec(-50i32..50, 1..60), k in 0usize..60, shift in -100.0f64..100.0) {
            let noisy: Vec<f64> = v.iter().map(|&x| x as f64 * 0.5).collect();
            let k = k.min(noisy.len());
            let got = rank_select_indices(&noisy, k).unwrap();
            let mut sorted = noisy.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut picked: Vec<f64> = got.iter().map(|&i| noisy[i]).collect();
            picked.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(&picked[..], &sorted[..k]);
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
            let shifted: Vec<f64> = noisy.iter().map(|x| x + shift).collect();
            prop_assert_eq!(rank_select_indices(&shifted, k).unwrap(), got);
        }
    }
}
