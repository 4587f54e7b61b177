//! A closed synthetic universe for offline runs: a token vocabulary split
//! into topic clusters, a private-corpus generator over it, and a distance
//! oracle for measuring how close synthetic samples get to private ones.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::types::{sq_dist, PrivateDataset, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseParams {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_topics")]
    pub n_topics: usize,
    #[serde(default = "default_bias")]
    pub within_topic_bias: f64,
    /// Exponent of the Zipf law over each cluster's tokens (0 = uniform).
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    1000
}
fn default_topics() -> usize {
    3
}
fn default_bias() -> f64 {
    0.8
}
fn default_zipf() -> f64 {
    2.0
}

impl Default for UniverseParams {
    fn default() -> Self {
        UniverseParams {
            vocab_size: default_vocab(),
            n_topics: default_topics(),
            within_topic_bias: default_bias(),
            zipf_exponent: default_zipf(),
            seed: 0,
        }
    }
}

/// Vocabulary partitioned into near-equal topic clusters.
#[derive(Debug, Clone)]
pub struct MockUniverse {
    params: UniverseParams,
    tokens: Vec<String>,
    clusters: Vec<Vec<usize>>,
    cluster_of: HashMap<String, usize>,
    /// Cumulative Zipf weights, one table per cluster.
    cumulative: Vec<Vec<f64>>,
}

impl MockUniverse {
    pub fn new(params: UniverseParams) -> Result<Self> {
        if params.n_topics == 0 || params.vocab_size < params.n_topics {
            return Err(Error::domain("need at least one token per topic"));
        }
        if !(0.0..=1.0).contains(&params.within_topic_bias) {
            return Err(Error::domain("within_topic_bias must lie in [0, 1]"));
        }
        if !(params.zipf_exponent >= 0.0) {
            return Err(Error::domain("zipf_exponent must be non-negative"));
        }
        let tokens: Vec<String> = (0..params.vocab_size).map(|i| format!("tok{i:04}")).collect();
        let mut order: Vec<usize> = (0..params.vocab_size).collect();
        order.shuffle(&mut StreamKey::new(params.seed, "universe", 0, "vocab").rng());
        let (base, extra) = (params.vocab_size / params.n_topics, params.vocab_size % params.n_topics);
        let mut clusters = Vec::with_capacity(params.n_topics);
        let mut start = 0;
        for k in 0..params.n_topics {
            let size = base + usize::from(k < extra);
            clusters.push(order[start..start + size].to_vec());
            start += size;
        }
        let mut cluster_of = HashMap::new();
        for (k, c) in clusters.iter().enumerate() {
            for &t in c {
                cluster_of.insert(tokens[t].clone(), k);
            }
        }
        let cumulative = clusters
            .iter()
            .map(|c| {
                let mut acc = 0.0;
                (1..=c.len())
                    .map(|r| {
                        acc += (r as f64).powf(-params.zipf_exponent);
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(MockUniverse {
            params,
            tokens,
            clusters,
            cluster_of,
            cumulative,
        })
    }

    pub fn params(&self) -> &UniverseParams {
        &self.params
    }

    pub fn n_topics(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_tokens(&self, k: usize) -> impl Iterator<Item = &str> {
        self.clusters[k].iter().map(|&t| self.tokens[t].as_str())
    }

    pub fn cluster_of(&self, token: &str) -> Option<usize> {
        self.cluster_of.get(token).copied()
    }

    /// Name used for topic `k` in prompts and labels.
    pub fn topic_name(k: usize) -> String {
        format!("topic{k}")
    }

    pub fn topic_of_name(name: &str) -> Option<usize> {
        name.strip_prefix("topic")?.parse().ok()
    }

    /// A token of cluster `k`, Zipf-weighted.
    pub fn draw_from_cluster<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> &str {
        let cum = &self.cumulative[k];
        let u = rng.random::<f64>() * cum[cum.len() - 1];
        let r = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        &self.tokens[self.clusters[k][r]]
    }

    /// A token from a uniformly chosen cluster.
    pub fn draw_any<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let k = rng.random_range(0..self.n_topics());
        self.draw_from_cluster(k, rng)
    }

    /// With probability `within_topic_bias` a token of topic `k`, else any token.
    pub fn draw_topical<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> &str {
        if rng.random::<f64>() < self.params.within_topic_bias {
            self.draw_from_cluster(k, rng)
        } else {
            self.draw_any(rng)
        }
    }

    /// One text of `len` tokens about topic `k`.
    pub fn topical_text<R: Rng + ?Sized>(&self, k: usize, len: usize, rng: &mut R) -> String {
        (0..len)
            .map(|_| self.draw_topical(k, rng))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Shape of a generated private corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n: usize,
    pub topic_mix: Vec<f64>,
    pub length_mean: f64,
    pub length_std: f64,
    /// Label each record with its topic name.
    pub labeled: bool,
}

/// Draws a private corpus: per record a topic from `topic_mix`, a length
/// `max(5, round(N(mean, std²)))`, then topical tokens.
pub fn sample_private_corpus(universe: &MockUniverse, spec: &CorpusSpec) -> Result<PrivateDataset> {
    if spec.topic_mix.len() != universe.n_topics() {
        return Err(Error::domain(format!(
            "topic_mix has {} entries for {} topics",
            spec.topic_mix.len(),
            universe.n_topics()
        )));
    }
    let total: f64 = spec.topic_mix.iter().sum();
    if spec.topic_mix.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain("topic_mix must be a probability vector"));
    }
    let lengths = Normal::new(spec.length_mean, spec.length_std.max(0.0))
        .map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = StreamKey::new(universe.params.seed, "universe", 0, "corpus").rng();
    let mut samples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut topic = spec.topic_mix.len() - 1;
        for (k, p) in spec.topic_mix.iter().enumerate() {
            acc += p;
            if u < acc {
                topic = k;
                break;
            }
        }
        let len = (lengths.sample(&mut rng).round() as i64).max(5) as usize;
        let text = universe.topical_text(topic, len, &mut rng);
        let label = spec.labeled.then(|| MockUniverse::topic_name(topic));
        samples.push(Sample::new(text, label));
    }
    if spec.labeled {
        let labels = (0..universe.n_topics()).map(MockUniverse::topic_name).collect();
        let present: Vec<String> = labels_present(&samples, labels);
        PrivateDataset::with_labels(samples, present)
    } else {
        PrivateDataset::new(samples)
    }
}

fn labels_present(samples: &[Sample], labels: Vec<String>) -> Vec<String> {
    labels
        .into_iter()
        .filter(|l| samples.iter().any(|s| s.label() == Some(l.as_str())))
        .collect()
}

/// Euclidean embedding distance from `sample` to its closest private record.
pub fn oracle_distance(sample: &Sample, dataset: &PrivateDataset, embedder: &dyn Embedder) -> Result<f64> {
    let texts: Vec<String> = dataset.samples().iter().map(|s| s.text().to_string()).collect();
    let private = embedder.embed_batch(&texts)?;
    let me = embedder.embed_batch(&[sample.text().to_string()])?;
    Ok(private
        .iter_rows()
        .map(|r| sq_dist(r, me.row(0)))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockHashEmbedder;

    fn spec(n: usize, mix: Vec<f64>) -> CorpusSpec {
        CorpusSpec {
            n,
            topic_mix: mix,
            length_mean: 20.0,
            length_std: 5.0,
            labeled: false,
        }
    }

    #[test]
    fn vocabulary_partitions_evenly() {
        let u = MockUniverse::new(UniverseParams::default()).unwrap();
        let sizes: Vec<usize> = (0..3).map(|k| u.cluster_tokens(k).count()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for k in 0..3 {
            assert!(u.cluster_tokens(k).all(|t| u.cluster_of(t) == Some(k)));
        }
    }

    #[test]
    fn single_topic_corpus_is_mostly_on_topic() {
        let u = MockUniverse::new(UniverseParams::default()).unwrap();
        let d = sample_private_corpus(&u, &spec(700, vec![1.0, 0.0, 0.0])).unwrap();
        let mut on = 0usize;
        let mut total = 0usize;
        for s in d.samples() {
            for t in s.text().split_whitespace() {
                total += 1;
                on += usize::from(u.cluster_of(t) == Some(0));
            }
        }
        assert!(total >= 10_000);
        // topical draws plus the off-topic draws that land in cluster 0 anyway
        let frac = on as f64 / total as f64;
        assert!(frac >= 0.8, "{frac}");
    }

    #[test]
    fn corpus_rules() {
        let u = MockUniverse::new(UniverseParams::default()).unwrap();
        assert!(sample_private_corpus(&u, &spec(0, vec![1.0, 0.0, 0.0])).is_err());
        assert!(sample_private_corpus(&u, &spec(5, vec![1.0, 0.0])).is_err());
        let a = sample_private_corpus(&u, &spec(50, vec![0.5, 0.3, 0.2])).unwrap();
        let b = sample_private_corpus(&u, &spec(50, vec![0.5, 0.3, 0.2])).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert!(a.samples().iter().all(|s| s.word_count() >= 5));
    }

    #[test]
    fn oracle_distance_cases() {
        let u = MockUniverse::new(UniverseParams::default()).unwrap();
        let e = MockHashEmbedder::new(32, true).unwrap();
        let d = sample_private_corpus(&u, &spec(30, vec![0.4, 0.3, 0.3])).unwrap();
        let member = d.samples()[7].clone();
        assert!(oracle_distance(&member, &d, &e).unwrap() < 1e-12);
        let outsider = Sample::new("nothing like the corpus", None);
        let fwd = oracle_distance(&outsider, &d, &e).unwrap();
        let mut rev: Vec<Sample> = d.samples().to_vec();
        rev.reverse();
        let back = oracle_distance(&outsider, &PrivateDataset::new(rev).unwrap(), &e).unwrap();
        assert!(fwd > 0.0);
        assert_eq!(fwd, back);
    }
}
