//! Distribution-level comparisons between a real and a synthetic corpus:
//! Fréchet distance, k-NN precision/recall, clustered KL/TV divergence, and
//! text-length statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{nearest_row, Embedder};
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::types::{sq_dist, EmbeddingMatrix, Population, Sample};

/// Ridge added to both covariances before the matrix square root.
const COV_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl LengthStats {
    /// Word-count summary; all zero for an empty corpus. Quantiles use the
    /// nearest-rank rule.
    pub fn of(samples: &[Sample]) -> Self {
        let mut w: Vec<usize> = samples.iter().map(Sample::word_count).collect();
        if w.is_empty() {
            return LengthStats::default();
        }
        w.sort_unstable();
        let rank = |q: f64| w[((q * w.len() as f64).ceil() as usize).clamp(1, w.len()) - 1] as f64;
        LengthStats {
            mean: w.iter().sum::<usize>() as f64 / w.len() as f64,
            median: rank(0.5),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusLengths {
    pub real: LengthStats,
    pub synthetic: LengthStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kl_div: f64,
    pub tv_div: f64,
    pub length_stats: CorpusLengths,
}

fn check_dims(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::domain(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn mean_and_cov(e: &EmbeddingMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (e.rows(), e.dim());
    let x = DMatrix::from_row_slice(n, d, e.as_flat());
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).mean()));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += COV_RIDGE;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid(e_a: &EmbeddingMatrix, e_b: &EmbeddingMatrix) -> Result<f64> {
    check_dims(e_a, e_b)?;
    if e_a.rows() < 2 || e_b.rows() < 2 {
        return Err(Error::domain("fid needs at least two rows per set"));
    }
    let (mu_a, cov_a) = mean_and_cov(e_a);
    let (mu_b, cov_b) = mean_and_cov(e_b);
    // tr((Σa Σb)^½) = tr((Σa^½ Σb Σa^½)^½), and the latter is symmetric
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Squared distance from each row to its `k`-th nearest other row.
fn knn_radii_sq(e: &EmbeddingMatrix, k: usize) -> Vec<f64> {
    (0..e.rows())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..e.rows())
                .filter(|&j| j != i)
                .map(|j| sq_dist(e.row(i), e.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Fraction of `queries` rows lying inside the `k`-NN ball of their nearest
/// `support` row.
fn coverage(support: &EmbeddingMatrix, queries: &EmbeddingMatrix, k: usize) -> f64 {
    let radii = knn_radii_sq(support, k);
    let inside = (0..queries.rows())
        .into_par_iter()
        .filter(|&i| {
            let (j, d) = nearest_row(queries.row(i), support);
            d <= radii[j]
        })
        .count();
    inside as f64 / queries.rows() as f64
}

/// k-NN manifold precision, recall and their harmonic mean.
pub fn precision_recall_f1(e_real: &EmbeddingMatrix, e_syn: &EmbeddingMatrix, k: usize) -> Result<(f64, f64, f64)> {
    check_dims(e_real, e_syn)?;
    if k == 0 {
        return Err(Error::domain("k must be positive"));
    }
    if e_real.rows() <= k || e_syn.rows() <= k {
        return Err(Error::domain(format!(
            "both sets need more than k = {k} rows (got {} and {})",
            e_real.rows(),
            e_syn.rows()
        )));
    }
    let precision = coverage(e_real, e_syn, k);
    let recall = coverage(e_syn, e_real, k);
    Ok((precision, recall, f1(precision, recall)))
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision > 0.0 && recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Lloyd's k-means with k-means++ seeding and a fixed iteration count.
/// Returns the cluster of each row.
pub fn kmeans<R: Rng + ?Sized>(e: &EmbeddingMatrix, k: usize, iterations: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = e.rows();
    if k == 0 || n < k {
        return Err(Error::domain(format!("cannot form {k} clusters from {n} rows")));
    }
    let d = e.dim();
    let mut centroids: Vec<Vec<f64>> = vec![e.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(e.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = e.row(next).to_vec();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_dist(e.row(i), &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let dist = sq_dist(e.row(i), c);
                    if dist < best.1 {
                        best = (j, dist);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut labels = assign(&centroids);
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(e.row(i)) {
                *s += x;
            }
        }
        for j in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        labels = assign(&centroids);
    }
    Ok(labels)
}

/// KL(real ‖ syn) and total variation between the two corpora's
/// distributions over k-means clusters of their union, with add-one
/// smoothing.
pub fn kl_tv_divergence<R: Rng + ?Sized>(
    e_real: &EmbeddingMatrix,
    e_syn: &EmbeddingMatrix,
    n_clusters: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    check_dims(e_real, e_syn)?;
    if e_real.rows() == 0 || e_syn.rows() == 0 {
        return Err(Error::domain("both corpora must be non-empty"));
    }
    let union = EmbeddingMatrix::vstack(&[e_real, e_syn])?;
    let labels = kmeans(&union, n_clusters, 50, rng)?;
    let smoothed = |part: &[usize]| -> Vec<f64> {
        let mut c = vec![1.0; n_clusters];
        for &l in part {
            c[l] += 1.0;
        }
        let total = (part.len() + n_clusters) as f64;
        c.into_iter().map(|x| x / total).collect()
    };
    let p = smoothed(&labels[..e_real.rows()]);
    let q = smoothed(&labels[e_real.rows()..]);
    let kl = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0);
    let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok((kl, tv.clamp(0.0, 1.0)))
}

/// Word-count histogram with bins `[0, w), [w, 2w), …` up to the longest
/// sample; empty bins in between are kept.
pub fn length_histogram(population: &Population, bin_width: usize) -> Result<Vec<(usize, usize)>> {
    if bin_width == 0 {
        return Err(Error::domain("bin_width must be positive"));
    }
    let Some(max) = population.samples().iter().map(Sample::word_count).max() else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0usize; max / bin_width + 1];
    for s in population.samples() {
        counts[s.word_count() / bin_width] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b * bin_width, c))
        .collect())
}

pub fn histogram_csv(bins: &[(usize, usize)]) -> String {
    let mut out = String::from("bin_start,count\n");
    for (start, count) in bins {
        out.push_str(&format!("{start},{count}\n"));
    }
    out
}

/// Knobs for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    pub n_clusters: usize,
    /// Larger corpora are subsampled to this many rows.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 5,
            n_clusters: 20,
            max_rows: 5000,
            seed: 0,
        }
    }
}

/// At most `max_rows` samples, drawn without replacement and kept in order.
pub fn subsample<R: Rng + ?Sized>(samples: &[Sample], max_rows: usize, rng: &mut R) -> Vec<Sample> {
    if samples.len() <= max_rows {
        return samples.to_vec();
    }
    let mut idx = sample_indices(rng, samples.len(), max_rows).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// Every metric for a real/synthetic pair. Length statistics use the full
/// corpora; embedding metrics use the subsamples.
pub fn evaluate(real: &[Sample], synthetic: &[Sample], embedder: &dyn Embedder, opts: &EvalOptions) -> Result<MetricsReport> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::domain("both corpora must be non-empty"));
    }
    let key = StreamKey::new(opts.seed, "evaluate", 0, "subsample");
    let real_sub = subsample(real, opts.max_rows, &mut key.at(0, 0).rng());
    let syn_sub = subsample(synthetic, opts.max_rows, &mut key.at(1, 0).rng());
    let texts = |s: &[Sample]| s.iter().map(|x| x.text().to_string()).collect::<Vec<_>>();
    let e_real = embedder.embed_batch(&texts(&real_sub))?;
    let e_syn = embedder.embed_batch(&texts(&syn_sub))?;
    let (precision, recall, f1) = precision_recall_f1(&e_real, &e_syn, opts.k)?;
    let (kl_div, tv_div) = kl_tv_divergence(
        &e_real,
        &e_syn,
        opts.n_clusters,
        &mut key.with_purpose("kmeans").rng(),
    )?;
    Ok(MetricsReport {
        fid: fid(&e_real, &e_syn)?,
        precision,
        recall,
        f1,
        kl_div,
        tv_div,
        length_stats: CorpusLengths {
            real: LengthStats::of(real),
            synthetic: LengthStats::of(synthetic),
        },
    })
}
