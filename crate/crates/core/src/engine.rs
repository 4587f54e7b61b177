//! The evolution loop: initial random population, then per iteration
//! voting embeddings, noisy nearest-neighbour histogram, selection, and
//! variation. Conditional runs repeat the loop per label.
//!
//! Run directory layout:
//!
//! ```text
//! {run_dir}/manifest.json
//! {run_dir}/synthetic.jsonl
//! {run_dir}/iter_{t:04}.json              unconditional runs
//! {run_dir}/class_{c:03}/iter_{t:04}.json conditional runs
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{DeltaSetting, RunConfig, SelectionMode};
use crate::embed::{mean_embedding, Embedder};
use crate::error::{Error, Result};
use crate::genapi::{random_api, variation_api, LanguageModel};
use crate::metrics::MetricsReport;
use crate::privacy::{default_delta, PrivacySpec};
use crate::rng::StreamKey;
use crate::select::{expand_population, probability_select_indices, rank_select_indices, variation_rounds};
use crate::types::{read_jsonl, write_jsonl, EmbeddingMatrix, Population, PrivateDataset, Sample};
use crate::vote::{add_noise, nn_histogram, to_probabilities, VoteHistogram};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTPUT_FILE: &str = "synthetic.jsonl";

/// State persisted after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationCheckpoint {
    pub iteration: usize,
    /// The voted population.
    pub population: Vec<Sample>,
    pub noisy_counts: Vec<f64>,
    /// Un-noised counts; only written when `debug_raw_counts` is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_counts: Option<Vec<u64>>,
    pub selected_indices: Vec<usize>,
    #[serde(default)]
    pub metrics_snapshot: Option<MetricsReport>,
    pub rng_state_key: String,
}

impl IterationCheckpoint {
    fn selected(&self) -> Result<Population> {
        if let Some(&bad) = self.selected_indices.iter().find(|&&i| i >= self.population.len()) {
            return Err(Error::domain(format!(
                "checkpoint {} selects index {bad} of a population of {}",
                self.iteration,
                self.population.len()
            )));
        }
        Ok(Population::new(self.population.clone()).select(&self.selected_indices))
    }
}

/// Per-class record in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassManifest {
    pub label: Option<String>,
    pub n_private: usize,
    pub n_syn: usize,
}

/// What a run directory was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub sigma: f64,
    pub effective_sigma: f64,
    #[serde(with = "crate::config::serde_extended_f64")]
    pub epsilon: f64,
    pub delta: f64,
    pub iterations: u32,
    /// Classes are disjoint, so the guarantee above covers the whole corpus.
    pub composition: String,
    pub seed: u64,
    pub n_private: usize,
    pub classes: Vec<ClassManifest>,
    pub llm: String,
    pub embedder: String,
    pub completed: bool,
}

/// Where and how to persist a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
}

/// One iteration as seen from outside.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub iteration: usize,
    pub voted: Population,
    pub noisy_counts: Vec<f64>,
    pub selected: Population,
}

#[derive(Debug, Clone)]
pub struct ClassOutcome {
    pub label: Option<String>,
    pub n_private: usize,
    pub n_syn: usize,
    /// `S_0`; empty when the run resumed past it.
    pub initial: Population,
    /// Iterations executed by this call (resumed ones are not repeated).
    pub trace: Vec<IterationTrace>,
    /// Reads of the private records.
    pub private_reads: usize,
    /// Histograms computed against the private embeddings.
    pub vote_reads: usize,
    pub resumed_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub population: Population,
    pub privacy: PrivacySpec,
    pub classes: Vec<ClassOutcome>,
}

/// Private-corpus embeddings. Every histogram computed against them is
/// counted.
struct PrivateEmbeddings {
    matrix: EmbeddingMatrix,
    votes: AtomicUsize,
}

impl PrivateEmbeddings {
    fn compute(data: &PrivateDataset, embedder: &dyn Embedder) -> Result<Self> {
        let texts: Vec<String> = data.samples().iter().map(|s| s.text().to_string()).collect();
        Ok(PrivateEmbeddings {
            matrix: embedder.embed_batch(&texts)?,
            votes: AtomicUsize::new(0),
        })
    }

    fn vote(&self, e_syn: &EmbeddingMatrix) -> Result<VoteHistogram> {
        self.votes.fetch_add(1, Ordering::SeqCst);
        nn_histogram(e_syn, &self.matrix)
    }
}

/// Noise level and accounting for a run over `n_private` records.
pub fn resolve_privacy(cfg: &RunConfig, n_private: usize) -> Result<PrivacySpec> {
    let noiseless = cfg.sigma_override.is_none() && cfg.epsilon == f64::INFINITY;
    if noiseless && cfg.delta == DeltaSetting::Auto && n_private < 2 {
        // the default δ rule is undefined below two records; with no noise
        // there is no guarantee to state anyway
        return Ok(PrivacySpec {
            epsilon: f64::INFINITY,
            delta: 0.0,
            iterations: cfg.iterations,
            sensitivity: 1.0,
            sigma: 0.0,
        });
    }
    let delta = match cfg.delta {
        DeltaSetting::Fixed(d) => d,
        DeltaSetting::Auto => default_delta(n_private, cfg.delta_log_base)?,
    };
    match cfg.sigma_override {
        Some(sigma) => PrivacySpec::for_sigma(sigma, delta, cfg.iterations),
        None => PrivacySpec::for_epsilon(cfg.epsilon, delta, cfg.iterations),
    }
}

/// Drops samples shorter than `min_tokens` words, keeping order.
pub fn filter_short(population: &Population, min_tokens: usize) -> Population {
    let kept = population.filter(|s| s.word_count() >= min_tokens);
    if kept.is_empty() && !population.is_empty() {
        warn!(
            "all {} samples are shorter than {min_tokens} words; output is empty",
            population.len()
        );
    }
    kept
}

/// Splits `n_syn` over classes in proportion to `counts` by largest
/// remainder. Every class with data gets at least one slot, so the total can
/// exceed `n_syn` when classes outnumber it; empty classes get none.
pub fn allocate(counts: &[usize], n_syn: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let quotas: Vec<f64> = counts
        .iter()
        .map(|&c| n_syn as f64 * c as f64 / total as f64)
        .collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let short = n_syn.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    for (o, &c) in out.iter_mut().zip(counts) {
        if c > 0 && *o == 0 {
            *o = 1;
        }
    }
    out
}

/// Unconditional run, in memory.
pub fn run(
    cfg: &RunConfig,
    private_data: &PrivateDataset,
    llm: &dyn LanguageModel,
    embedder: &dyn Embedder,
) -> Result<Population> {
    let mut cfg = cfg.clone();
    cfg.conditional = false;
    Ok(synthesize(&cfg, private_data, llm, embedder, &RunOptions::default())?.population)
}

/// Per-label run, in memory.
pub fn run_conditional(
    cfg: &RunConfig,
    private_data: &PrivateDataset,
    llm: &dyn LanguageModel,
    embedder: &dyn Embedder,
) -> Result<Population> {
    let mut cfg = cfg.clone();
    cfg.conditional = true;
    Ok(synthesize(&cfg, private_data, llm, embedder, &RunOptions::default())?.population)
}

/// Full run per `cfg.conditional`, persisted when `opts.run_dir` is set.
pub fn synthesize(
    cfg: &RunConfig,
    private_data: &PrivateDataset,
    llm: &dyn LanguageModel,
    embedder: &dyn Embedder,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    cfg.warn_unusual();
    let privacy = resolve_privacy(cfg, private_data.len())?;
    info!(
        "sigma = {} (effective {}), epsilon = {}, delta = {:e}, T = {}",
        privacy.sigma,
        privacy.effective_sigma(),
        privacy.epsilon,
        privacy.delta,
        privacy.iterations
    );

    let plans = plan_classes(cfg, private_data)?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        sigma: privacy.sigma,
        effective_sigma: privacy.effective_sigma(),
        epsilon: privacy.epsilon,
        delta: privacy.delta,
        iterations: cfg.iterations,
        composition: if cfg.conditional {
            "parallel over disjoint label classes, same sigma per class".to_string()
        } else {
            "single class".to_string()
        },
        seed: cfg.seed,
        n_private: private_data.len(),
        classes: plans
            .iter()
            .map(|p| ClassManifest {
                label: p.label.clone(),
                n_private: p.data.len(),
                n_syn: p.n_syn,
            })
            .collect(),
        llm: llm.identifier(),
        embedder: embedder.identifier(),
        completed: false,
    };

    if let Some(dir) = &opts.run_dir {
        if let Some(done) = prepare_run_dir(dir, &manifest, opts.resume)? {
            return Ok(RunOutcome {
                population: done,
                privacy,
                classes: Vec::new(),
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Error::Backend(format!("cannot start worker pool: {e}")))?;
    let mut classes = Vec::with_capacity(plans.len());
    let mut outputs = Vec::with_capacity(plans.len());
    for (c, plan) in plans.iter().enumerate() {
        let ckpt_dir = opts.run_dir.as_ref().map(|d| {
            if cfg.conditional {
                d.join(format!("class_{c:03}"))
            } else {
                d.clone()
            }
        });
        let evo = Evolution {
            cfg,
            n_syn: plan.n_syn,
            label: plan.label.as_deref(),
            scope: plan.scope.clone(),
            sigma: privacy.sigma,
            llm,
            embedder,
            ckpt_dir,
            resume: opts.resume,
        };
        let outcome = pool.install(|| evo.run(&plan.data))?;
        outputs.push(Population::new(outcome.1));
        classes.push(outcome.0);
    }

    let population = filter_short(&Population::concat(outputs), cfg.min_tokens_filter);
    if let Some(dir) = &opts.run_dir {
        write_jsonl(&dir.join(OUTPUT_FILE), population.samples())?;
        manifest.completed = true;
        write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(RunOutcome {
        population,
        privacy,
        classes,
    })
}

struct ClassPlan {
    label: Option<String>,
    scope: String,
    n_syn: usize,
    data: PrivateDataset,
}

fn plan_classes(cfg: &RunConfig, data: &PrivateDataset) -> Result<Vec<ClassPlan>> {
    if !cfg.conditional {
        return Ok(vec![ClassPlan {
            label: None,
            scope: "all".to_string(),
            n_syn: cfg.n_syn,
            data: data.clone(),
        }]);
    }
    if data.label_set().is_empty() {
        return Err(Error::domain("conditional run needs labeled private data"));
    }
    let counts = data.label_counts();
    if counts.iter().sum::<usize>() != data.len() {
        return Err(Error::domain("conditional run needs a label on every private sample"));
    }
    let parts = data.partition();
    for (l, &c) in data.label_set().iter().zip(&counts) {
        if c == 0 {
            warn!("class {l:?} has no private samples; skipped");
        }
    }
    let sizes: Vec<usize> = parts.iter().map(|(_, d)| d.len()).collect();
    let alloc = allocate(&sizes, cfg.n_syn);
    Ok(parts
        .into_iter()
        .zip(alloc)
        .map(|((label, part), n_syn)| ClassPlan {
            scope: format!("class/{label}"),
            label: Some(label),
            n_syn,
            data: part,
        })
        .collect())
}

/// Creates or checks the run directory. Returns the finished output when
/// resuming a completed run.
fn prepare_run_dir(dir: &Path, manifest: &RunManifest, resume: bool) -> Result<Option<Population>> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        if !resume {
            return Err(Error::Config(vec![format!(
                "{} already holds a run; resume it or choose another directory",
                dir.display()
            )]));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let previous: RunManifest = serde_json::from_str(&text)?;
        if previous.config != manifest.config {
            return Err(Error::Config(vec![format!(
                "configuration differs from the one recorded in {}",
                path.display()
            )]));
        }
        if previous.completed {
            info!("run in {} is already complete", dir.display());
            return Ok(Some(Population::new(read_jsonl(&dir.join(OUTPUT_FILE))?)));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json_atomic(&path, manifest)?;
    }
    Ok(None)
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter_{iteration:04}.json"))
}

/// Highest-numbered checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<IterationCheckpoint>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(t) = name
            .to_str()
            .and_then(|n| n.strip_prefix("iter_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| t > *b) {
            best = Some((t, entry.path()));
        }
    }
    match best {
        None => Ok(None),
        Some((_, path)) => {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

/// The loop for one class.
struct Evolution<'a> {
    cfg: &'a RunConfig,
    n_syn: usize,
    label: Option<&'a str>,
    scope: String,
    sigma: f64,
    llm: &'a dyn LanguageModel,
    embedder: &'a dyn Embedder,
    ckpt_dir: Option<PathBuf>,
    resume: bool,
}

impl Evolution<'_> {
    fn key(&self, iteration: usize, purpose: &'static str) -> StreamKey {
        StreamKey::new(self.cfg.seed, &self.scope, iteration, purpose)
    }

    fn run(&self, data: &PrivateDataset) -> Result<(ClassOutcome, Vec<Sample>)> {
        let cfg = self.cfg;
        let big_l = cfg.big_l;
        let iterations = cfg.iterations as usize;
        if let Some(dir) = &self.ckpt_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }

        let resumed = match (&self.ckpt_dir, self.resume) {
            (Some(dir), true) => latest_checkpoint(dir)?,
            _ => None,
        };
        let mut outcome = ClassOutcome {
            label: self.label.map(str::to_string),
            n_private: data.len(),
            n_syn: self.n_syn,
            initial: Population::new(Vec::new()),
            trace: Vec::new(),
            private_reads: 0,
            vote_reads: 0,
            resumed_after: resumed.as_ref().map(|c| c.iteration),
        };

        let (start, mut population) = match resumed {
            Some(ckpt) => {
                let selected = ckpt.selected()?;
                info!("{}: resuming after iteration {}", self.scope, ckpt.iteration);
                if ckpt.iteration + 1 >= iterations {
                    return Ok((outcome, selected.into_samples()));
                }
                (ckpt.iteration + 1, self.next_population(&selected, ckpt.iteration)?)
            }
            None => {
                let s0 = random_api(
                    big_l * self.n_syn,
                    self.label,
                    cfg.keyword_pool(self.label),
                    cfg,
                    self.llm,
                    &self.key(0, "random"),
                )?;
                let s0 = Population::new(s0);
                outcome.initial = s0.clone();
                (0, s0)
            }
        };

        let private = PrivateEmbeddings::compute(data, self.embedder)?;
        let mut last_selected = Population::new(Vec::new());
        for t in start..iterations {
            let (voted, e_syn) = self.voting_embeddings(&population, t)?;
            let hist = private.vote(&e_syn)?;
            let noise_key = self.key(t, "noise");
            let noisy = add_noise(&hist, self.sigma, &mut noise_key.rng())?;
            let noisy_counts = noisy.noisy_counts().unwrap_or_default().to_vec();
            let selected_indices = match cfg.selection_mode {
                SelectionMode::Rank => rank_select_indices(&noisy_counts, self.n_syn)?,
                SelectionMode::Probability => {
                    let probs = to_probabilities(&noisy)?;
                    probability_select_indices(
                        probs.probabilities().unwrap_or_default(),
                        self.n_syn,
                        &mut self.key(t, "select").rng(),
                    )?
                }
            };
            let selected = voted.select(&selected_indices);
            if let Some(dir) = &self.ckpt_dir {
                let ckpt = IterationCheckpoint {
                    iteration: t,
                    population: voted.samples().to_vec(),
                    noisy_counts: noisy_counts.clone(),
                    raw_counts: cfg.debug_raw_counts.then(|| hist.raw_counts().to_vec()),
                    selected_indices,
                    metrics_snapshot: None,
                    rng_state_key: noise_key.encode(),
                };
                write_json_atomic(&checkpoint_path(dir, t), &ckpt)?;
            }
            info!(
                "{}: iteration {}/{} voted {} selected {}",
                self.scope,
                t + 1,
                iterations,
                voted.len(),
                selected.len()
            );
            outcome.trace.push(IterationTrace {
                iteration: t,
                voted,
                noisy_counts,
                selected: selected.clone(),
            });
            if t + 1 < iterations {
                population = self.next_population(&selected, t)?;
            }
            last_selected = selected;
        }
        outcome.private_reads = data.read_count();
        outcome.vote_reads = private.votes.load(Ordering::SeqCst);
        Ok((outcome, last_selected.into_samples()))
    }

    /// The pool that gets voted on and its embeddings.
    fn voting_embeddings(&self, population: &Population, t: usize) -> Result<(Population, EmbeddingMatrix)> {
        let k = self.cfg.k_lookahead;
        if k == 0 {
            let e = self.embedder.embed_batch(&population.texts())?;
            return Ok((population.clone(), e));
        }
        let key = self.key(t, "lookahead");
        let vary = |s: &Sample, i: usize, round: usize| {
            variation_api(s, self.cfg, self.llm, &key.at(i, round)).map(|v| v.with_origin(t))
        };
        let lookahead = Population::new(self.vary_checked(population, &vary, 0..k)?);
        if self.cfg.individual_embedding {
            let pool = Population::concat(vec![population.clone(), lookahead]);
            let e = self.embedder.embed_batch(&pool.texts())?;
            return Ok((pool, e));
        }
        let n = population.len();
        let all = self.embedder.embed_batch(&lookahead.texts())?;
        let per_round: Vec<EmbeddingMatrix> = (0..k)
            .map(|r| all.select_rows(&(r * n..(r + 1) * n).collect::<Vec<_>>()))
            .collect();
        let e = mean_embedding(&per_round, self.embedder.normalizes())?;
        Ok((population.clone(), e))
    }

    /// `S_{t+1}` from the survivors of iteration `t`.
    fn next_population(&self, selected: &Population, t: usize) -> Result<Population> {
        let key = self.key(t, "variation");
        let failures = AtomicUsize::new(0);
        let vary = |s: &Sample, i: usize, round: usize| {
            variation_api(s, self.cfg, self.llm, &key.at(i, round))
                .map(|v| v.with_origin(t + 1))
                .inspect_err(|_| {
                    failures.fetch_add(1, Ordering::Relaxed);
                })
        };
        let big_l = self.cfg.big_l;
        let (next, jobs) = match self.cfg.selection_mode {
            SelectionMode::Rank => (expand_population(selected, vary, big_l)?, selected.len() * (big_l - 1)),
            SelectionMode::Probability => (
                Population::new(variation_rounds(selected, &vary, 0..big_l)),
                selected.len() * big_l,
            ),
        };
        check_failures(failures.load(Ordering::Relaxed), jobs)?;
        Ok(next)
    }

    fn vary_checked<F>(&self, population: &Population, vary: &F, rounds: std::ops::Range<usize>) -> Result<Vec<Sample>>
    where
        F: Fn(&Sample, usize, usize) -> Result<Sample> + Sync,
    {
        let failures = AtomicUsize::new(0);
        let counted = |s: &Sample, i: usize, r: usize| {
            vary(s, i, r).inspect_err(|_| {
                failures.fetch_add(1, Ordering::Relaxed);
            })
        };
        let jobs = population.len() * rounds.len();
        let out = variation_rounds(population, &counted, rounds);
        check_failures(failures.load(Ordering::Relaxed), jobs)?;
        Ok(out)
    }
}

/// Isolated variation failures fall back to the original sample; a round in
/// which every call failed means the backend is down.
fn check_failures(failures: usize, jobs: usize) -> Result<()> {
    if jobs > 0 && failures == jobs {
        Err(Error::Backend(format!("all {jobs} variation calls failed")))
    } else {
        Ok(())
    }
}
