//! Run configuration. Serialized as JSON with snake_case keys; unknown keys
//! are rejected.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genapi::PromptTemplate;
use crate::privacy::LogBase;

/// How the next selected set is drawn from the voted pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Top-`n_syn` by noisy vote count, no repeats.
    #[default]
    Rank,
    /// `n_syn` draws with replacement, weighted by normalized votes.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariationMethod {
    Paraphrase,
    #[default]
    FillInBlanks,
}

/// Either a fixed δ or `"auto"` for `1/(n·log n)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DeltaSetting {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for DeltaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DeltaSetting::Auto => s.serialize_str("auto"),
            DeltaSetting::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for DeltaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(DeltaSetting::Fixed(v)),
            Raw::Str(s) if s == "auto" => Ok(DeltaSetting::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "delta must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

/// f64 fields that may hold `+∞`, written as the string `"inf"` in JSON.
pub mod serde_extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => super::parse_extended_f64(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses a float, also accepting `inf`/`infinity`.
pub fn parse_extended_f64(s: &str) -> std::result::Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        other => other
            .parse::<f64>()
            .map_err(|_| format!("not a number: {s:?}")),
    }
}

/// Per-sample target length for variations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthPolicy {
    pub sigma_word: f64,
    pub min_word: usize,
    pub w2t_ratio: f64,
    /// When set, every call uses this budget and no length noise is drawn.
    #[serde(default)]
    pub fixed_max_token: Option<usize>,
}

impl Default for LengthPolicy {
    fn default() -> Self {
        LengthPolicy {
            sigma_word: 60.0,
            min_word: 25,
            w2t_ratio: 5.0,
            fixed_max_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationSpec {
    pub method: VariationMethod,
    /// Fraction of whitespace tokens blanked in fill-in-the-blanks mode.
    pub mask_prob: f64,
    #[serde(default)]
    pub num_shots: usize,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
    #[serde(default)]
    pub tone_pool: Vec<String>,
    #[serde(default = "default_mask_char")]
    pub mask_char: String,
}

fn default_mask_char() -> String {
    "_".to_string()
}

impl Default for VariationSpec {
    fn default() -> Self {
        VariationSpec {
            method: VariationMethod::FillInBlanks,
            mask_prob: 0.5,
            num_shots: 0,
            demonstrations: Vec::new(),
            tone_pool: vec![
                "in a creative way".into(),
                "in a professional style".into(),
                "in a casual tone".into(),
                "in a concise manner".into(),
            ],
            mask_char: default_mask_char(),
        }
    }
}

/// All algorithm hyperparameters for one synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_syn: usize,
    pub big_l: usize,
    #[serde(default)]
    pub k_lookahead: usize,
    pub iterations: u32,
    #[serde(default)]
    pub selection_mode: SelectionMode,
    /// Vote over `S_t` plus all lookahead variations instead of mean embeddings.
    #[serde(default)]
    pub individual_embedding: bool,
    #[serde(with = "serde_extended_f64")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta: DeltaSetting,
    #[serde(default)]
    pub delta_log_base: LogBase,
    #[serde(default)]
    pub sigma_override: Option<f64>,
    pub temperature: f64,
    #[serde(default = "default_random_max_tokens")]
    pub random_max_tokens: usize,
    /// Word target put in random-generation prompts; none by default.
    #[serde(default)]
    pub random_target_words: Option<usize>,
    #[serde(default)]
    pub length_policy: LengthPolicy,
    #[serde(default)]
    pub variation_spec: VariationSpec,
    #[serde(default)]
    pub prompts: PromptTemplate,
    /// Keywords for random generation when no label-specific list exists.
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub label_keywords: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub conditional: bool,
    #[serde(default)]
    pub min_tokens_filter: usize,
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Persist raw (un-noised) vote counts in checkpoints. Leaks private data.
    #[serde(default)]
    pub debug_raw_counts: bool,
}

fn default_random_max_tokens() -> usize {
    128
}

fn default_concurrency() -> usize {
    4
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_syn: 100,
            big_l: 4,
            k_lookahead: 0,
            iterations: 10,
            selection_mode: SelectionMode::Rank,
            individual_embedding: false,
            epsilon: f64::INFINITY,
            delta: DeltaSetting::Auto,
            delta_log_base: LogBase::Natural,
            sigma_override: None,
            temperature: 1.2,
            random_max_tokens: default_random_max_tokens(),
            random_target_words: None,
            length_policy: LengthPolicy::default(),
            variation_spec: VariationSpec::default(),
            prompts: PromptTemplate::default(),
            keywords: Vec::new(),
            label_keywords: BTreeMap::new(),
            conditional: false,
            min_tokens_filter: 0,
            seed: 0,
            concurrency: default_concurrency(),
            debug_raw_counts: false,
        }
    }
}

impl RunConfig {
    /// Collects every validation problem rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_syn == 0 {
            errs.push("n_syn must be positive".to_string());
        }
        if self.big_l == 0 {
            errs.push("big_l must be positive".to_string());
        }
        if self.iterations == 0 {
            errs.push("iterations must be positive".to_string());
        }
        if !(self.epsilon > 0.0) {
            errs.push(format!("epsilon must be positive or \"inf\", got {}", self.epsilon));
        }
        if let DeltaSetting::Fixed(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                errs.push(format!("delta must lie in (0, 1), got {d}"));
            }
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0) || !s.is_finite() {
                errs.push(format!("sigma_override must be a non-negative number, got {s}"));
            }
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.random_max_tokens == 0 {
            errs.push("random_max_tokens must be positive".to_string());
        }
        let lp = &self.length_policy;
        if !(lp.sigma_word >= 0.0) {
            errs.push("length_policy.sigma_word must be non-negative".to_string());
        }
        if lp.min_word == 0 {
            errs.push("length_policy.min_word must be at least 1".to_string());
        }
        if !(lp.w2t_ratio > 0.0) {
            errs.push("length_policy.w2t_ratio must be positive".to_string());
        }
        if lp.fixed_max_token == Some(0) {
            errs.push("length_policy.fixed_max_token must be positive".to_string());
        }
        let vs = &self.variation_spec;
        if !(0.0..=1.0).contains(&vs.mask_prob) {
            errs.push(format!("variation_spec.mask_prob must lie in [0, 1], got {}", vs.mask_prob));
        }
        if vs.num_shots > vs.demonstrations.len() {
            errs.push(format!(
                "variation_spec.num_shots = {} exceeds the {} demonstrations",
                vs.num_shots,
                vs.demonstrations.len()
            ));
        }
        if vs.mask_char.is_empty() {
            errs.push("variation_spec.mask_char must not be empty".to_string());
        }
        if self.concurrency == 0 {
            errs.push("concurrency must be positive".to_string());
        }
        errs.extend(self.prompts.check(vs.method));
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Logs combinations that depart from the two reference settings
    /// (rank/K=0 and probability/K>0/L=1).
    pub fn warn_unusual(&self) {
        match self.selection_mode {
            SelectionMode::Probability if self.k_lookahead == 0 || self.big_l != 1 => warn!(
                "probability selection with K={} L={} (original PE uses K>0, L=1)",
                self.k_lookahead, self.big_l
            ),
            SelectionMode::Rank if self.k_lookahead > 0 => warn!(
                "rank selection with K={} (Aug-PE uses K=0)",
                self.k_lookahead
            ),
            _ => {}
        }
        if self.sigma_override.is_some() && self.epsilon.is_finite() {
            warn!("sigma_override is set; epsilon {} is ignored for noise", self.epsilon);
        }
        if self.debug_raw_counts {
            warn!("debug_raw_counts is on: checkpoints will contain RAW PRIVATE VOTE COUNTS");
        }
    }

    /// Keyword pool for random generation under `label`.
    pub fn keyword_pool(&self, label: Option<&str>) -> &[String] {
        label
            .and_then(|l| self.label_keywords.get(l))
            .map(Vec::as_slice)
            .unwrap_or(&self.keywords)
    }
}
