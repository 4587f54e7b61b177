//! Model access: random generation, variation, prompt building, masking,
//! adaptive length targets, and the backends behind them.

mod http;
pub mod mock;
mod prompt;

use std::collections::BTreeMap;
use std::time::Duration;

use rand::seq::index::sample as sample_indices;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use http::{ChatMessage, ChatRequest, OpenAiCompatible};
pub use mock::MockLlm;
pub use prompt::{placeholders, render, PromptTemplate};

use crate::config::{LengthPolicy, RunConfig, VariationMethod, VariationSpec};
use crate::embed::API_KEY_ENV;
use crate::error::{Error, Result};
use crate::mockworld::UniverseParams;
use crate::retry::RetryPolicy;
use crate::rng::StreamKey;
use crate::types::{word_count, Sample};

/// One completion call.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_tokens: usize,
    pub rng_key: &'a StreamKey,
}

/// A text-completion backend. Implementations must be safe to call from
/// many threads at once.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String>;
    fn identifier(&self) -> String;
}

/// Serializable backend description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmBackend {
    OpenaiCompatibleHttp {
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
        #[serde(default)]
        extra_headers: BTreeMap<String, String>,
    },
    Mock {
        #[serde(default = "default_mutation")]
        mutation_rate: f64,
        #[serde(default = "default_mock_length")]
        default_length: usize,
        #[serde(default)]
        universe: UniverseParams,
    },
}

fn default_timeout() -> u64 {
    120
}
fn default_mutation() -> f64 {
    0.1
}
fn default_mock_length() -> usize {
    30
}

impl Default for LlmBackend {
    fn default() -> Self {
        LlmBackend::Mock {
            mutation_rate: default_mutation(),
            default_length: default_mock_length(),
            universe: UniverseParams::default(),
        }
    }
}

impl LlmBackend {
    pub fn build(&self) -> Result<Box<dyn LanguageModel>> {
        match self {
            LlmBackend::OpenaiCompatibleHttp {
                endpoint,
                model,
                timeout_secs,
                retry,
                extra_headers,
            } => Ok(Box::new(OpenAiCompatible::new(
                endpoint,
                model,
                Duration::from_secs(*timeout_secs),
                retry.clone(),
                std::env::var(API_KEY_ENV).ok(),
                extra_headers.clone(),
            )?)),
            LlmBackend::Mock {
                mutation_rate,
                default_length,
                universe,
            } => Ok(Box::new(MockLlm::new(
                universe.clone(),
                *mutation_rate,
                *default_length,
            )?)),
        }
    }
}

/// One completion from `backend`.
pub fn chat_complete(
    backend: &dyn LanguageModel,
    prompt: &str,
    temperature: f64,
    max_tokens: usize,
    rng_key: &StreamKey,
) -> Result<String> {
    backend.complete(&CompletionRequest {
        prompt,
        temperature,
        max_tokens,
        rng_key,
    })
}

/// Replaces `round(p · n)` uniformly chosen whitespace tokens with
/// `mask_char`; tokens are re-joined with single spaces.
pub fn mask_tokens<R: Rng + ?Sized>(text: &str, p: f64, mask_char: &str, rng: &mut R) -> String {
    let mut tokens: Vec<&str> = text.split_whitespace().collect();
    let k = mock::round_half_up(p.clamp(0.0, 1.0) * tokens.len() as f64).min(tokens.len());
    for i in sample_indices(rng, tokens.len(), k) {
        tokens[i] = mask_char;
    }
    tokens.join(" ")
}

/// `(targeted_word, max_token)` for a variation of a text with
/// `original_word` words.
pub fn target_length<R: Rng + ?Sized>(original_word: usize, policy: &LengthPolicy, rng: &mut R) -> (usize, usize) {
    if let Some(fixed) = policy.fixed_max_token {
        return (original_word, fixed);
    }
    let noise = if policy.sigma_word > 0.0 {
        Normal::new(0.0, policy.sigma_word)
            .map(|n| n.sample(rng))
            .unwrap_or(0.0)
    } else {
        0.0
    };
    let raw = (original_word as f64 + noise).round();
    let targeted = if raw < policy.min_word as f64 {
        policy.min_word
    } else {
        raw as usize
    };
    let max_token = (targeted as f64 * policy.w2t_ratio).floor() as usize;
    (targeted, max_token.max(1))
}

/// Prompt for one random-generation call.
pub fn random_prompt(cfg: &RunConfig, label: Option<&str>, keyword: Option<&str>) -> String {
    let words = cfg.random_target_words.map(|w| w.to_string());
    render(
        &cfg.prompts.random_template,
        &[
            ("label", label),
            ("keyword", keyword),
            ("word_count", words.as_deref()),
        ],
    )
}

/// `n` fresh samples. Slot `i` draws its keyword and completion from
/// streams `key.at(i, 0)`; calls run on the current rayon pool.
pub fn random_api(
    n: usize,
    label: Option<&str>,
    keyword_pool: &[String],
    cfg: &RunConfig,
    backend: &dyn LanguageModel,
    key: &StreamKey,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::domain("random_api needs n >= 1"));
    }
    let results: Vec<Result<Sample>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let slot = key.at(i, 0);
            let keyword = keyword_pool.choose(&mut slot.rng()).map(String::as_str);
            let prompt = random_prompt(cfg, label, keyword);
            let text = chat_complete(
                backend,
                &prompt,
                cfg.temperature,
                cfg.random_max_tokens,
                &slot.with_purpose("random_llm"),
            )?;
            if word_count(&text) == 0 {
                return Err(Error::Backend("empty completion".into()));
            }
            Ok(Sample::new(text, label.map(str::to_string)))
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut failed = Vec::new();
    let mut message = String::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => out.push(s),
            Err(e) => {
                failed.push(i);
                message = e.to_string();
            }
        }
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(Error::Generation {
            slots: failed,
            message,
        })
    }
}

/// A built variation prompt and its token budget.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationPrompt {
    pub prompt: String,
    pub max_tokens: usize,
    pub targeted_word: Option<usize>,
}

/// Builds the variation prompt for `sample` from stream `rng`.
pub fn variation_prompt<R: Rng + ?Sized>(sample: &Sample, cfg: &RunConfig, rng: &mut R) -> VariationPrompt {
    let spec: &VariationSpec = &cfg.variation_spec;
    let mut prefix = String::new();
    for demo in spec.demonstrations.iter().take(spec.num_shots) {
        prefix.push_str(&render(
            &cfg.prompts.demonstration_template,
            &[("input", Some(&demo.input)), ("output", Some(&demo.output))],
        ));
    }
    let tone = spec.tone_pool.choose(rng).map(String::as_str);
    let (targeted, max_tokens) = target_length(sample.word_count(), &cfg.length_policy, rng);
    let adaptive = cfg.length_policy.fixed_max_token.is_none();
    let words = adaptive.then(|| targeted.to_string());
    let body = match spec.method {
        VariationMethod::Paraphrase => render(
            &cfg.prompts.paraphrase_template,
            &[
                ("input", Some(sample.text())),
                ("tone", tone),
                ("word_count", words.as_deref()),
            ],
        ),
        VariationMethod::FillInBlanks => {
            let masked = mask_tokens(sample.text(), spec.mask_prob, &spec.mask_char, rng);
            render(
                &cfg.prompts.fill_template,
                &[
                    ("masked_input", Some(&masked)),
                    ("tone", tone),
                    ("word_count", words.as_deref()),
                ],
            )
        }
    };
    VariationPrompt {
        prompt: prefix + &body,
        max_tokens,
        targeted_word: adaptive.then_some(targeted),
    }
}

/// One variation of `sample`. Prompt randomness comes from `key`; the
/// completion from `key` with purpose `variation_llm`. Empty completions are
/// failures.
pub fn variation_api(
    sample: &Sample,
    cfg: &RunConfig,
    backend: &dyn LanguageModel,
    key: &StreamKey,
) -> Result<Sample> {
    let vp = variation_prompt(sample, cfg, &mut key.rng());
    let text = chat_complete(
        backend,
        &vp.prompt,
        cfg.temperature,
        vp.max_tokens,
        &key.with_purpose("variation_llm"),
    )?;
    if word_count(&text) == 0 {
        return Err(Error::Backend("empty completion".into()));
    }
    Ok(sample.with_text(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Records prompts and echoes a fixed reply.
    struct Recorder {
        prompts: Mutex<Vec<String>>,
        reply: String,
    }

    impl Recorder {
        fn new(reply: &str) -> Self {
            Recorder {
                prompts: Mutex::new(Vec::new()),
                reply: reply.to_string(),
            }
        }
    }

    impl LanguageModel for Recorder {
        fn complete(&self, req: &CompletionRequest<'_>) -> Result<String> {
            self.prompts.lock().unwrap().push(req.prompt.to_string());
            Ok(self.reply.clone())
        }
        fn identifier(&self) -> String {
            "recorder".into()
        }
    }

    fn key() -> StreamKey {
        StreamKey::new(11, "t", 0, "gen")
    }

    #[test]
    fn mask_examples() {
        let mut rng = key().rng();
        assert_eq!(mask_tokens("a  b c", 0.0, "_", &mut rng), "a b c");
        assert_eq!(mask_tokens("a b c", 1.0, "_", &mut rng), "_ _ _");
        let half = mask_tokens("w x y z", 0.5, "_", &mut rng);
        assert_eq!(half.split(' ').filter(|t| *t == "_").count(), 2);
        assert_eq!(mask_tokens("", 0.5, "_", &mut rng), "");
        // round half up: 0.25 * 6 = 1.5 -> 2
        let m = mask_tokens("a b c d e f", 0.25, "#", &mut rng);
        assert_eq!(m.split(' ').filter(|t| *t == "#").count(), 2);
    }

    #[test]
    fn mask_keeps_unmasked_tokens_in_order() {
        for seed in 0..50u64 {
            let text = "one two three four five six seven";
            let mut rng = StreamKey::new(seed, "m", 0, "mask").rng();
            let out = mask_tokens(text, 0.4, "_", &mut rng);
            for (a, b) in out.split(' ').zip(text.split(' ')) {
                assert!(a == "_" || a == b);
            }
        }
    }

    #[test]
    fn target_length_examples() {
        let mut rng = key().rng();
        let p = LengthPolicy {
            sigma_word: 0.0,
            min_word: 25,
            w2t_ratio: 1.2,
            fixed_max_token: None,
        };
        assert_eq!(target_length(30, &p, &mut rng), (30, 36));
        assert_eq!(target_length(10, &p, &mut rng), (25, 30));
        let fixed = LengthPolicy {
            fixed_max_token: Some(64),
            ..p.clone()
        };
        assert_eq!(target_length(10, &fixed, &mut rng), (10, 64));
    }

    #[test]
    fn target_length_distribution() {
        let p = LengthPolicy {
            sigma_word: 60.0,
            min_word: 25,
            w2t_ratio: 1.2,
            fixed_max_token: None,
        };
        let mut rng = key().rng();
        let draws: Vec<(usize, usize)> = (0..10_000).map(|_| target_length(100, &p, &mut rng)).collect();
        assert!(draws.iter().all(|&(w, t)| w >= 25 && t >= 30));
        let mean = draws.iter().map(|d| d.0 as f64).sum::<f64>() / 1e4;
        assert!((mean - 100.0).abs() <= 3.0, "{mean}");
    }

    #[test]
    fn random_prompts_carry_one_keyword() {
        let cfg = RunConfig::default();
        let rec = Recorder::new("some text");
        let pool = vec!["Steakhouse".to_string(), "Bistros".to_string()];
        let out = random_api(3, Some("restaurant"), &pool, &cfg, &rec, &key()).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|s| s.label() == Some("restaurant")));
        let prompts = rec.prompts.lock().unwrap();
        assert_eq!(prompts.len(), 3);
        for p in prompts.iter() {
            let hits = pool.iter().filter(|k| p.contains(k.as_str())).count();
            assert_eq!(hits, 1, "{p}");
        }
    }

    #[test]
    fn random_api_is_deterministic_with_mock() {
        let cfg = RunConfig::default();
        let llm = LlmBackend::default().build().unwrap();
        let a = random_api(3, None, &[], &cfg, llm.as_ref(), &key()).unwrap();
        let b = random_api(3, None, &[], &cfg, llm.as_ref(), &key()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unconditional_random_prompt_has_no_residue() {
        let cfg = RunConfig::default();
        let p = random_prompt(&cfg, None, None);
        assert!(!p.contains('{') && !p.contains('['), "{p}");
    }

    #[test]
    fn random_api_reports_failed_slots() {
        struct Empty;
        impl LanguageModel for Empty {
            fn complete(&self, _: &CompletionRequest<'_>) -> Result<String> {
                Ok("   ".into())
            }
            fn identifier(&self) -> String {
                "empty".into()
            }
        }
        match random_api(2, None, &[], &RunConfig::default(), &Empty, &key()) {
            Err(Error::Generation { slots, .. }) => assert_eq!(slots, vec![0, 1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fill_prompt_masks_half_of_ten_tokens() {
        let mut cfg = RunConfig::default();
        cfg.variation_spec.method = VariationMethod::FillInBlanks;
        cfg.variation_spec.mask_prob = 0.5;
        let s = Sample::new("a b c d e f g h i j", None);
        let vp = variation_prompt(&s, &cfg, &mut key().rng());
        let payload = vp.prompt.rsplit("Input:").next().unwrap();
        assert_eq!(payload.split_whitespace().filter(|t| *t == "_").count(), 5);
    }

    #[test]
    fn paraphrase_prompt_shape() {
        let mut cfg = RunConfig::default();
        cfg.variation_spec.method = VariationMethod::Paraphrase;
        cfg.variation_spec.tone_pool = vec!["in a creative way".into()];
        cfg.variation_spec.num_shots = 1;
        cfg.variation_spec.demonstrations = vec![crate::config::Demonstration {
            input: "demo in".into(),
            output: "demo out".into(),
        }];
        cfg.length_policy.sigma_word = 0.0;
        cfg.length_policy.min_word = 1;
        cfg.length_policy.w2t_ratio = 1.5;
        let s = Sample::new("the food was great", None);
        let vp = variation_prompt(&s, &cfg, &mut key().rng());
        assert!(vp.prompt.starts_with("Input: demo in\nOutput: demo out\n\n"));
        assert!(vp.prompt.contains("Please rephrase the below sentences in a creative way with 4 words:"));
        assert!(vp.prompt.ends_with("Input: the food was great\nOutput:"));
        assert_eq!(vp.max_tokens, 6);

        cfg.variation_spec.tone_pool.clear();
        cfg.length_policy.fixed_max_token = Some(64);
        let vp = variation_prompt(&s, &cfg, &mut key().rng());
        assert!(vp.prompt.contains("Please rephrase the below sentences:\n"), "{}", vp.prompt);
        assert_eq!(vp.max_tokens, 64);
    }

    #[test]
    fn variation_with_identity_mock_and_word_targets() {
        let mut cfg = RunConfig::default();
        cfg.variation_spec.method = VariationMethod::Paraphrase;
        cfg.length_policy.fixed_max_token = Some(100);
        let llm = LlmBackend::Mock {
            mutation_rate: 0.0,
            default_length: 10,
            universe: UniverseParams::default(),
        }
        .build()
        .unwrap();
        let s = Sample::new("tok0001 tok0002 tok0003", Some("x".into()));
        let out = variation_api(&s, &cfg, llm.as_ref(), &key()).unwrap();
        assert_eq!(out.text(), s.text());
        assert_eq!(out.label(), Some("x"));

        cfg.length_policy = LengthPolicy {
            sigma_word: 10.0,
            min_word: 5,
            w2t_ratio: 1.2,
            fixed_max_token: None,
        };
        for i in 0..20 {
            let k = key().at(i, 1);
            let vp = variation_prompt(&s, &cfg, &mut k.rng());
            let out = variation_api(&s, &cfg, llm.as_ref(), &k).unwrap();
            assert_eq!(Some(out.word_count()), vp.targeted_word);
        }
    }
}
