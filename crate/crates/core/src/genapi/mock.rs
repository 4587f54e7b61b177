//! Offline language model over a [`MockUniverse`] vocabulary.
//!
//! Behaviour is a pure function of the prompt, the token budget and the
//! stream key:
//!
//! * The payload is the text after the last `Input:` marker (up to a
//!   following `Output:` line). Blank tokens (all `_`) are filled from the
//!   cluster of the nearest filled neighbour; `round(rate · n)` of the other
//!   tokens are swapped for different tokens, drawn from the same cluster
//!   with probability `within_topic_bias`.
//! * Without a payload the model writes fresh text, on topic `k` when the
//!   prompt names `topicK`, otherwise from the whole vocabulary.
//! * A `with N words` directive fixes the output length; otherwise the
//!   payload length (or `default_length`) is kept. Output never exceeds the
//!   token budget, one token per word.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mockworld::{MockUniverse, UniverseParams};
use crate::rng::StreamRng;

use super::{CompletionRequest, LanguageModel};

pub const PAYLOAD_MARKER: &str = "Input:";
const OUTPUT_MARKER: &str = "\nOutput:";

#[derive(Debug, Clone)]
pub struct MockLlm {
    universe: MockUniverse,
    mutation_rate: f64,
    default_length: usize,
}

impl MockLlm {
    pub fn new(universe: UniverseParams, mutation_rate: f64, default_length: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&mutation_rate) {
            return Err(Error::domain("mutation_rate must lie in [0, 1]"));
        }
        Ok(MockLlm {
            universe: MockUniverse::new(universe)?,
            mutation_rate,
            default_length: default_length.max(1),
        })
    }

    pub fn universe(&self) -> &MockUniverse {
        &self.universe
    }

    fn generate(&self, prompt: &str, max_tokens: usize, rng: &mut StreamRng) -> String {
        let (instruction, payload) = split_payload(prompt);
        let target = parse_word_directive(instruction);
        let u = &self.universe;
        let mut tokens: Vec<String> = match payload {
            Some(p) => self.vary(p, rng),
            None => {
                let topic = instruction
                    .split(|c: char| !c.is_ascii_alphanumeric())
                    .find_map(MockUniverse::topic_of_name)
                    .filter(|&k| k < u.n_topics());
                let len = target.unwrap_or(self.default_length);
                (0..len)
                    .map(|_| match topic {
                        Some(k) => u.draw_topical(k, rng).to_string(),
                        None => u.draw_any(rng).to_string(),
                    })
                    .collect()
            }
        };
        if let Some(n) = target {
            tokens.truncate(n);
            while tokens.len() < n {
                let next = if tokens.is_empty() {
                    u.draw_any(rng).to_string()
                } else {
                    let anchor = &tokens[rng.random_range(0..tokens.len())];
                    self.neighbour_of(anchor, rng)
                };
                tokens.push(next);
            }
        }
        tokens.truncate(max_tokens);
        tokens.join(" ")
    }

    fn neighbour_of(&self, token: &str, rng: &mut StreamRng) -> String {
        match self.universe.cluster_of(token) {
            Some(k) => self.universe.draw_topical(k, rng).to_string(),
            None => self.universe.draw_any(rng).to_string(),
        }
    }

    fn vary(&self, payload: &str, rng: &mut StreamRng) -> Vec<String> {
        let mut tokens: Vec<String> = payload.split_whitespace().map(str::to_string).collect();
        let is_blank = |t: &str| t.chars().all(|c| c == '_');
        let blanks: Vec<usize> = (0..tokens.len()).filter(|&i| is_blank(&tokens[i])).collect();
        let filled: Vec<usize> = (0..tokens.len()).filter(|&i| !is_blank(&tokens[i])).collect();

        let n_mut = round_half_up(self.mutation_rate * filled.len() as f64).min(filled.len());
        let chosen: Vec<usize> = sample_indices(rng, filled.len(), n_mut)
            .into_iter()
            .map(|j| filled[j])
            .collect();
        for i in chosen {
            let old = tokens[i].clone();
            let mut new = self.neighbour_of(&old, rng);
            let mut tries = 0;
            while new == old && tries < 32 {
                new = self.neighbour_of(&old, rng);
                tries += 1;
            }
            if new == old {
                new = format!("{old}x");
            }
            tokens[i] = new;
        }
        for &i in &blanks {
            let anchor = (1..tokens.len()).find_map(|d| {
                let left = i.checked_sub(d).filter(|&j| !is_blank(&tokens[j]));
                let right = Some(i + d).filter(|&j| j < tokens.len() && !is_blank(&tokens[j]));
                left.or(right)
            });
            tokens[i] = match anchor {
                Some(j) => {
                    let a = tokens[j].clone();
                    self.neighbour_of(&a, rng)
                }
                None => self.universe.draw_any(rng).to_string(),
            };
        }
        tokens
    }
}

impl LanguageModel for MockLlm {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String> {
        let mut rng = req.rng_key.rng();
        Ok(self.generate(req.prompt, req.max_tokens, &mut rng))
    }

    fn identifier(&self) -> String {
        format!(
            "mock(rate={}, vocab={}, topics={}, seed={})",
            self.mutation_rate,
            self.universe.params().vocab_size,
            self.universe.n_topics(),
            self.universe.params().seed
        )
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// (instruction, payload) split at the last payload marker.
fn split_payload(prompt: &str) -> (&str, Option<&str>) {
    match prompt.rfind(PAYLOAD_MARKER) {
        Some(pos) => {
            let rest = &prompt[pos + PAYLOAD_MARKER.len()..];
            let payload = rest.find(OUTPUT_MARKER).map_or(rest, |end| &rest[..end]);
            (&prompt[..pos], Some(payload))
        }
        None => (prompt, None),
    }
}

/// The `N` of the last "with N words" in `text`.
pub fn parse_word_directive(text: &str) -> Option<usize> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words.windows(3).rev().find_map(|w| {
        let unit = w[2].trim_end_matches(|c: char| c.is_ascii_punctuation());
        if w[0].eq_ignore_ascii_case("with") && unit.eq_ignore_ascii_case("words") {
            w[1].parse().ok()
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn llm(rate: f64) -> MockLlm {
        MockLlm::new(UniverseParams::default(), rate, 20).unwrap()
    }

    fn ask(m: &MockLlm, prompt: &str, max_tokens: usize, idx: usize) -> String {
        let key = StreamKey::new(1, "t", 0, "llm").at(idx, 0);
        m.complete(&CompletionRequest {
            prompt,
            temperature: 1.0,
            max_tokens,
            rng_key: &key,
        })
        .unwrap()
    }

    fn payload(m: &MockLlm, n: usize) -> String {
        let mut rng = StreamKey::new(0, "p", 0, "x").rng();
        m.universe().topical_text(0, n, &mut rng)
    }

    #[test]
    fn directive_parsing() {
        assert_eq!(parse_word_directive("rephrase with 42 words:"), Some(42));
        assert_eq!(parse_word_directive("With 7 Words."), Some(7));
        assert_eq!(parse_word_directive("with many words"), None);
        assert_eq!(parse_word_directive("no directive"), None);
    }

    #[test]
    fn mutation_count_is_exact() {
        let m = llm(0.3);
        let p = payload(&m, 10);
        for idx in 0..20 {
            let out = ask(&m, &format!("Rephrase:\nInput: {p}\nOutput:"), 100, idx);
            let diff = out
                .split_whitespace()
                .zip(p.split_whitespace())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(diff, 3, "{out}");
        }
    }

    #[test]
    fn zero_rate_is_identity_and_deterministic() {
        let m = llm(0.0);
        let p = payload(&m, 12);
        let prompt = format!("Rephrase:\nInput: {p}\nOutput:");
        assert_eq!(ask(&m, &prompt, 100, 0), p);
        let m = llm(0.5);
        assert_eq!(ask(&m, &prompt, 100, 3), ask(&m, &prompt, 100, 3));
    }

    #[test]
    fn honours_word_targets_and_budget() {
        let m = llm(0.2);
        let p = payload(&m, 10);
        let long = ask(&m, &format!("Rephrase with 25 words:\nInput: {p}\nOutput:"), 100, 0);
        assert_eq!(long.split_whitespace().count(), 25);
        let short = ask(&m, &format!("Rephrase with 4 words:\nInput: {p}\nOutput:"), 100, 0);
        assert_eq!(short.split_whitespace().count(), 4);
        let capped = ask(&m, &format!("Rephrase with 25 words:\nInput: {p}\nOutput:"), 12, 0);
        assert_eq!(capped.split_whitespace().count(), 12);
    }

    #[test]
    fn fills_blanks_and_uses_last_payload() {
        let m = llm(0.0);
        let prompt = "Input: a b\nOutput: c d\n\nFill in:\nInput: tok0001 _ __ tok0002\nOutput:";
        let out = ask(&m, prompt, 100, 0);
        let toks: Vec<&str> = out.split_whitespace().collect();
        assert_eq!(toks.len(), 4);
        assert_eq!(toks[0], "tok0001");
        assert_eq!(toks[3], "tok0002");
        assert!(!out.contains('_'));
    }

    #[test]
    fn random_mode_follows_topic_keyword() {
        let m = llm(0.0);
        let out = ask(&m, "Please write a short text about topic2 with 200 words.", 500, 0);
        let on = out
            .split_whitespace()
            .filter(|t| m.universe().cluster_of(t) == Some(2))
            .count();
        assert!(on as f64 / 200.0 > 0.7, "{on}");
        let plain = ask(&m, "Please write a short text.", 500, 0);
        assert_eq!(plain.split_whitespace().count(), 20);
    }
}
