//! Run configuration files.
//!
//! A file has a `run` section (the algorithm hyperparameters) and optional
//! `llm` and `embedder` sections; both default to the offline mocks. Unknown
//! keys are rejected everywhere. Secrets never live here: the API key comes
//! from `AUGPE_API_KEY` only.

use std::fs;
use std::path::Path;

use augpe::config::RunConfig;
use augpe::embed::EmbeddingProvider;
use augpe::genapi::LlmBackend;
use augpe::{Error, Result};
use serde::{Deserialize, Serialize};

/// Overrides the chat endpoint of an HTTP backend.
pub const API_BASE_ENV: &str = "AUGPE_API_BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub run: RunConfig,
    #[serde(default)]
    pub llm: LlmBackend,
    #[serde(default)]
    pub embedder: EmbeddingProvider,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut settings: Settings = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        settings.run.validate()?;
        settings.apply_env(std::env::var(API_BASE_ENV).ok());
        Ok(settings)
    }

    fn apply_env(&mut self, api_base: Option<String>) {
        if let (Some(base), LlmBackend::OpenaiCompatibleHttp { endpoint, .. }) = (api_base, &mut self.llm) {
            log::info!("{API_BASE_ENV} overrides the endpoint {endpoint} with {base}");
            *endpoint = base;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"run": {"n_syn": 4, "big_l": 2, "iterations": 2, "epsilon": "inf",
        "temperature": 1.0, "seed": 1}}"#;

    #[test]
    fn sections_default_to_mocks() {
        let s: Settings = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(s.llm, LlmBackend::default());
        assert_eq!(s.embedder, EmbeddingProvider::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("\"seed\"", "\"sede\"");
        assert!(serde_json::from_str::<Settings>(&typo).is_err());
        let extra = MINIMAL.replacen('{', r#"{"api_key": "x", "#, 1);
        assert!(serde_json::from_str::<Settings>(&extra).is_err());
    }

    #[test]
    fn api_base_only_touches_http_backends() {
        let mut s: Settings = serde_json::from_str(MINIMAL).unwrap();
        s.apply_env(Some("http://elsewhere".into()));
        assert_eq!(s.llm, LlmBackend::default());

        s.llm = LlmBackend::OpenaiCompatibleHttp {
            endpoint: "https://api.example.com/v1".into(),
            model: "m".into(),
            timeout_secs: 10,
            retry: Default::default(),
            extra_headers: Default::default(),
        };
        s.apply_env(Some("http://localhost:9000/v1".into()));
        match &s.llm {
            LlmBackend::OpenaiCompatibleHttp { endpoint, .. } => assert_eq!(endpoint, "http://localhost:9000/v1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_config_round_trips() {
        let s: Settings = serde_json::from_str(MINIMAL).unwrap();
        let text = serde_json::to_string(&s.run).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s.run);
        back.validate().unwrap();
    }
}
