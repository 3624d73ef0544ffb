//! Run configuration: TOML file, environment, then flags, in increasing
//! precedence. `dump-config` prints the effective result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rescore::labeler::ScoreMode;
use rescore::orchestrator::ReformulationMode;
use rescore::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: String,
    pub qa_train: String,
    pub qa_dev: String,
    pub qa_test: String,
    pub embeddings: String,
    /// Optional prompt-template override directory.
    pub templates: String,
    pub checkpoints: String,
    pub traces: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// "http" or "scripted".
    pub backend: String,
    pub lm_url: String,
    pub lm_model: String,
    pub lm_token: String,
    /// Program file for the scripted backend.
    pub program: String,
    pub in_flight: usize,
    pub retries: usize,
    pub timeout_secs: u64,
    pub max_tokens: usize,
    pub gen_temperature: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: "http".into(),
            lm_url: String::new(),
            lm_model: String::new(),
            lm_token: String::new(),
            program: String::new(),
            in_flight: 8,
            retries: 3,
            timeout_secs: 60,
            max_tokens: 64,
            gen_temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    /// "http", "lookup", or "hashing".
    pub kind: String,
    pub embed_url: String,
    /// Embedding store whose row ids are query strings (lookup kind).
    pub path: String,
    /// Vector dimension for the http and hashing kinds.
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: "http".into(),
            embed_url: String::new(),
            path: String::new(),
            dim: 0,
            hash_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub reformulation: ReformulationMode,
    pub score_mode: ScoreMode,
    pub length_normalize: bool,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            reformulation: ReformulationMode::ThoughtConcat,
            score_mode: ScoreMode::JointQuestionAnswer,
            length_normalize: false,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub gateway: GatewayConfig,
    pub embedder: EmbedderConfig,
    pub run: RunSection,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&raw)
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        Ok(config)
    }

    /// Environment variables fill gateway/embedder endpoints when set.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("RESCORE_LM_URL") {
            self.gateway.lm_url = v;
        }
        if let Ok(v) = std::env::var("RESCORE_LM_MODEL") {
            self.gateway.lm_model = v;
        }
        if let Ok(v) = std::env::var("RESCORE_LM_TOKEN") {
            self.gateway.lm_token = v;
        }
        if let Ok(v) = std::env::var("RESCORE_EMBED_URL") {
            self.embedder.embed_url = v;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolve a possibly relative path against the config file location.
    pub fn resolve(&self, base: Option<&Path>, raw: &str) -> PathBuf {
        let p = PathBuf::from(raw);
        if p.is_absolute() {
            return p;
        }
        match base {
            Some(dir) => dir.join(p),
            None => p,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn partial_file_keeps_defaults_elsewhere() {
        let text = "[trainer]\ntop_m = 64\n";
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.trainer.top_m, 64);
        assert_eq!(config.trainer.top_k, 8);
        assert_eq!(config.gateway.in_flight, 8);
    }
}
