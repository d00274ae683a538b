use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use decitool::backends::{HttpChatBackend, HttpChatConfig, ModelBackend, Script, ScriptedBackend};
use decitool::datagen::{KindCounts, Proportions};
use decitool::embedding::{CachedEmbedder, EmbeddingProvider, HashEmbedder, RemoteEmbedder, DEFAULT_DIM};
use decitool::eval::{CorrectnessPolicy, DEFAULT_TRIALS};
use decitool::sampling::{MixtureWeights, SamplerConfig, Strategy, DEFAULT_K};

/// Run configuration. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub paths: Paths,
    pub sampler: SamplerSection,
    pub embedding: EmbeddingSection,
    pub clustering: ClusteringSection,
    pub backend: Option<BackendSection>,
    pub generator: Option<BackendSection>,
    pub checker: Option<BackendSection>,
    pub runtime: RuntimeSection,
    pub build: BuildSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Full tool pool, input to `cluster` and `split-pool`.
    pub pool: Option<PathBuf>,
    pub train_pool: Option<PathBuf>,
    pub test_pool: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    /// Dataset directory holding `{train,valid,test}.jsonl`.
    pub dataset: Option<PathBuf>,
    pub sft: Option<PathBuf>,
    pub executor: Option<PathBuf>,
    /// Runtime prompt template directory.
    pub templates: Option<PathBuf>,
    /// Generator/checker prompt template directory.
    pub datagen_templates: Option<PathBuf>,
    pub nosearch_queries: Option<PathBuf>,
    /// Pre-generated pairs (`{tool_name: [pair, ...]}`); skips generation.
    pub pairs: Option<PathBuf>,
    pub test_pairs: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub k: usize,
    pub mode: Strategy,
    /// Weights in the order random, intra-class, inter-class.
    pub mixture: [u32; 3],
}

impl Default for SamplerSection {
    fn default() -> Self {
        let w = MixtureWeights::default();
        Self {
            k: DEFAULT_K,
            mode: Strategy::Mixture,
            mixture: [w.random, w.intra, w.inter],
        }
    }
}

impl SamplerSection {
    pub fn to_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            k: self.k,
            mode: self.mode,
            mixture: MixtureWeights::new(self.mixture[0], self.mixture[1], self.mixture[2]),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Hash,
            dim: DEFAULT_DIM,
            endpoint: None,
            timeout_secs: 30,
        }
    }
}

impl EmbeddingSection {
    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        if self.dim == 0 {
            bail!("embedding.dim must be positive");
        }
        Ok(match self.provider {
            EmbeddingKind::Hash => Box::new(CachedEmbedder::new(HashEmbedder::new(self.dim))),
            EmbeddingKind::Remote => {
                let endpoint = self.endpoint.clone().context("embedding.endpoint is required for the remote provider")?;
                Box::new(CachedEmbedder::new(RemoteEmbedder::new(
                    endpoint,
                    self.dim,
                    Duration::from_secs(self.timeout_secs),
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    pub m: usize,
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        Self {
            m: decitool::clustering::DEFAULT_CLUSTERS,
            n_init: decitool::clustering::DEFAULT_N_INIT,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Script file for the scripted backend.
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_true")]
    pub supports_system_prompt: bool,
}

fn default_timeout() -> u64 {
    60
}

fn default_true() -> bool {
    true
}

impl BackendSection {
    pub fn build(&self, base: &Path) -> Result<Box<dyn ModelBackend>> {
        match self.kind {
            BackendKind::Scripted => {
                let path = resolve(base, self.script.as_ref().context("scripted backend needs `script`")?);
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let script: Script =
                    serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?;
                Ok(Box::new(ScriptedBackend::from_script(script)))
            }
            BackendKind::Http => {
                let endpoint = self.endpoint.clone().context("http backend needs `endpoint`")?;
                let model = self.model.clone().context("http backend needs `model`")?;
                let mut cfg = HttpChatConfig::new(endpoint, model);
                cfg.timeout = Duration::from_secs(self.timeout_secs);
                cfg.supports_system_prompt = self.supports_system_prompt;
                Ok(Box::new(HttpChatBackend::new(cfg)))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub max_reprompts: u32,
    pub max_rounds: u32,
    pub include_signature: bool,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            max_reprompts: 2,
            max_rounds: 1,
            include_signature: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub pairs_per_tool: usize,
    pub call: f64,
    pub nocall: f64,
    pub valid_fraction: f64,
    pub valid_quota: Option<KindCounts>,
    /// Training tools kept by `split-pool`.
    pub n_train: Option<usize>,
}

impl Default for BuildSection {
    fn default() -> Self {
        let p = Proportions::default();
        Self {
            pairs_per_tool: decitool::datagen::DEFAULT_PAIRS_PER_TOOL,
            call: p.call,
            nocall: p.nocall,
            valid_fraction: 0.1,
            valid_quota: None,
            n_train: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    pub policy: CorrectnessPolicy,
    /// Which dataset split to evaluate.
    pub split: String,
    pub resample: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            policy: CorrectnessPolicy::default(),
            split: "test".into(),
            resample: true,
        }
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    /// Loads `path` and rebases its relative paths onto the file's directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampler.k == 0 {
            bail!("sampler.k must be at least 1");
        }
        if self.eval.trials == 0 {
            bail!("eval.trials must be at least 1");
        }
        if self.clustering.m == 0 {
            bail!("clustering.m must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let cfg: Config = toml::from_str(
            r#"
            seed = 7
            [paths]
            pool = "pool.json"
            [sampler]
            k = 3
            mode = "intra-class"
            mixture = [1, 1, 1]
            [backend]
            kind = "scripted"
            script = "s.json"
            [build]
            valid_quota = { nosearch = 1, nocall = 2, call = 3 }
            [eval]
            policy = "full-match"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.sampler.k, 3);
        assert_eq!(cfg.sampler.mode, Strategy::IntraClass);
        assert_eq!(cfg.eval.policy, CorrectnessPolicy::FullMatch);
        assert_eq!(cfg.eval.trials, 6);
        assert_eq!(cfg.build.valid_quota.unwrap().call, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<Config>("[sampler]\nkk = 1").is_err());
    }
}
