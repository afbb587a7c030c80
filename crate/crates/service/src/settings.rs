//! Command-line and environment settings shared by every subcommand.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use homeagent_core::agent::{AssetPaths, Assets};
use homeagent_core::llm::{Embedder, Gateway, HashEmbedder, HttpConfig, HttpProvider, Playbook};
use homeagent_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, Args)]
pub struct AssetArgs {
    /// Directory with the conventional asset layout (capabilities/, environments/, ...).
    #[arg(long, env = "HOMEAGENT_FIXTURES", default_value = "fixtures")]
    pub fixtures: PathBuf,
    /// Environment file; defaults to <fixtures>/environments/home.json.
    #[arg(long, env = "HOMEAGENT_HOME")]
    pub home: Option<PathBuf>,
    /// Capability schema directory; defaults to <fixtures>/capabilities.
    #[arg(long, env = "HOMEAGENT_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Pipeline settings (retry_limit, tau_task, tau_subtask, retrieval_k) as TOML.
    #[arg(long, env = "HOMEAGENT_CONFIG")]
    pub config: Option<PathBuf>,
}

impl AssetArgs {
    pub fn paths(&self) -> AssetPaths {
        let mut paths = AssetPaths::under(&self.fixtures);
        if let Some(home) = &self.home {
            paths.home = home.clone();
        }
        if let Some(corpus) = &self.corpus {
            paths.corpus_dir = corpus.clone();
        }
        paths
    }

    pub fn load(&self) -> Result<Assets> {
        let paths = self.paths();
        Assets::load(&paths).with_context(|| format!("loading assets from {}", self.fixtures.display()))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let Some(path) = &self.config else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// Deterministic playbook-backed responses.
    Scripted,
    /// An OpenAI-compatible chat-completions endpoint.
    Http,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, env = "HOMEAGENT_PROVIDER", default_value = "scripted")]
    pub provider: ProviderKind,
    /// Playbook for the scripted provider; defaults to <fixtures>/playbook.json.
    #[arg(long, env = "HOMEAGENT_PLAYBOOK")]
    pub playbook: Option<PathBuf>,
    #[arg(long, env = "HOMEAGENT_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, env = "HOMEAGENT_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    #[arg(long, env = "HOMEAGENT_MODEL")]
    pub model: Option<String>,
    /// Remote embedding model; without it texts are embedded locally.
    #[arg(long, env = "HOMEAGENT_EMBEDDING_MODEL")]
    pub embedding_model: Option<String>,
}

impl ProviderArgs {
    /// The configured gateway, or `None` when the provider settings are
    /// incomplete. Settings that are present but broken are errors.
    pub fn gateway(&self, assets: &Assets, fixtures: &Path) -> Result<Option<Arc<Gateway>>> {
        match self.provider {
            ProviderKind::Scripted => {
                let path = self.playbook.clone().unwrap_or_else(|| fixtures.join("playbook.json"));
                if !path.exists() {
                    return Ok(None);
                }
                let playbook = Playbook::load(&path).with_context(|| format!("loading playbook {}", path.display()))?;
                Ok(Some(assets.scripted_gateway(playbook)))
            }
            ProviderKind::Http => {
                let (Some(base_url), Some(model)) = (&self.base_url, &self.model) else {
                    return Ok(None);
                };
                let config = HttpConfig {
                    base_url: base_url.clone(),
                    api_key: self.api_key.clone(),
                    model: model.clone(),
                    embedding_model: self.embedding_model.clone(),
                    timeout_secs: 60,
                };
                let provider = Arc::new(HttpProvider::new(config)?);
                let embedder: Arc<dyn Embedder> = if self.embedding_model.is_some() {
                    provider.clone()
                } else {
                    Arc::new(HashEmbedder)
                };
                Ok(Some(assets.gateway(provider, embedder)))
            }
        }
    }

    /// As [`Self::gateway`], but missing settings are an error.
    pub fn require_gateway(&self, assets: &Assets, fixtures: &Path) -> Result<Arc<Gateway>> {
        match self.gateway(assets, fixtures)? {
            Some(g) => Ok(g),
            None => match self.provider {
                ProviderKind::Scripted => bail!("no playbook found; pass --playbook or HOMEAGENT_PLAYBOOK"),
                ProviderKind::Http => bail!("the http provider needs --base-url and --model"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn fixtures() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
    }

    fn assets_args(config: Option<PathBuf>) -> AssetArgs {
        AssetArgs {
            fixtures: fixtures(),
            home: None,
            corpus: None,
            config,
        }
    }

    fn provider(kind: ProviderKind) -> ProviderArgs {
        ProviderArgs {
            provider: kind,
            playbook: None,
            base_url: None,
            api_key: None,
            model: None,
            embedding_model: None,
        }
    }

    #[test]
    fn incomplete_provider_settings_mean_no_gateway() {
        let args = assets_args(None);
        let assets = args.load().unwrap();
        assert!(provider(ProviderKind::Scripted)
            .gateway(&assets, &args.fixtures)
            .unwrap()
            .is_some());
        let mut missing = provider(ProviderKind::Scripted);
        missing.playbook = Some(fixtures().join("absent.json"));
        assert!(missing.gateway(&assets, &args.fixtures).unwrap().is_none());
        assert!(missing.require_gateway(&assets, &args.fixtures).is_err());
        let http = provider(ProviderKind::Http);
        assert!(http.gateway(&assets, &args.fixtures).unwrap().is_none());
        let mut http = http;
        http.base_url = Some("http://127.0.0.1:9".into());
        http.model = Some("m".into());
        assert!(http.gateway(&assets, &args.fixtures).unwrap().is_some());
    }

    #[test]
    fn pipeline_config_is_read_and_validated() {
        assert_eq!(assets_args(None).pipeline_config().unwrap(), PipelineConfig::default());
        let mut good = tempfile::NamedTempFile::new().unwrap();
        writeln!(good, "retry_limit = 5\ntau_task = 0.9").unwrap();
        let config = assets_args(Some(good.path().into())).pipeline_config().unwrap();
        assert_eq!((config.retry_limit, config.tau_task), (5, 0.9));
        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "tau_task = 1.5").unwrap();
        assert!(assets_args(Some(bad.path().into())).pipeline_config().is_err());
    }
}
