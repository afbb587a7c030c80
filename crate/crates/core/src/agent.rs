//! Wiring: loads the static assets a deployment needs and bundles a
//! pipeline with the mutable state it works on.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::capability::{load_corpus, CorpusError, SchemaCorpus};
use crate::domain::TaskProposal;
use crate::home::{HomeError, HomeState};
use crate::llm::{ChatProvider, Embedder, Gateway, HashEmbedder, LlmError, Playbook, PricingTable, ScriptedProvider};
use crate::memory::TaskMemory;
use crate::pipeline::{ApprovalOutcome, Feedback, Pipeline, PipelineConfig, PipelineError, ProgressEvent, RunContext};
use crate::preference::{BinConfig, EffectMap, PreferenceError, PreferenceStore, PreferenceTables};
use crate::prompts::Prompts;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Home(#[from] HomeError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Locations of the data files an agent is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetPaths {
    pub corpus_dir: PathBuf,
    pub home: PathBuf,
    pub effects: PathBuf,
    pub bins: PathBuf,
    pub pricing: PathBuf,
    /// Interaction log; missing means an empty log.
    pub logs: Option<PathBuf>,
}

impl AssetPaths {
    /// The conventional layout under one fixture directory.
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        AssetPaths {
            corpus_dir: root.join("capabilities"),
            home: root.join("environments/home.json"),
            effects: root.join("effect_map.toml"),
            bins: root.join("bins.toml"),
            pricing: root.join("pricing.toml"),
            logs: Some(root.join("logs/interactions.jsonl")),
        }
    }
}

/// Loaded static assets.
#[derive(Debug, Clone)]
pub struct Assets {
    pub corpus: Arc<SchemaCorpus>,
    pub home: HomeState,
    pub effects: Arc<EffectMap>,
    pub bins: BinConfig,
    pub pricing: PricingTable,
    pub prefs: PreferenceStore,
}

impl Assets {
    pub fn load(paths: &AssetPaths) -> Result<Self, AssetError> {
        let corpus = Arc::new(load_corpus(&paths.corpus_dir)?);
        let home = HomeState::load(&paths.home, Arc::clone(&corpus))?;
        let prefs = match &paths.logs {
            Some(p) if p.exists() => PreferenceStore::load_jsonl(p)?,
            _ => PreferenceStore::default(),
        };
        Ok(Assets {
            home,
            effects: Arc::new(EffectMap::load(&paths.effects)?),
            bins: BinConfig::load(&paths.bins)?,
            pricing: PricingTable::load(&paths.pricing)?,
            prefs,
            corpus,
        })
    }

    pub fn gateway(&self, chat: Arc<dyn ChatProvider>, embedder: Arc<dyn Embedder>) -> Arc<Gateway> {
        Arc::new(Gateway::new(chat, embedder, self.pricing.clone()))
    }

    /// Gateway over a scripted playbook and the hashing embedder.
    pub fn scripted_gateway(&self, playbook: Playbook) -> Arc<Gateway> {
        self.gateway(Arc::new(ScriptedProvider::new(playbook)), Arc::new(HashEmbedder))
    }

    pub fn pipeline(&self, config: PipelineConfig, gateway: Arc<Gateway>) -> Result<Pipeline, PipelineError> {
        Pipeline::new(
            config,
            gateway,
            Arc::clone(&self.corpus),
            Arc::clone(&self.effects),
            Prompts::builtin(),
        )
    }
}

/// A pipeline plus the single home, memory and preference store it serves.
pub struct Agent {
    pub pipeline: Pipeline,
    pub memory: TaskMemory,
    pub prefs: PreferenceStore,
    pub home: HomeState,
    pub bins: BinConfig,
}

impl Agent {
    pub fn new(pipeline: Pipeline, assets: &Assets) -> Self {
        Agent {
            pipeline,
            memory: TaskMemory::new(),
            prefs: assets.prefs.clone(),
            home: assets.home.clone(),
            bins: assets.bins.clone(),
        }
    }

    pub fn tables(&mut self) -> PreferenceTables {
        let corpus = Arc::clone(self.pipeline.corpus());
        self.prefs.tables(self.pipeline.effects(), &self.bins, &corpus).clone()
    }

    pub fn propose(
        &mut self,
        proposal_id: &str,
        instruction: &str,
        progress: &mut dyn FnMut(ProgressEvent),
    ) -> TaskProposal {
        let tables = self.tables();
        let ctx = RunContext {
            home: &self.home,
            memory: &self.memory,
            tables: &tables,
        };
        self.pipeline.run(proposal_id, instruction, ctx, progress)
    }

    /// Applies feedback; `Approve` also performs the approval side effects.
    pub fn feedback(
        &mut self,
        proposal: &mut TaskProposal,
        feedback: &Feedback,
        progress: &mut dyn FnMut(ProgressEvent),
    ) -> Result<Option<ApprovalOutcome>, PipelineError> {
        if *feedback == Feedback::Approve {
            return self
                .pipeline
                .approve(proposal, &mut self.memory, &mut self.prefs, &mut self.home)
                .map(Some);
        }
        let tables = self.tables();
        let ctx = RunContext {
            home: &self.home,
            memory: &self.memory,
            tables: &tables,
        };
        self.pipeline.apply_feedback(proposal, feedback, ctx, progress)?;
        Ok(None)
    }
}
