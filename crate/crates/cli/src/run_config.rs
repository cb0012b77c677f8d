//! Run configuration files and their resolution into loaded artifacts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparkee::container;
use sparkee::heads::{collect_distill_corpus, train_heads};
use sparkee::{Backbone, HeadSet, ModelConfig, PolicyStack, SamplingConfig, TokenId, TrainHyper};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Artifact { path: PathBuf },
    Config(ModelConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("toy".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Short(String),
    Stack(PolicyStack),
}

impl PolicySpec {
    pub fn resolve(&self) -> CliResult<PolicyStack> {
        match self {
            PolicySpec::Short(s) => s.parse().map_err(CliError::from),
            PolicySpec::Stack(p) => Ok(p.clone()),
        }
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Short("disable".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub hyper: TrainHyper,
    /// Layers to train; defaults to whatever the command needs.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_rollout_steps")]
    pub rollout_steps: usize,
}

fn default_rollout_steps() -> usize {
    40
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            hyper: TrainHyper::default(),
            layers: None,
            rollout_steps: default_rollout_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadsSpec {
    Artifact { path: PathBuf },
    Train { train: TrainSpec },
}

impl Default for HeadsSpec {
    fn default() -> Self {
        HeadsSpec::Train { train: TrainSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSpec {
    Suite {
        suite: String,
        #[serde(default)]
        limit: Option<usize>,
    },
    Inline { inline: Vec<Vec<TokenId>> },
    File { file: PathBuf },
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec::Suite { suite: "toy".into(), limit: None }
    }
}

fn default_sampling() -> SamplingConfig {
    SamplingConfig::nucleus(0.7, 0.9, 0)
}

fn default_max_new_tokens() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Extra policies for `bench`, run after `policy`.
    #[serde(default)]
    pub sweep: Vec<PolicySpec>,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub heads: HeadsSpec,
    #[serde(default)]
    pub prompts: PromptSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config uses defaults")
    }
}

impl RunConfig {
    /// Reads a config file; relative artifact paths resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ModelSpec::Artifact { path } = &mut cfg.model {
            rebase(path);
        }
        if let HeadsSpec::Artifact { path } = &mut cfg.heads {
            rebase(path);
        }
        if let PromptSpec::File { file } = &mut cfg.prompts {
            rebase(file);
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let cfg = match &self.model {
            ModelSpec::Preset(name) => ModelConfig::preset(name).ok_or_else(|| CliError::config(format!("unknown preset {name:?}")))?,
            ModelSpec::Config(c) => c.clone(),
            ModelSpec::Artifact { path } => load_container(path)?.manifest.config,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone(&self) -> CliResult<Backbone> {
        match &self.model {
            ModelSpec::Artifact { path } => Ok(load_container(path)?.backbone),
            _ => Ok(Backbone::new(self.model_config()?)?),
        }
    }

    pub fn policies(&self) -> CliResult<Vec<PolicyStack>> {
        std::iter::once(&self.policy).chain(&self.sweep).map(PolicySpec::resolve).collect()
    }

    pub fn prompts(&self, config: &ModelConfig) -> CliResult<Vec<Vec<TokenId>>> {
        let prompts = match &self.prompts {
            PromptSpec::Suite { suite, limit } => {
                if suite != "toy" {
                    return Err(CliError::config(format!("unknown prompt suite {suite:?}")));
                }
                let mut all = sparkee::prompts::toy_suite(config)?;
                if let Some(n) = limit {
                    all.truncate(*n);
                }
                all
            }
            PromptSpec::Inline { inline } => inline.clone(),
            PromptSpec::File { file } => {
                let text = std::fs::read_to_string(file).map_err(|e| CliError::missing(format!("prompts {}: {e}", file.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("prompts {}: {e}", file.display())))?
            }
        };
        if prompts.is_empty() {
            return Err(CliError::config("no prompts"));
        }
        Ok(prompts)
    }

    /// Heads covering `needed`, loaded from an artifact or trained on the
    /// bundled suite.
    pub fn heads(&self, backbone: &Backbone, needed: &BTreeSet<usize>) -> CliResult<HeadSet> {
        match &self.heads {
            HeadsSpec::Artifact { path } => {
                let loaded = load_container(path)?;
                if loaded.backbone.digest() != backbone.digest() {
                    return Err(CliError::config(format!("heads in {} belong to a different backbone", path.display())));
                }
                let heads = loaded.heads.ok_or_else(|| CliError::missing(format!("{} holds no heads", path.display())))?;
                heads.covers(needed)?;
                Ok(heads)
            }
            HeadsSpec::Train { train } => {
                let l = backbone.num_layers();
                let layers: BTreeSet<usize> = match &train.layers {
                    Some(ls) => ls.iter().copied().chain(needed.iter().copied()).collect(),
                    None => needed.clone(),
                };
                let layers: BTreeSet<usize> = layers.into_iter().filter(|&x| x < l).collect();
                if layers.is_empty() {
                    return Ok(HeadSet::final_only(backbone));
                }
                train_on_suite(backbone, &layers, train)
            }
        }
    }
}

pub fn train_on_suite(backbone: &Backbone, layers: &BTreeSet<usize>, train: &TrainSpec) -> CliResult<HeadSet> {
    let suite = sparkee::prompts::toy_suite(backbone.config())?;
    let rollout = SamplingConfig::nucleus(1.0, 0.95, train.hyper.seed);
    let corpus = collect_distill_corpus(backbone, &suite, layers, &rollout, train.rollout_steps)?;
    Ok(train_heads(backbone, &corpus, &train.hyper)?)
}

pub fn load_container(path: &Path) -> CliResult<container::Loaded> {
    if !path.exists() {
        return Err(CliError::missing(format!("artifact {} not found", path.display())));
    }
    container::load(path).map_err(|e| CliError::missing(format!("{}: {e}", path.display())))
}
