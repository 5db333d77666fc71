//! The run configuration: one TOML document whose sections mirror the
//! library's configuration types.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tunfp::flow::DEFAULT_SEQ_LEN;
use tunfp::ingest::{CorrelationConfig, DEFAULT_IDLE_TIMEOUT};
use tunfp::nn::NetConfig;
use tunfp::sim::{stock_profiles, AppSynthConfig, CorpusConfig, TunnelProfile};
use tunfp::train::{LossWeights, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppsConfig {
    pub count: usize,
    pub synth: AppSynthConfig,
}

impl Default for AppsConfig {
    fn default() -> Self {
        AppsConfig {
            count: 10,
            synth: AppSynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Seconds of silence after which a reused 5-tuple opens a new flow;
    /// 0 keeps one flow per 5-tuple.
    pub idle_timeout: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds corpus generation, app synthesis, the split, initialization
    /// and batching. Section-level seeds are overwritten by this one.
    pub seed: u64,
    /// Sequence length n for corpus generation, ingest and the network.
    /// Section-level values are overwritten by this one.
    pub n: usize,
    pub apps: AppsConfig,
    pub corpus: CorpusConfig,
    pub ingest: IngestConfig,
    pub correlation: CorrelationConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Tunnel profiles; the stock set when empty.
    pub profile: Vec<TunnelProfile>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            n: DEFAULT_SEQ_LEN,
            apps: AppsConfig::default(),
            corpus: CorpusConfig::default(),
            ingest: IngestConfig::default(),
            correlation: CorrelationConfig::default(),
            net: NetConfig {
                classes: 10,
                ..NetConfig::default()
            },
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            profile: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // toml renders multi-line diagnostics; keep the message itself
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Pushes the shared settings into every section and checks them.
    pub fn finalize(mut self) -> Result<Self> {
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.corpus.n = self.n;
        self.correlation.n = self.n;
        self.net.n = self.n;
        if self.profile.is_empty() {
            self.profile = stock_profiles();
        }
        if !(self.ingest.idle_timeout >= 0.0 && self.ingest.idle_timeout.is_finite()) {
            bail!("ingest.idle_timeout must be a finite number >= 0");
        }
        self.apps.synth.validate()?;
        self.corpus.validate()?;
        self.correlation.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        for p in &self.profile {
            p.validate()?;
        }
        Ok(self)
    }

    pub fn idle_timeout(&self) -> Option<f64> {
        (self.ingest.idle_timeout > 0.0).then_some(self.ingest.idle_timeout)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
