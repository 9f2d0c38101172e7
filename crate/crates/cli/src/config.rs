//! Run configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};
use vb_core::diagnoser::{AugmentConfig, DiagnoserConfig};
use vb_core::eval::EvalConfig;
use vb_core::localizer::PriorConfig;
use vb_core::oracle::{RemoteConfig, StubNoiseConfig};
use vb_core::phantom::PhantomConfig;
use vb_core::preprocess::PreprocessConfig;
use vb_core::seeds::named_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Stub,
    Remote,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub stub: StubNoiseConfig,
    pub remote: RemoteConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_root: PathBuf,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub oracle: OracleConfig,
    pub localizer: PriorConfig,
    pub diagnoser: DiagnoserConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Module defaults, with the brain threshold and learning rate the
    /// phantom cohort needs.
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_root: PathBuf::from("runs/default"),
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig {
                brain_threshold_quantile: 0.7325,
                ..PreprocessConfig::default()
            },
            oracle: OracleConfig::default(),
            localizer: PriorConfig::default(),
            diagnoser: DiagnoserConfig {
                lr: 3e-3,
                ..DiagnoserConfig::default()
            },
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run configuration")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate().context("config [phantom]")?;
        self.preprocess.validate().context("config [preprocess]")?;
        self.oracle.stub.validate().context("config [oracle.stub]")?;
        self.localizer.validate().context("config [localizer]")?;
        self.diagnoser.validate().context("config [diagnoser]")?;
        self.augment.validate().context("config [augment]")?;
        self.eval.validate().context("config [eval]")?;
        ensure!(
            self.diagnoser.k_classes == self.phantom.n_classes,
            "config [diagnoser] k_classes: {} differs from [phantom] n_classes {}",
            self.diagnoser.k_classes,
            self.phantom.n_classes
        );
        Ok(())
    }

    /// Replaces every stage seed with a stream derived from `master_seed`.
    pub fn with_derived_seeds(mut self) -> Self {
        let m = self.master_seed;
        self.phantom.seed = named_seed(m, "phantom");
        self.oracle.stub.seed = named_seed(m, "oracle");
        self.localizer.seed = named_seed(m, "localizer");
        self.diagnoser.seed = named_seed(m, "diagnoser");
        self.augment.seed = named_seed(m, "augment");
        self.eval.seed = named_seed(m, "eval");
        self
    }
}
