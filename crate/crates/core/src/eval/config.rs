use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{load_dataset, Dataset, TraitKind};
use crate::error::{Error, Result};
use crate::numerics::OptimizerConfig;
use crate::pipeline::{FitConfig, LstmConfig, P2AConfig};
use crate::prediction::{ClassifierConfig, CnnConfig, SvrConfig};
use crate::synthgen::{generate, GeneratorConfig};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory at the start of the run.
    Synthetic(GeneratorConfig),
    /// A dataset container on disk.
    Container(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => {
                cfg.validate()?;
                Ok(generate(cfg)?.dataset)
            }
            DataSource::Container(path) => load_dataset(path),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DataSource::Synthetic(cfg) => format!("synthetic (seed {})", cfg.seed),
            DataSource::Container(path) => path.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSource,
    /// Master seed; every repeat derives its own stream from it.
    pub seed: u64,
    pub repeats: usize,
    /// Registered method names, frame and trait methods alike.
    pub methods: Vec<String>,
    /// Traits to score; those the cohort does not record are skipped.
    pub traits: Vec<TraitKind>,
    pub p2a: P2AConfig,
    pub lstm: LstmConfig,
    pub classifier: ClassifierConfig,
    pub cnn: CnnConfig,
    pub svr: SvrConfig,
    /// Cap on repeats run in parallel; `None` uses every core. Not part of
    /// the config hash and not echoed into reports.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

pub const STANDARD_METHODS: [&str; 10] = [
    "p2a_only",
    "vanilla_lstm",
    "cond_lstm",
    "embedding_linear",
    "embedding_shuffled",
    "embedding_regressor",
    "fmri_cnn",
    "fmri_stats",
    "clinical_svr",
    "dummy",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA,
            data: DataSource::Synthetic(GeneratorConfig::default()),
            seed: 0,
            repeats: 10,
            methods: STANDARD_METHODS.iter().map(|s| s.to_string()).collect(),
            traits: TraitKind::ALL.to_vec(),
            p2a: P2AConfig::default(),
            lstm: LstmConfig::default(),
            classifier: ClassifierConfig::default(),
            cnn: CnnConfig::default(),
            svr: SvrConfig::default(),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    /// Two repeats on the tiny synthetic cohort with short training runs.
    pub fn smoke() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(GeneratorConfig::tiny()),
            repeats: 2,
            p2a: P2AConfig {
                max_epochs: 3,
                batch_size: 32,
                ..P2AConfig::default()
            },
            lstm: LstmConfig {
                hidden: 16,
                max_epochs: 8,
                batch_subjects: 3,
                eval_every: 4,
                eval_fit_steps: 5,
                fit: FitConfig { lr: 1e-2, steps: 20 },
                ..LstmConfig::default()
            },
            classifier: ClassifierConfig {
                epochs: 100,
                ..ClassifierConfig::default()
            },
            cnn: CnnConfig {
                filters: 2,
                hidden: vec![16],
                optimizer: OptimizerConfig::adam(1e-3),
                epochs: 2,
                ..CnnConfig::default()
            },
            svr: SvrConfig {
                epochs: 200,
                ..SvrConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version = {}: this build reads version {CONFIG_SCHEMA}",
                self.schema_version
            )));
        }
        if self.repeats < 2 {
            return Err(Error::Config(format!("repeats = {}: the t-test needs at least 2", self.repeats)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must name at least one method".into()));
        }
        if self.traits.is_empty() {
            return Err(Error::Config("traits must name at least one trait".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        if let DataSource::Synthetic(g) = &self.data {
            g.validate()?;
        }
        self.p2a.validate()?;
        self.lstm.validate()?;
        Ok(())
    }

    /// The config as echoed into artifacts: everything but `threads`.
    pub fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig {
            threads: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON of [`Self::resolved`].
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = ExperimentConfig::smoke();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"repeats": 3, "data": {"container": "x.nfd"}}"#).unwrap();
        assert_eq!(partial.repeats, 3);
        assert_eq!(partial.data, DataSource::Container("x.nfd".into()));
        assert_eq!(partial.lstm, LstmConfig::default());
    }

    #[test]
    fn invalid_fields_are_config_errors() {
        for text in [r#"{"repeats": 1}"#, r#"{"bogus": 1}"#, r#"{"schema_version": 9}"#, r#"{"methods": []}"#] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn threads_do_not_change_the_hash() {
        let a = ExperimentConfig::smoke();
        let b = ExperimentConfig {
            threads: Some(3),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 1, ..a }.hash());
    }
}
