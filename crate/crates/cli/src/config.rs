//! Experiment config file: one JSON document binding the training setup,
//! context window and data files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sccl::corpus::{load_corpus, Vocab, WindowConfig};
use sccl::prototypes::{BuiltinSet, PrototypeTable};
use sccl::trainer::{Dataset, Method, TrainSetup, TrainConfig};
use sccl::encoder::{AdapterConfig, EncoderConfig};
use sccl::losses::LossConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines corpus; split 80/10/10 by dialogue id unless
    /// `valid_corpus` and `test_corpus` are both given.
    pub corpus: PathBuf,
    pub valid_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub vocab: PathBuf,
    /// Prototype file; the built-in table of `emotions` when absent.
    pub prototypes: Option<PathBuf>,
    pub emotions: BuiltinSet,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            valid_corpus: None,
            test_corpus: None,
            vocab: "vocab.json".into(),
            prototypes: None,
            emotions: BuiltinSet::Iemocap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub window: WindowConfig,
    pub data: DataConfig,
    /// Methods run by `compare`.
    pub methods: Vec<Method>,
    /// Methods and batch sizes of the `stability` grid.
    pub stability_methods: Vec<Method>,
    pub batch_sizes: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            window: WindowConfig::default(),
            data: DataConfig::default(),
            methods: vec![Method::None, Method::Scl, Method::Vadcl, Method::Sccl, Method::RandomSccl],
            stability_methods: vec![Method::Sccl, Method::Scl],
            batch_sizes: vec![1, 2, 4, 8, 16],
        }
    }
}

/// A parsed config together with the directory its relative paths resolve against.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl ExperimentConfig {
    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            loss: self.loss.clone(),
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
        }
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        config.setup().validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Every data file the config reads, resolved.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let d = &self.config.data;
        [Some(&d.corpus), d.valid_corpus.as_ref(), d.test_corpus.as_ref(), Some(&d.vocab), d.prototypes.as_ref()]
            .into_iter()
            .flatten()
            .map(|p| self.resolve(p))
            .collect()
    }

    pub fn prototypes(&self) -> Result<PrototypeTable, CliError> {
        Ok(match &self.config.data.prototypes {
            Some(p) => PrototypeTable::load(self.resolve(p))?,
            None => PrototypeTable::builtin(self.config.data.emotions),
        })
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.config.data;
        let table = self.prototypes()?;
        let vocab = Vocab::load(self.resolve(&d.vocab))?;
        let load = |p: &Path| load_corpus(self.resolve(p), &table.emotions);
        let window = &self.config.window;
        let data = match (&d.valid_corpus, &d.test_corpus) {
            (Some(v), Some(t)) => {
                let (train, valid, test) = (load(&d.corpus)?, load(v)?, load(t)?);
                Dataset::from_splits(&train, &valid, &test, table, vocab, window)?
            }
            (None, None) => Dataset::from_dialogues(&load(&d.corpus)?, table, vocab, window)?,
            _ => {
                return Err(CliError::Usage(
                    "valid_corpus and test_corpus must be given together".into(),
                ))
            }
        };
        Ok(data)
    }
}
