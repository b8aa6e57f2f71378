//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ColoredShapesSpec;
use crate::error::{Error, Result};
use crate::labelspace::LabelTransform;
use crate::pretrain::PretrainConfig;
use crate::transfer::FinetuneConfig;

/// Hex SHA-256 of the canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// ColoredShapes, materialised under `<out>/data` by `synth-data`.
    Synthetic {
        #[serde(default)]
        spec: ColoredShapesSpec,
    },
    /// An existing `<root>/<split>/<class>/<image>` tree.
    Folder { root: PathBuf, masks: Option<PathBuf> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { spec: ColoredShapesSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub finetune: FinetuneConfig,
    /// Applied in order to the training split.
    pub label_transforms: Vec<LabelTransform>,
    pub train_split: String,
    pub eval_split: String,
    /// Also fine-tune a randomly initialised trunk of the same spec.
    pub compare_random: bool,
    pub top_k: Vec<usize>,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            finetune: FinetuneConfig::default(),
            label_transforms: Vec::new(),
            train_split: "train".into(),
            eval_split: "test".into(),
            compare_random: true,
            top_k: vec![1, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub probe_split: String,
    /// Layer for top activations; the trunk's last layer when absent.
    pub top_layer: Option<String>,
    pub top_m: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { probe_split: "probe".into(), top_layer: None, top_m: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSource,
    pub pretrain: PretrainConfig,
    pub transfer: TransferSection,
    pub analysis: AnalysisSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSource::default(),
            pretrain: PretrainConfig::default(),
            transfer: TransferSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{}: {}", origin.display(), e.path()),
            detail: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| Error::Config { path: section.to_string(), detail: e.to_string() })
        };
        if let DataSource::Synthetic { spec } = &self.data {
            wrap("data.spec", spec.validate())?;
        }
        wrap("pretrain", self.pretrain.validate())?;
        wrap("transfer.finetune", self.transfer.finetune.validate())?;
        Ok(())
    }

    pub fn pretrain_hash(&self) -> String {
        hash_json(&self.pretrain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_hex() {
        let h = hash_json(&serde_json::json!({"a": 1}));
        assert_eq!(h.len(), 64);
        assert_eq!(h, hash_json(&serde_json::json!({"a": 1})));
        assert_ne!(h, hash_json(&serde_json::json!({"a": 2})));
    }

    #[test]
    fn empty_object_is_default() {
        let cfg = ExperimentConfig::from_json("{}", Path::new("c.json")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text, Path::new("c.json")).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = ExperimentConfig::from_json(r#"{"pretrain": {"schedule": {"epohcs": 3}}}"#, Path::new("c.json"))
            .unwrap_err();
        match err {
            Error::Config { path, detail } => {
                assert!(path.contains("pretrain.schedule"), "{path}");
                assert!(detail.contains("epohcs"), "{detail}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = ExperimentConfig::from_json(r#"{"pretrain": {"batch_size": 0}}"#, Path::new("c.json")).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "pretrain"), "{err}");
    }
}
