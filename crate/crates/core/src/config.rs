//! Experiment configuration: a strict TOML schema plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, SyntheticConfig};
use crate::eval::NovelMapping;
use crate::model::{Activation, ModelConfig};
use crate::objective::TrainConfig;
use crate::sckd::SckdConfig;
use crate::{Error, Result};

/// Exactly one of the two sources must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_columns: Option<Vec<String>>,
    pub label_column: String,
    pub known_classes: Vec<String>,
    /// Seed of the stratified train/test split.
    #[serde(default)]
    pub split_seed: u64,
}

impl CsvSource {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            feature_columns: self.feature_columns.clone(),
            label_column: self.label_column.clone(),
            known_classes: self.known_classes.clone(),
        }
    }
}

/// Model shape; input width and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub novel_hidden_dim: usize,
    pub temperature: f64,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            feature_dim: 16,
            novel_hidden_dim: 16,
            temperature: 0.1,
            activation: Activation::Tanh,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, input_dim: usize, known_classes: usize, novel_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            novel_hidden_dim: self.novel_hidden_dim,
            known_classes,
            novel_classes,
            temperature: self.temperature,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate every this many discovery epochs; 0 evaluates only at the end.
    pub every: usize,
    pub task_agnostic_mapping: NovelMapping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sckd: SckdConfig,
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Only read by the sweep runner.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

/// Class-count sweep over a fixed sample budget. Every point uses
/// `total_classes - n` known and `n` novel classes with
/// `sample_budget / total_classes` samples per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub total_classes: usize,
    pub novel_classes: Vec<usize>,
    pub sample_budget: usize,
}

impl SweepSection {
    pub fn validate(&self) -> Result<()> {
        if self.novel_classes.is_empty() {
            return Err(Error::Config("sweep.novel_classes: at least one point is required".into()));
        }
        for &n in &self.novel_classes {
            if n == 0 || n >= self.total_classes {
                return Err(Error::Config(format!(
                    "sweep.novel_classes: {n} leaves no known or no novel class out of {}",
                    self.total_classes
                )));
            }
        }
        if self.total_classes == 0 || self.sample_budget / self.total_classes < 2 {
            return Err(Error::Config(
                "sweep.sample_budget: need at least 2 samples per class".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                synthetic: Some(SyntheticConfig::default()),
                csv: None,
            },
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sckd: SckdConfig::default(),
            eval: EvalSection::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("results"),
            sweep: None,
        }
    }
}

/// Named ablation settings, each a list of `path=value` overrides applied
/// before any user override.
pub const ABLATION_PRESETS: &[(&str, &[&str])] = &[
    ("full", &[]),
    ("baseline", &["sckd.beta=0"]),
    ("k_to_n_only", &["sckd.n_to_k=false"]),
    ("n_to_k_only", &["sckd.k_to_n=false"]),
    ("no_replica", &["sckd.replica=false"]),
    ("average_scores", &["sckd.score_mode=\"average\""]),
    ("random_scores", &["sckd.score_mode=\"random\""]),
];

/// Overrides of a named ablation preset.
pub fn preset_overrides(name: &str) -> Result<Vec<String>> {
    ABLATION_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, items)| items.iter().map(|s| s.to_string()).collect())
        .ok_or_else(|| {
            let names: Vec<&str> = ABLATION_PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset `{name}`; expected one of {}", names.join(", ")))
        })
}

fn at(path: &str, err: Error) -> Error {
    match err {
        Error::Config(msg) => Error::Config(format!("{path}: {msg}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.synthetic, &self.dataset.csv) {
            (Some(s), None) => s.validate().map_err(|e| at("dataset.synthetic", e))?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "dataset: exactly one of `synthetic` or `csv` must be set".into(),
                ))
            }
        }
        self.model
            .model_config(1, 1, 1)
            .validate()
            .map_err(|e| at("model", e))?;
        self.train.validate().map_err(|e| at("train", e))?;
        self.sckd.validate().map_err(|e| at("sckd", e))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicate seeds".into()));
        }
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        Ok(())
    }

    /// Parses TOML text, applies `path=value` overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config = deserialize_table(table)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn deserialize_table(table: toml::Table) -> Result<ExperimentConfig> {
    let text = toml::to_string(&table).map_err(|e| Error::Serde(e.to_string()))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| Error::Config(e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        if path == "." {
            Error::Config(msg)
        } else {
            Error::Config(format!("{path}: {msg}"))
        }
    })
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.path=value` in a TOML table. The value is read as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{item}` has an empty path segment")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut node = table;
    for (depth, key) in parents.iter().enumerate() {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("{}: not a table", keys[..=depth].join(".")))
        })?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let round = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = ExperimentConfig::from_toml_str("[sckd]\nalhpa = 0.2\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("sckd") && msg.contains("alhpa"), "{msg}");
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let cfg = ExperimentConfig::from_toml_str(
            "seeds = [1]\n",
            &[
                "sckd.beta=0".into(),
                "train.stage2_epochs=3".into(),
                "dataset.synthetic.novel_classes=2".into(),
                "output_dir=out/run".into(),
                "seeds=[4, 5]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.sckd.beta, 0.0);
        assert_eq!(cfg.train.stage2_epochs, 3);
        assert_eq!(cfg.dataset.synthetic.unwrap().novel_classes, 2);
        assert_eq!(cfg.output_dir, PathBuf::from("out/run"));
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (text, needle) in [
            ("seeds = []", "seeds"),
            ("[train]\nlr_floor = 0.0", "train"),
            ("[sckd]\nlambda = 2.0", "sckd"),
            ("[train]\nstage1_epochs = \"ten\"", "train.stage1_epochs"),
            ("[dataset.csv]\npath = \"x.csv\"\nlabel_column = \"y\"\nknown_classes = [\"a\"]\n[dataset.synthetic]\n", "dataset"),
        ] {
            let err = ExperimentConfig::from_toml_str(text, &[]).unwrap_err();
            assert!(err.is_config(), "{text}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
        assert!(ExperimentConfig::from_toml_str("", &["novalue".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = [1]", &["seeds.x=1".into()]).is_err());
    }

    #[test]
    fn presets_resolve_to_valid_configs() {
        for (name, _) in ABLATION_PRESETS {
            let overrides = preset_overrides(name).unwrap();
            ExperimentConfig::from_toml_str("", &overrides).unwrap();
        }
        let baseline = ExperimentConfig::from_toml_str("", &preset_overrides("baseline").unwrap()).unwrap();
        assert_eq!(baseline.sckd.beta, 0.0);
        let random = ExperimentConfig::from_toml_str("", &preset_overrides("random_scores").unwrap()).unwrap();
        assert_eq!(random.sckd.score_mode, crate::sckd::ScoreMode::Random);
        assert!(preset_overrides("nope").unwrap_err().is_config());
    }

    #[test]
    fn csv_source_parses() {
        let text = "[dataset.csv]\npath = \"data.csv\"\nlabel_column = \"label\"\nknown_classes = [\"0\", \"1\"]\n";
        let cfg = ExperimentConfig::from_toml_str(text, &[]).unwrap();
        let csv = cfg.dataset.csv.unwrap();
        assert_eq!(csv.schema().label_column, "label");
        assert_eq!(csv.feature_columns, None);
    }
}
