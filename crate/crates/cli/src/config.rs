//! Run configuration: a TOML file with `[train]`, `[model]`, `[data]` and
//! `[output]` sections, then `section.key=value` overrides.

use std::path::{Path, PathBuf};

use acsa_core::data::{CorpusFormat, TokenizerMode};
use acsa_core::model::{ModelConfig, ModelVariant};
use acsa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: ModelVariant,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub attn_dim: Option<usize>,
    pub freeze_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(1, 1, 1);
        Self {
            variant: base.variant,
            embed_dim: base.embed_dim,
            lstm_hidden: base.lstm_hidden,
            head_hidden: base.head_hidden,
            attn_dim: base.attn_dim,
            freeze_embedding: base.freeze_embedding,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, n_aspects: usize, n_polarities: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            lstm_hidden: self.lstm_hidden,
            head_hidden: self.head_hidden,
            attn_dim: self.attn_dim,
            variant: self.variant,
            freeze_embedding: self.freeze_embedding,
            ..ModelConfig::new(vocab_size, n_aspects, n_polarities)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    /// Validation corpus; when unset, `val_ratio` splits it off the training corpus.
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Inferred from the file extension when unset.
    pub format: Option<CorpusFormat>,
    pub labels: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub tokenizer: TokenizerMode,
    pub min_count: usize,
    pub val_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            format: None,
            labels: None,
            embeddings: None,
            tokenizer: TokenizerMode::default(),
            min_count: 1,
            val_ratio: 0.9,
        }
    }
}

impl DataSection {
    pub fn format_for(&self, path: &Path) -> CorpusFormat {
        self.format.unwrap_or_else(|| infer_format(path))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("acsa-out") }
    }
}

pub fn infer_format(path: &Path) -> CorpusFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("xml") => CorpusFormat::Xml,
        _ => CorpusFormat::Jsonl,
    }
}

const SECTIONS: [(&str, &[&str]); 4] = [
    (
        "train",
        &[
            "lambda_l2", "alpha_sc", "learning_rate", "clip_norm", "clip_mode", "dropout_p", "batch_size",
            "max_epochs", "patience", "seed", "tau", "runs",
        ],
    ),
    ("model", &["variant", "embed_dim", "lstm_hidden", "head_hidden", "attn_dim", "freeze_embedding"]),
    (
        "data",
        &["train", "val", "test", "format", "labels", "embeddings", "tokenizer", "min_count", "val_ratio"],
    ),
    ("output", &["dir"]),
];

/// `section.key` for a dotted key, or the one section owning a bare key.
fn qualify(key: &str) -> Result<(String, String), CliError> {
    if let Some((section, field)) = key.split_once('.') {
        return match SECTIONS.iter().find(|(s, _)| *s == section) {
            Some((_, fields)) if fields.contains(&field) => Ok((section.into(), field.into())),
            Some(_) => Err(CliError::usage(format!("unknown config key `{key}`"))),
            None => Err(CliError::usage(format!("unknown config section `{section}` in `{key}`"))),
        };
    }
    let owners: Vec<&str> = SECTIONS
        .iter()
        .filter(|(_, fields)| fields.contains(&key))
        .map(|(s, _)| *s)
        .collect();
    match owners.as_slice() {
        [section] => Ok(((*section).into(), key.into())),
        [] => Err(CliError::usage(format!("unknown config key `{key}`"))),
        many => Err(CliError::usage(format!(
            "config key `{key}` is ambiguous; use one of {}",
            many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{assignment}` is not of the form key=value")))?;
    let (section, field) = qualify(key.trim())?;
    let slot = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match slot {
        toml::Value::Table(t) => {
            t.insert(field, literal(value.trim()));
            Ok(())
        }
        _ => Err(CliError::usage(format!("`{section}` is not a section"))),
    }
}

pub fn parse_config(text: &str, origin: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| CliError::usage(format!("{origin}: {}", e.message())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    RunConfig::deserialize(table).map_err(|e| CliError::usage(format!("{origin}: {}", e.message())))
}

/// Reads `path` (all defaults when `None`) and applies `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            parse_config(&text, &p.display().to_string(), overrides)
        }
        None => parse_config("", "config", overrides),
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = parse_config("", "t", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lambda_l2, 0.01);
        assert_eq!(cfg.train.clip_norm, 5.0);
        assert_eq!(cfg.train.dropout_p, 0.5);
        assert_eq!(cfg.train.tau, 0.25);
        assert_eq!(cfg.model.lstm_hidden, 100);
        assert_eq!(cfg.model.embed_dim, 300);
    }

    #[test]
    fn overrides_win_and_resolve_bare_keys() {
        let cfg = parse_config("[train]\nalpha_sc = 0.3\n", "t", &["alpha_sc=0.6".into()]).unwrap();
        assert_eq!(cfg.train.alpha_sc, 0.6);
        let cfg = parse_config("", "t", &["model.variant=without_cae".into(), "data.train=a/b.xml".into()]).unwrap();
        assert_eq!(cfg.model.variant, ModelVariant::WithoutCae);
        assert_eq!(cfg.data.train.as_deref(), Some(Path::new("a/b.xml")));
    }

    #[test]
    fn type_and_key_errors() {
        let e = parse_config("[train]\nlambda_l2 = \"abc\"\n", "t", &[]).unwrap_err();
        assert!(e.message.contains("lambda_l2") || e.message.contains("invalid type"), "{}", e.message);
        assert!(parse_config("", "t", &["lambda_l2=abc".into()]).is_err());
        let e = parse_config("[train]\nlearning_rat = 0.1\n", "t", &[]).unwrap_err();
        assert!(e.message.contains("learning_rat"), "{}", e.message);
        let e = parse_config("", "t", &["nope=1".into()]).unwrap_err();
        assert!(e.message.contains("nope"));
        assert!(parse_config("", "t", &["train".into()]).is_err());
    }

    #[test]
    fn key_table_matches_sections() {
        let text = RunConfig {
            data: DataSection {
                train: Some("a".into()),
                val: Some("e".into()),
                test: Some("b".into()),
                format: Some(CorpusFormat::Xml),
                labels: Some("c".into()),
                embeddings: Some("d".into()),
                ..DataSection::default()
            },
            model: ModelSection {
                attn_dim: Some(3),
                ..ModelSection::default()
            },
            ..RunConfig::default()
        }
        .to_toml();
        let table: toml::Table = toml::from_str(&text).unwrap();
        for (section, fields) in SECTIONS {
            let keys: Vec<&str> = table[section].as_table().unwrap().keys().map(String::as_str).collect();
            assert_eq!(keys.len(), fields.len(), "{section}");
            assert!(keys.iter().all(|k| fields.contains(k)), "{section}: {keys:?}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = parse_config("", "t", &["seed=7".into(), "data.format=xml".into()]).unwrap();
        assert_eq!(parse_config(&cfg.to_toml(), "t", &[]).unwrap(), cfg);
    }

    #[test]
    fn format_inference() {
        assert_eq!(infer_format(Path::new("x/Train.XML")), CorpusFormat::Xml);
        assert_eq!(infer_format(Path::new("x/train.jsonl")), CorpusFormat::Jsonl);
    }
}
