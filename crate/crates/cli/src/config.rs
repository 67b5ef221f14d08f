//! The JSON run configuration accepted by `train`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use abuse_detect_core::corpus::Language;
use abuse_detect_core::embeddings::MissingRowInit;
use abuse_detect_core::model::ModelConfig;
use abuse_detect_core::text::PreprocessConfig;
use abuse_detect_core::training::TrainConfig;
use abuse_detect_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Canonical JSON-lines training partition written by `prepare`.
    pub train: PathBuf,
    /// Word-vector file (text or binary cache) per language.
    pub embeddings: BTreeMap<Language, PathBuf>,
    #[serde(default)]
    pub missing_rows: MissingRowInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataPaths,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl RunConfigFile {
    /// Reads a config; relative data paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        cfg.data.embeddings.values_mut().for_each(resolve);
        resolve(&mut cfg.output_dir);
        for p in cfg.preprocess.stopword_files.values_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.preprocess.emoji_range_file.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn embeddings_for(&self, language: Language) -> Result<&Path> {
        self.data
            .embeddings
            .get(&language)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no embedding file configured for language {language}")))
    }
}
