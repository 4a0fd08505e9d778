use std::fs;
use std::path::{Path, PathBuf};

use jointstory::model::ModelConfig;
use jointstory::train::TrainPlan;
use jointstory::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default data directory.
pub const DATA_ENV: &str = "JOINTSTORY_DATA";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a run needs, read from one JSON file and then overridden by
/// command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Fills unset corpus and split paths from the data directory.
    pub fn apply_data_dir(&mut self, dir: Option<&Path>) {
        let Some(dir) = dir else { return };
        if self.paths.corpus.is_none() {
            self.paths.corpus = Some(dir.join("corpus.jsonl"));
        }
        if self.paths.splits.is_none() {
            self.paths.splits = Some(dir.join("splits.txt"));
        }
        if self.paths.vectors.is_none() {
            let v = dir.join("vectors.vec");
            if v.is_file() {
                self.paths.vectors = Some(v);
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("model.ckpt"))
    }
}

/// A required input path that must name an existing file.
pub fn input(field: &str, path: Option<&PathBuf>) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::Config {
        field: field.into(),
        message: format!("not set (use the config file or set {DATA_ENV})"),
    })?;
    if !path.is_file() {
        return Err(Error::Config {
            field: field.into(),
            message: format!("{} is not a readable file", path.display()),
        });
    }
    Ok(path.clone())
}

pub fn optional_input(field: &str, path: Option<&PathBuf>) -> Result<Option<PathBuf>> {
    path.map(|p| input(field, Some(p))).transpose()
}

pub fn output_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
