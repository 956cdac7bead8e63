//! Run configuration: where the data comes from and how discovery runs.

use std::path::{Path, PathBuf};

use opal_surrogate::data::{generate_synthetic, load_csv, CsvSchema, Dataset, SyntheticTask};
use opal_surrogate::opal::{derive_seed, OpalConfig};
use opal_surrogate::{OpalError, Result};
use serde::{Deserialize, Serialize};

/// A CSV schema given inline or as a path to a JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Inline(CsvSchema),
    File(PathBuf),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: SchemaSource,
    },
    Synthetic {
        /// Defaults to a stream derived from the top-level seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(flatten)]
        task: SyntheticTask,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    /// Points on each predictive-curve grid.
    pub grid_points: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { grid_points: 50 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub pretrain: Option<DataSource>,
    pub opal: OpalConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub plot: PlotConfig,
}

impl RunConfig {
    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if let Some(p) = &mut cfg.pretrain {
            p.resolve(base);
        }
        if let Some(o) = &mut cfg.out {
            *o = base.join(&*o);
        }
        if cfg.plot.grid_points < 2 {
            return Err(OpalError::Config("plot.grid_points must be at least 2".into()));
        }
        cfg.opal.validate()?;
        Ok(cfg)
    }

    /// Applies a seed override and makes the discovery seed follow the top-level one.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.opal.seed = self.seed;
        self
    }

    pub fn training_data(&self) -> Result<Dataset<f64>> {
        self.data.load(derive_seed(self.seed, &[0]))
    }

    pub fn pretraining_data(&self) -> Result<Option<Dataset<f64>>> {
        self.pretrain
            .as_ref()
            .map(|p| p.load(derive_seed(self.seed, &[1])))
            .transpose()
    }
}

impl DataSource {
    fn resolve(&mut self, base: &Path) {
        if let DataSource::Csv { path, schema } = self {
            *path = base.join(&*path);
            if let SchemaSource::File(p) = schema {
                *p = base.join(&*p);
            }
        }
    }

    fn load(&self, default_seed: u64) -> Result<Dataset<f64>> {
        match self {
            DataSource::Csv { path, schema } => {
                let schema = match schema {
                    SchemaSource::Inline(s) => s.clone(),
                    SchemaSource::File(p) => CsvSchema::from_json_file(p)?,
                };
                load_csv(path, &schema)
            }
            DataSource::Synthetic { seed, task } => generate_synthetic(task, seed.unwrap_or(default_seed)),
        }
    }
}
