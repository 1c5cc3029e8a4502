use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trajflow::degsim::DataConfig;
use trajflow::lfm::{FieldConfig, LfmConfig};
use trajflow::rae::{RaeConfig, RaeTrainConfig};
use trajflow::sampler::SolverConfig;

use crate::error::{CliError, CliResult};

/// One JSON document driving every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub rae: RaeSection,
    #[serde(default)]
    pub lfm: LfmConfig,
    #[serde(default)]
    pub sampler: SolverConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaeSection {
    pub model: RaeConfig,
    pub train: RaeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Times at which every eval scene is integrated and scored.
    pub t_grid: Vec<f64>,
    /// Target times of the NFE profile.
    pub nfe_times: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            t_grid: uniform_grid(21),
            nfe_times: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
        }
    }
}

/// `n` evenly spaced times covering `[0, 1]`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            data: DataConfig::default(),
            rae: RaeSection::default(),
            lfm: LfmConfig::default(),
            sampler: SolverConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parse and validate. Errors name the offending key path.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("key '{path}': {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        fn key(k: &'static str) -> impl Fn(trajflow::Error) -> CliError {
            move |e| CliError::Config(format!("key '{k}': {e}"))
        }
        self.data.validate().map_err(key("data"))?;
        self.rae.model.validate().map_err(key("rae.model"))?;
        self.lfm.validate().map_err(key("lfm"))?;
        self.sampler.validate().map_err(key("sampler"))?;
        let m = &self.rae.model;
        if m.channels != 1 || m.height != self.data.size || m.width != self.data.size {
            return Err(CliError::Config(format!(
                "key 'rae.model': {}x{}x{} input does not match data.size {} (grayscale)",
                m.channels, m.height, m.width, self.data.size
            )));
        }
        if self.rae.train.batch == 0 {
            return Err(CliError::Config("key 'rae.train.batch': must be positive".into()));
        }
        if self.data.train_scales.len() < 2 {
            return Err(CliError::Config(
                "key 'data.train_scales': need at least two training scales".into(),
            ));
        }
        let FieldConfig { latent_dim, .. } = self.lfm.field;
        if latent_dim != m.latent_dim {
            return Err(CliError::Config(format!(
                "key 'lfm.field.latent_dim': {latent_dim} differs from rae.model.latent_dim {}",
                m.latent_dim
            )));
        }
        for (name, grid) in [("eval.t_grid", &self.eval.t_grid), ("eval.nfe_times", &self.eval.nfe_times)] {
            if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(CliError::Config(format!("key '{name}': times must lie in [0, 1]")));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CliError::Config(format!("key '{name}': times must be strictly ascending")));
            }
        }
        Ok(())
    }

    /// Write the effective configuration as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join("config.json");
        fs::create_dir_all(dir).map_err(|e| CliError::output("config", dir, e))?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::output("config", &path, e))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::output("config", &path, e))
    }
}
