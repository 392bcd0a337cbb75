//! Flat TOML run configuration. Every key is optional; command-line flags
//! override file values.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use tialign_core::instruction::BuildOptions;
use tialign_core::pipeline::{EvalHitMode, RunOptions};
use tialign_core::HitMode;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub image_root: Option<PathBuf>,

    pub backend: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Serve images by URL from this base instead of inlining them.
    pub image_base_url: Option<String>,
    pub mock_table: Option<PathBuf>,
    /// Stage-one overrides for `two-stage`; unset keys fall back to the
    /// main backend settings.
    pub element_endpoint: Option<String>,
    pub element_model: Option<String>,
    pub element_mock_table: Option<PathBuf>,

    pub seed: Option<u64>,
    pub include_elements: Option<bool>,
    pub include_confidences: Option<bool>,
    pub include_prompt_type: Option<bool>,
    pub perturbation_epsilon: Option<u8>,
    pub tau: Option<u8>,
    pub hit_mode: Option<HitMode>,
    pub eval_hit_mode: Option<EvalHitMode>,

    pub augment_fraction: Option<f64>,
    pub ensemble_spec: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<u32>,
    pub top_k: Option<u32>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            context: format!("cannot read config {}", path.display()),
            source,
        })?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.resolve_relative(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    /// Paths in a config file are relative to the file's directory.
    fn resolve_relative(&mut self, base: &Path) {
        for path in [
            &mut self.dataset_path,
            &mut self.output_dir,
            &mut self.image_root,
            &mut self.mock_table,
            &mut self.element_mock_table,
            &mut self.ensemble_spec,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn tau(&self) -> u8 {
        self.tau.unwrap_or(tialign_core::score_codec::DEFAULT_TAU)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        self.dataset_path
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset given (positional argument or `dataset_path`)".into()))
    }

    /// Images resolve against `image_root`, or the dataset's directory.
    pub fn image_root(&self) -> PathBuf {
        self.image_root.clone().unwrap_or_else(|| {
            self.dataset_path
                .as_deref()
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.unwrap_or(60.0))
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            include_elements: self.include_elements.unwrap_or(false),
            include_confidences: self.include_confidences.unwrap_or(false),
            include_prompt_type: self.include_prompt_type.unwrap_or(false),
            perturbation_epsilon: self.perturbation_epsilon.unwrap_or(0),
            seed: self.seed(),
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            build: self.build_options(),
            tau: self.tau(),
            hit_mode: self.hit_mode.unwrap_or_default(),
            concurrency: self.concurrency.unwrap_or(1),
        }
    }

    /// Checks ranges and that every referenced input exists.
    pub fn check(&self) -> Result<(), CliError> {
        if !(1..=7).contains(&self.tau()) {
            return Err(CliError::Config(format!("tau {} outside 1..=7", self.tau())));
        }
        if self.concurrency == Some(0) {
            return Err(CliError::Config("concurrency must be at least 1".into()));
        }
        if let Some(t) = self.timeout_secs {
            if !(t.is_finite() && t > 0.0) {
                return Err(CliError::Config(format!("timeout_secs {t} must be positive")));
            }
        }
        for (key, path) in [
            ("dataset_path", &self.dataset_path),
            ("image_root", &self.image_root),
            ("mock_table", &self.mock_table),
            ("element_mock_table", &self.element_mock_table),
            ("ensemble_spec", &self.ensemble_spec),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(CliError::Missing {
                        key,
                        path: path.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}
