//! Run configuration: INI file, then `TIGER_SEED`, then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use typerank_core::evaluation::{AblationMode, DEFAULT_KS};
use typerank_core::seq_model::Dims;
use typerank_core::synthetic::SyntheticConfig;
use typerank_core::training::Hyperparams;

pub const SEED_ENV: &str = "TIGER_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("[{section}] {key}: invalid value {value:?}")]
    Value { section: String, key: String, value: String },
    #[error("unknown key [{section}] {key}")]
    UnknownKey { section: String, key: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Paths {
    pub corpus_root: PathBuf,
    pub workdir: PathBuf,
    pub checkpoints: PathBuf,
}

/// Extra model and data settings that are not hyperparameters proper.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub dims: Dims,
    pub n_buckets: usize,
    pub min_df: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dims: Dims::default(), n_buckets: 64, min_df: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTraining {
    /// Overrides for the similarity stage; `None` reuses the shared value.
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Cap on contrastive instances (evenly strided subsample); 0 keeps all.
    pub max_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSettings {
    pub repos: usize,
    pub files_per_repo: usize,
    pub functions_per_file: usize,
    pub heldout_files_per_repo: usize,
    pub common_classes_per_repo: usize,
    pub rare_classes_per_repo: usize,
    pub unseen_classes_per_repo: usize,
}

impl From<SyntheticConfig> for SyntheticSettings {
    fn from(c: SyntheticConfig) -> Self {
        SyntheticSettings {
            repos: c.repos,
            files_per_repo: c.files_per_repo,
            functions_per_file: c.functions_per_file,
            heldout_files_per_repo: c.heldout_files_per_repo,
            common_classes_per_repo: c.common_classes_per_repo,
            rare_classes_per_repo: c.rare_classes_per_repo,
            unseen_classes_per_repo: c.unseen_classes_per_repo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub hyper: Hyperparams,
    pub sim: SimTraining,
    pub model: ModelConfig,
    pub ks: Vec<usize>,
    pub mode: Option<AblationModeName>,
    pub synthetic: SyntheticSettings,
}

/// Serializable wrapper so the config hash covers the ablation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct AblationModeName(&'static str);

impl AblationModeName {
    pub fn mode(self) -> AblationMode {
        AblationMode::parse(self.0).expect("constructed from a valid mode")
    }
}

impl From<AblationMode> for AblationModeName {
    fn from(m: AblationMode) -> Self {
        AblationModeName(m.name())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths {
                corpus_root: PathBuf::from("corpus"),
                workdir: PathBuf::from("work"),
                checkpoints: PathBuf::from("work/checkpoints"),
            },
            hyper: Hyperparams { epochs: 8, learning_rate: 1e-3, ..Hyperparams::default() },
            sim: SimTraining { epochs: Some(12), learning_rate: Some(1e-3), max_instances: 3000 },
            model: ModelConfig::default(),
            ks: DEFAULT_KS.to_vec(),
            mode: None,
            synthetic: SyntheticConfig::default().into(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub beam_k: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub mode: Option<String>,
    pub workdir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

fn parse_val<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Value {
        section: section.to_string(),
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_mode(value: &str) -> Result<AblationModeName, ConfigError> {
    AblationMode::parse(value).map(Into::into).ok_or_else(|| ConfigError::Value {
        section: "infer".into(),
        key: "mode".into(),
        value: value.into(),
    })
}

impl RunConfig {
    pub fn synthetic_config(&self) -> SyntheticConfig {
        let s = &self.synthetic;
        SyntheticConfig {
            repos: s.repos,
            files_per_repo: s.files_per_repo,
            functions_per_file: s.functions_per_file,
            heldout_files_per_repo: s.heldout_files_per_repo,
            common_classes_per_repo: s.common_classes_per_repo,
            rare_classes_per_repo: s.rare_classes_per_repo,
            unseen_classes_per_repo: s.unseen_classes_per_repo,
            seed: self.hyper.seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn sim_hyper(&self) -> Hyperparams {
        Hyperparams {
            epochs: self.sim.epochs.unwrap_or(self.hyper.epochs),
            learning_rate: self.sim.learning_rate.unwrap_or(self.hyper.learning_rate),
            ..self.hyper
        }
    }

    /// Parses INI text. Relative paths are resolved against `base_dir`.
    pub fn from_ini_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = RunConfig::default();
        let mut checkpoints_set = false;
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                let unknown = || ConfigError::UnknownKey { section: section.to_string(), key: key.to_string() };
                let p = |v: &str| base_dir.join(v.trim());
                match (section, key) {
                    ("paths", "corpus_root") => cfg.paths.corpus_root = p(value),
                    ("paths", "workdir") => cfg.paths.workdir = p(value),
                    ("paths", "checkpoints") => {
                        cfg.paths.checkpoints = p(value);
                        checkpoints_set = true;
                    }
                    ("train", "epochs") => cfg.hyper.epochs = parse_val(section, key, value)?,
                    ("train", "learning_rate") => cfg.hyper.learning_rate = parse_val(section, key, value)?,
                    ("train", "batch_size") => cfg.hyper.batch_size = parse_val(section, key, value)?,
                    ("train", "seed") => cfg.hyper.seed = parse_val(section, key, value)?,
                    ("train", "dropout") => cfg.hyper.dropout = parse_val(section, key, value)?,
                    ("train", "sim_epochs") => cfg.sim.epochs = Some(parse_val(section, key, value)?),
                    ("train", "sim_learning_rate") => cfg.sim.learning_rate = Some(parse_val(section, key, value)?),
                    ("train", "sim_max_instances") => cfg.sim.max_instances = parse_val(section, key, value)?,
                    ("model", "d_model") => cfg.model.dims.d_model = parse_val(section, key, value)?,
                    ("model", "n_layers") => cfg.model.dims.n_layers = parse_val(section, key, value)?,
                    ("model", "n_heads") => cfg.model.dims.n_heads = parse_val(section, key, value)?,
                    ("model", "d_ff") => cfg.model.dims.d_ff = parse_val(section, key, value)?,
                    ("model", "max_seq_len") => cfg.model.dims.max_seq_len = parse_val(section, key, value)?,
                    ("model", "n_buckets") => cfg.model.n_buckets = parse_val(section, key, value)?,
                    ("model", "min_df") => cfg.model.min_df = parse_val(section, key, value)?,
                    ("infer", "beam_k") => cfg.hyper.beam_k = parse_val(section, key, value)?,
                    ("infer", "mode") => cfg.mode = Some(parse_mode(value)?),
                    ("infer", "ks") => {
                        cfg.ks =
                            value.split(',').map(|k| parse_val(section, key, k)).collect::<Result<Vec<usize>, _>>()?;
                    }
                    ("synthetic", "repos") => cfg.synthetic.repos = parse_val(section, key, value)?,
                    ("synthetic", "files_per_repo") => cfg.synthetic.files_per_repo = parse_val(section, key, value)?,
                    ("synthetic", "functions_per_file") => {
                        cfg.synthetic.functions_per_file = parse_val(section, key, value)?
                    }
                    ("synthetic", "heldout_files_per_repo") => {
                        cfg.synthetic.heldout_files_per_repo = parse_val(section, key, value)?
                    }
                    ("synthetic", "common_classes_per_repo") => {
                        cfg.synthetic.common_classes_per_repo = parse_val(section, key, value)?
                    }
                    ("synthetic", "rare_classes_per_repo") => {
                        cfg.synthetic.rare_classes_per_repo = parse_val(section, key, value)?
                    }
                    ("synthetic", "unseen_classes_per_repo") => {
                        cfg.synthetic.unseen_classes_per_repo = parse_val(section, key, value)?
                    }
                    _ => return Err(unknown()),
                }
            }
        }
        if !checkpoints_set {
            cfg.paths.checkpoints = cfg.paths.workdir.join("checkpoints");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_ini_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies `TIGER_SEED` (if set) and then the flags.
    pub fn apply_overrides(&mut self, env_seed: Option<&str>, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(s) = env_seed {
            self.hyper.seed = parse_val("env", SEED_ENV, s)?;
        }
        if let Some(w) = &o.workdir {
            let default_ckpt = self.paths.checkpoints == self.paths.workdir.join("checkpoints");
            self.paths.workdir = w.clone();
            if default_ckpt {
                self.paths.checkpoints = w.join("checkpoints");
            }
        }
        if let Some(c) = &o.corpus {
            self.paths.corpus_root = c.clone();
        }
        if let Some(v) = o.seed {
            self.hyper.seed = v;
        }
        if let Some(v) = o.beam_k {
            self.hyper.beam_k = v;
        }
        if let Some(v) = o.epochs {
            self.hyper.epochs = v;
            self.sim.epochs = None;
        }
        if let Some(v) = o.lr {
            self.hyper.learning_rate = v;
            self.sim.learning_rate = None;
        }
        if let Some(v) = o.batch {
            self.hyper.batch_size = v;
        }
        if let Some(m) = &o.mode {
            self.mode = Some(parse_mode(m)?);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hyper.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let d = &self.model.dims;
        if d.d_model == 0 || d.n_heads == 0 || !d.d_model.is_multiple_of(d.n_heads) {
            return Err(ConfigError::Invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                d.d_model, d.n_heads
            )));
        }
        if d.max_seq_len < 8 {
            return Err(ConfigError::Invalid("max_seq_len must be at least 8".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(ConfigError::Invalid("ks must be a nonempty list of positive counts".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_resolves_paths() {
        let cfg = RunConfig::from_ini_str(
            "[paths]\nworkdir = out\n[train]\nepochs = 7\nlearning_rate = 0.001\n[infer]\nbeam_k = 3\nks = 1, 2\nmode = ranking-only\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.paths.workdir, PathBuf::from("/base/out"));
        assert_eq!(cfg.paths.checkpoints, PathBuf::from("/base/out/checkpoints"));
        assert_eq!(cfg.hyper.epochs, 7);
        assert_eq!(cfg.hyper.beam_k, 3);
        assert_eq!(cfg.ks, vec![1, 2]);
        assert_eq!(cfg.mode.unwrap().mode(), AblationMode::RankingOnly);
    }

    #[test]
    fn default_beam_width_and_cutoffs() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.hyper.beam_k, 5);
        assert_eq!(cfg.ks, vec![1, 3, 5]);
    }

    #[test]
    fn bad_values_and_keys_are_errors() {
        assert!(matches!(
            RunConfig::from_ini_str("[train]\nepochs = many\n", Path::new(".")),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::from_ini_str("[train]\nepoch = 1\n", Path::new(".")),
            Err(ConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn env_then_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(Some("42"), &Overrides::default()).unwrap();
        assert_eq!(cfg.hyper.seed, 42);
        cfg.apply_overrides(Some("42"), &Overrides { seed: Some(7), ..Default::default() }).unwrap();
        assert_eq!(cfg.hyper.seed, 7);
        assert!(cfg.apply_overrides(None, &Overrides { beam_k: Some(0), ..Default::default() }).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.hyper.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
