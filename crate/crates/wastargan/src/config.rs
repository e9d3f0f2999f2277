//! Run configuration: a TOML file with dotted-key command-line overrides.
//! Unknown keys anywhere are errors; every section has working defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::FeatureConfig;
use crate::convert::ConvertOptions;
use crate::error::{Error, Result};
use crate::eval::ClassifierConfig;
use crate::models::{DiscriminatorConfig, EncoderConfig, GeneratorConfig, ModelConfig};
use crate::training::TrainingConfig;

/// Environment variable overriding the feature cache directory.
pub const CACHE_DIR_ENV: &str = "WASTARGAN_CACHE_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub audio_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub classifier: ClassifierConfig,
    pub convert: ConvertOptions,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Derives the model bundle for a dataset with `n_speakers`, keeping the
    /// dimensions that must agree in sync: the feature order drives the
    /// generator height and encoder input, and the encoder embedding size
    /// drives the generator conditioning width.
    pub fn model_config(&self, n_speakers: usize) -> ModelConfig {
        let mut generator = self.generator.clone();
        generator.mcep_order = self.features.mcep_order;
        let mut encoder = self.encoder.clone();
        encoder.in_dim = self.features.mcep_order + 1;
        encoder.n_speakers = n_speakers;
        generator.embedding_dim = encoder.embedding_dim;
        let mut discriminator = self.discriminator.clone();
        discriminator.n_speakers = n_speakers;
        ModelConfig {
            generator,
            discriminator,
            encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.training.validate(&self.model_config(2))?;
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        if let Ok(env) = std::env::var(CACHE_DIR_ENV) {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        self.paths
            .cache_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("feature_cache"))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} traverses a non-table")))?;
    table.insert(
        parts.last().unwrap().to_string(),
        parse_override_value(raw),
    );
    Ok(())
}

/// Loads the config file (if any), applies dotted `key=value` overrides, and
/// deserializes strictly. A `--seed` flag overrides both training and
/// classifier seeds.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<RunConfig> {
    let mut doc: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Value>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let mut cfg: RunConfig = doc
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.training.seed = s;
        cfg.classifier.seed = s;
    }
    if let Some(dir) = out_dir {
        cfg.paths.out_dir = Some(dir.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = load_config(None, &[], None, None).unwrap();
        assert_eq!(cfg.features.mcep_order, 36);
        assert_eq!(cfg.training.batch_size, 8);
        assert_eq!(cfg.training.g_lr, 2e-4);
        assert_eq!(cfg.training.d_lr, 1e-4);
        assert!(!cfg.training.weights.use_identity);
    }

    #[test]
    fn file_and_overrides_compose() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[training]\nbatch_size = 4\n[features]\nmcep_order = 24\n",
        )
        .unwrap();
        let cfg = load_config(
            Some(&path),
            &[
                "training.batch_size=2".to_string(),
                "training.weights.lambda_cyc=3.5".to_string(),
                "generator.base_channels=16".to_string(),
            ],
            Some(99),
            None,
        )
        .unwrap();
        assert_eq!(cfg.training.batch_size, 2);
        assert_eq!(cfg.training.weights.lambda_cyc, 3.5);
        assert_eq!(cfg.generator.base_channels, 16);
        assert_eq!(cfg.features.mcep_order, 24);
        assert_eq!(cfg.training.seed, 99);
        // Derived model config keeps dimensions in sync.
        let mc = cfg.model_config(5);
        assert_eq!(mc.generator.mcep_order, 24);
        assert_eq!(mc.encoder.in_dim, 25);
        assert_eq!(mc.discriminator.n_speakers, 5);
        assert_eq!(mc.generator.embedding_dim, mc.encoder.embedding_dim);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[training]\nbatchsize = 4\n").unwrap();
        assert!(load_config(Some(&path), &[], None, None).is_err());
        assert!(load_config(None, &["training.nonsense=1".to_string()], None, None).is_err());
    }

    #[test]
    fn malformed_overrides_are_errors() {
        assert!(load_config(None, &["training.batch_size".to_string()], None, None).is_err());
        assert!(load_config(None, &["=3".to_string()], None, None).is_err());
    }

    #[test]
    fn env_var_overrides_cache_dir() {
        let cfg = load_config(None, &[], None, None).unwrap();
        std::env::set_var(CACHE_DIR_ENV, "/tmp/some_cache");
        assert_eq!(cfg.cache_dir(), PathBuf::from("/tmp/some_cache"));
        std::env::remove_var(CACHE_DIR_ENV);
        assert_eq!(cfg.cache_dir(), PathBuf::from("feature_cache"));
    }
}
