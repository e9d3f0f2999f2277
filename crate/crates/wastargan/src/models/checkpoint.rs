//! Checkpoint files: every parameter of the three models, full Adam state,
//! the sampler RNG, and the model configuration, in one container file.
//! Parameters are stored as raw f64 so a save/load round trip is bit-exact.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Discriminator, Generator, ModelConfig, SpeakerEncoder};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    iteration: u64,
    model_config: ModelConfig,
    speaker_table: Vec<String>,
    rng: serde_json::Value,
    adam_g: AdamMeta,
    adam_d: AdamMeta,
    adam_e: AdamMeta,
}

pub struct Checkpoint {
    pub iteration: u64,
    pub model_config: ModelConfig,
    pub speaker_table: Vec<String>,
    pub rng: ChaCha8Rng,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: SpeakerEncoder,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_e: Adam,
}

fn adam_meta(a: &Adam) -> AdamMeta {
    AdamMeta {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        t: a.state().0,
    }
}

fn pack_store(c: &mut Container, prefix: &str, store: &ParamStore, opt: &Adam) {
    for (name, value) in store.iter() {
        c.insert_f64(&format!("{prefix}.{name}"), value.clone());
    }
    let (_, m, v) = opt.state();
    for ((name, _), (mi, vi)) in store.iter().zip(m.iter().zip(v.iter())) {
        c.insert_f64(&format!("{prefix}.m.{name}"), mi.clone());
        c.insert_f64(&format!("{prefix}.v.{name}"), vi.clone());
    }
}

fn unpack_store(
    c: &Container,
    prefix: &str,
    store: &mut ParamStore,
    opt: &mut Adam,
    t: u64,
) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for name in &names {
        let arr = c
            .get_f64(&format!("{prefix}.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing array {prefix}.{name}")))?;
        store.set_by_name(name, arr.clone())?;
        let mi = c
            .get_f64(&format!("{prefix}.m.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing array {prefix}.m.{name}")))?;
        let vi = c
            .get_f64(&format!("{prefix}.v.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing array {prefix}.v.{name}")))?;
        m.push(mi.clone());
        v.push(vi.clone());
    }
    opt.load_state(t, m, v);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    iteration: u64,
    model_config: &ModelConfig,
    speaker_table: &[String],
    rng: &ChaCha8Rng,
    generator: &Generator,
    discriminator: &Discriminator,
    encoder: &SpeakerEncoder,
    opt_g: &Adam,
    opt_d: &Adam,
    opt_e: &Adam,
) -> Result<()> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        iteration,
        model_config: model_config.clone(),
        speaker_table: speaker_table.to_vec(),
        rng: serde_json::to_value(rng)?,
        adam_g: adam_meta(opt_g),
        adam_d: adam_meta(opt_d),
        adam_e: adam_meta(opt_e),
    };
    let mut c = Container::new(serde_json::to_value(&meta)?);
    pack_store(&mut c, "g", generator.params(), opt_g);
    pack_store(&mut c, "d", discriminator.params(), opt_d);
    pack_store(&mut c, "e", encoder.params(), opt_e);
    c.write(path)
}

/// Loads a checkpoint, rebuilding all models from the embedded config. When
/// `expected` is given, a differing embedded config is an error.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    if let Some(expected) = expected {
        if *expected != meta.model_config {
            return Err(Error::Checkpoint(
                "checkpoint model config does not match the requested config".into(),
            ));
        }
    }
    // Parameter values are overwritten below; the init rng is irrelevant.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut generator = Generator::new(meta.model_config.generator.clone(), &mut scratch)?;
    let mut discriminator =
        Discriminator::new(meta.model_config.discriminator.clone(), &mut scratch)?;
    let mut encoder = SpeakerEncoder::new(meta.model_config.encoder.clone(), &mut scratch)?;

    let mut opt_g = Adam::new(generator.params(), meta.adam_g.lr, meta.adam_g.beta1, meta.adam_g.beta2);
    let mut opt_d = Adam::new(
        discriminator.params(),
        meta.adam_d.lr,
        meta.adam_d.beta1,
        meta.adam_d.beta2,
    );
    let mut opt_e = Adam::new(encoder.params(), meta.adam_e.lr, meta.adam_e.beta1, meta.adam_e.beta2);
    opt_g.eps = meta.adam_g.eps;
    opt_d.eps = meta.adam_d.eps;
    opt_e.eps = meta.adam_e.eps;

    unpack_store(&c, "g", generator.params_mut(), &mut opt_g, meta.adam_g.t)?;
    unpack_store(&c, "d", discriminator.params_mut(), &mut opt_d, meta.adam_d.t)?;
    unpack_store(&c, "e", encoder.params_mut(), &mut opt_e, meta.adam_e.t)?;

    let rng: ChaCha8Rng = serde_json::from_value(meta.rng.clone())?;
    Ok(Checkpoint {
        iteration: meta.iteration,
        model_config: meta.model_config,
        speaker_table: meta.speaker_table,
        rng,
        generator,
        discriminator,
        encoder,
        opt_g,
        opt_d,
        opt_e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DiscriminatorConfig, EncoderConfig, GeneratorConfig};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                mcep_order: 7,
                base_channels: 4,
                n_bottleneck_blocks: 1,
                embedding_dim: 6,
                bottleneck_kernel: 3,
            },
            discriminator: DiscriminatorConfig {
                base_channels: 4,
                n_speakers: 2,
            },
            encoder: EncoderConfig {
                in_dim: 8,
                channels: 8,
                embedding_dim: 6,
                n_speakers: 2,
                kernel: 3,
            },
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vca");
        let cfg = tiny_model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Generator::new(cfg.generator.clone(), &mut rng).unwrap();
        let d = Discriminator::new(cfg.discriminator.clone(), &mut rng).unwrap();
        let e = SpeakerEncoder::new(cfg.encoder.clone(), &mut rng).unwrap();
        let og = Adam::new(g.params(), 2e-4, 0.5, 0.999);
        let od = Adam::new(d.params(), 1e-4, 0.5, 0.999);
        let oe = Adam::new(e.params(), 1e-4, 0.5, 0.999);
        let table = vec!["spk_a".to_string(), "spk_b".to_string()];

        save_checkpoint(&path, 42, &cfg, &table, &rng, &g, &d, &e, &og, &od, &oe).unwrap();
        let loaded = load_checkpoint(&path, Some(&cfg)).unwrap();

        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.speaker_table, table);
        for ((n1, v1), (n2, v2)) in g.params().iter().zip(loaded.generator.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "parameter {n1} not bit-exact");
        }
        // RNG state round-trips: both produce the same next values.
        let mut a = rng.clone();
        let mut b = loaded.rng.clone();
        for _ in 0..8 {
            assert_eq!(rand::Rng::gen::<u64>(&mut a), rand::Rng::gen::<u64>(&mut b));
        }
    }

    #[test]
    fn mismatched_config_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vca");
        let cfg = tiny_model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Generator::new(cfg.generator.clone(), &mut rng).unwrap();
        let d = Discriminator::new(cfg.discriminator.clone(), &mut rng).unwrap();
        let e = SpeakerEncoder::new(cfg.encoder.clone(), &mut rng).unwrap();
        let og = Adam::new(g.params(), 2e-4, 0.5, 0.999);
        let od = Adam::new(d.params(), 1e-4, 0.5, 0.999);
        let oe = Adam::new(e.params(), 1e-4, 0.5, 0.999);
        save_checkpoint(&path, 0, &cfg, &[], &rng, &g, &d, &e, &og, &od, &oe).unwrap();

        let mut other = cfg.clone();
        other.generator.n_bottleneck_blocks = 2;
        assert!(load_checkpoint(&path, Some(&other)).is_err());
        assert!(load_checkpoint(&path, Some(&cfg)).is_ok());
    }
}
