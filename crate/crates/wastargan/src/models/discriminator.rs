//! Speaker-conditioned discriminator: a shared 4-layer convolutional trunk,
//! global average pooling, and one scalar output head per speaker selected by
//! the sample's speaker id.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv2dLayer, HeadBank};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub n_speakers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 32,
            n_speakers: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::Config("discriminator base_channels must be >= 1".into()));
        }
        if self.n_speakers < 1 {
            return Err(Error::Config("discriminator needs at least one speaker".into()));
        }
        Ok(())
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    store: ParamStore,
    trunk: Vec<Conv2dLayer>,
    heads: HeadBank,
}

impl Discriminator {
    pub fn new<R: Rng>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut store = ParamStore::new();
        let plan = [(1, 2 * c), (c, 4 * c), (2 * c, 8 * c), (4 * c, 8 * c)];
        let trunk = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                Conv2dLayer::init(
                    &mut store,
                    rng,
                    &format!("trunk{i}"),
                    cin,
                    cout,
                    (3, 4),
                    (2, 2),
                    (1, 1),
                )
            })
            .collect();
        let heads = HeadBank::init(&mut store, rng, "heads", config.n_speakers, 4 * c, 1);
        Ok(Discriminator {
            config,
            store,
            trunk,
            heads,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x [B, 1, D, T]`, one speaker id per sample; returns scores `[B]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, speakers: &[usize]) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(
                "discriminator_forward",
                format!("expected [B, 1, D, T], got {shape:?}"),
            ));
        }
        if speakers.len() != shape[0] {
            return Err(Error::shape(
                "discriminator_forward",
                format!("{} speaker ids for batch {}", speakers.len(), shape[0]),
            ));
        }
        if let Some(&bad) = speakers.iter().find(|&&s| s >= self.config.n_speakers) {
            return Err(Error::UnknownSpeaker(format!(
                "index {bad} out of range ({} speakers)",
                self.config.n_speakers
            )));
        }
        let mut h = x;
        for layer in &self.trunk {
            h = layer.apply(tape, &self.store, h);
            h = tape.glu(h);
        }
        let pooled = tape.mean_spatial(h);
        let scores = self.heads.apply(tape, &self.store, pooled, speakers);
        let batch = shape[0];
        Ok(tape.reshape(scores, &[batch]))
    }

    pub fn infer(&self, x: &Array4<f64>, speakers: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let out = self.forward(&mut tape, xv, speakers)?;
        Ok(tape.value(out).iter().copied().collect())
    }
}
