//! Trainable models: generator, discriminator, speaker encoder.
//!
//! Speaker ids are plain indices into the manifest's speaker table; every
//! forward pass validates them against the configured head count.

pub mod checkpoint;
pub mod discriminator;
pub mod encoder;
pub mod generator;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use encoder::{EncoderConfig, SpeakerEncoder};
pub use generator::{Generator, GeneratorConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{init, ParamId, ParamStore, Tape, Var};

/// Bundle of the three architectures; embedded in checkpoints so a loaded
/// model is rebuilt exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn with_speakers(n_speakers: usize) -> Self {
        ModelConfig {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig {
                n_speakers,
                ..DiscriminatorConfig::default()
            },
            encoder: EncoderConfig {
                n_speakers,
                ..EncoderConfig::default()
            },
        }
    }
}

pub(crate) struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2dLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init::kaiming(
                rng,
                &[c_out, c_in, kernel.0, kernel.1],
                c_in * kernel.0 * kernel.1,
            ),
        );
        let b = store.add(&format!("{name}.b"), init::zeros(&[c_out]));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub(crate) struct ConvT2dLayer {
    w: ParamId,
    b: ParamId,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvT2dLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init::kaiming(
                rng,
                &[c_in, c_out, kernel.0, kernel.1],
                c_in * kernel.0 * kernel.1,
            ),
        );
        let b = store.add(&format!("{name}.b"), init::zeros(&[c_out]));
        ConvT2dLayer { w, b, stride, pad }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        out_hw: (usize, usize),
    ) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_t2d(x, w, b, self.stride, self.pad, out_hw)
    }
}

pub(crate) struct Conv1dLayer {
    w: ParamId,
    b: ParamId,
}

impl Conv1dLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init::kaiming(rng, &[c_out, c_in, kernel], c_in * kernel),
        );
        let b = store.add(&format!("{name}.b"), init::zeros(&[c_out]));
        Conv1dLayer { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b)
    }
}

pub(crate) struct HeadBank {
    w: ParamId,
    b: ParamId,
}

impl HeadBank {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        n_heads: usize,
        features: usize,
        out: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init::normal(rng, &[n_heads, features, out], (1.0 / features as f64).sqrt()),
        );
        let b = store.add(&format!("{name}.b"), init::zeros(&[n_heads, out]));
        HeadBank { w, b }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        speakers: &[usize],
    ) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.indexed_linear(x, w, b, speakers)
    }

    /// Speaker-agnostic fallback: the arithmetic mean of all heads, applied
    /// as an ordinary linear map. Inference-only; gradients stop at the
    /// averaged copy.
    pub fn apply_shared(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.get(self.w);
        let b = store.get(self.b);
        let w_mean = w.mean_axis(ndarray::Axis(0)).unwrap();
        let b_mean = b.mean_axis(ndarray::Axis(0)).unwrap();
        let wl = tape.leaf(w_mean.into_dyn());
        let bl = tape.leaf(b_mean.into_dyn());
        tape.linear(x, wl, bl)
    }
}
