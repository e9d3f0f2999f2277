//! Speaker encoder: frame-local convolutional trunk over the cepstral
//! channels, statistic pooling over time, and speaker-conditioned embedding
//! heads.
//!
//! The default trunk kernel is 1, so the embedding is a function of the
//! multiset of frames: permuting frames leaves it unchanged, matching the
//! pooling contract. With no speaker id (unseen pairing at conversion time)
//! the mean of the trained heads stands in as a shared head; training always
//! routes through the per-speaker heads.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv1dLayer, HeadBank};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input feature dimension (mcep_order + 1).
    pub in_dim: usize,
    pub channels: usize,
    pub embedding_dim: usize,
    pub n_speakers: usize,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_dim: 37,
            channels: 64,
            embedding_dim: 128,
            n_speakers: 2,
            kernel: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim < 1 || self.channels < 1 || self.embedding_dim < 1 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.n_speakers < 1 {
            return Err(Error::Config("encoder needs at least one speaker".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("encoder kernel must be odd".into()));
        }
        Ok(())
    }
}

pub struct SpeakerEncoder {
    pub config: EncoderConfig,
    store: ParamStore,
    convs: Vec<Conv1dLayer>,
    heads: HeadBank,
}

impl SpeakerEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut store = ParamStore::new();
        let plan = [(config.in_dim, 2 * c), (c, 2 * c), (c, 2 * c)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                Conv1dLayer::init(&mut store, rng, &format!("conv{i}"), cin, cout, config.kernel)
            })
            .collect();
        let heads = HeadBank::init(
            &mut store,
            rng,
            "heads",
            config.n_speakers,
            2 * c,
            config.embedding_dim,
        );
        Ok(SpeakerEncoder {
            config,
            store,
            convs,
            heads,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x [B, D, T]` (cepstral coefficients as channels); embeddings `[B, E]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, speakers: Option<&[usize]>) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.in_dim {
            return Err(Error::shape(
                "speaker_encoder_forward",
                format!("expected [B, {}, T], got {shape:?}", self.config.in_dim),
            ));
        }
        if let Some(sp) = speakers {
            if sp.len() != shape[0] {
                return Err(Error::shape(
                    "speaker_encoder_forward",
                    format!("{} speaker ids for batch {}", sp.len(), shape[0]),
                ));
            }
            if let Some(&bad) = sp.iter().find(|&&s| s >= self.config.n_speakers) {
                return Err(Error::UnknownSpeaker(format!(
                    "index {bad} out of range ({} speakers)",
                    self.config.n_speakers
                )));
            }
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.apply(tape, &self.store, h);
            h = tape.glu(h);
        }
        let pooled = tape.stat_pool(h);
        Ok(match speakers {
            Some(sp) => self.heads.apply(tape, &self.store, pooled, sp),
            None => self.heads.apply_shared(tape, &self.store, pooled),
        })
    }

    pub fn infer(&self, x: &Array3<f64>, speakers: Option<&[usize]>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let out = self.forward(&mut tape, xv, speakers)?;
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn make(rng: &mut ChaCha8Rng) -> SpeakerEncoder {
        SpeakerEncoder::new(
            EncoderConfig {
                in_dim: 6,
                channels: 8,
                embedding_dim: 5,
                n_speakers: 3,
                kernel: 1,
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn time_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let enc = make(&mut rng);
        let x = Array::from_shape_simple_fn((1, 6, 7), || rand::Rng::gen::<f64>(&mut rng) - 0.5);
        let base = enc.infer(&x, Some(&[1])).unwrap();

        let perm = [6usize, 3, 0, 5, 1, 4, 2];
        let mut shuffled = Array3::<f64>::zeros((1, 6, 7));
        for (dst, &src) in perm.iter().enumerate() {
            shuffled
                .slice_mut(s![.., .., dst])
                .assign(&x.slice(s![.., .., src]));
        }
        let permuted = enc.infer(&shuffled, Some(&[1])).unwrap();
        let diff = (&base - &permuted).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "pooling not permutation invariant: {diff}");
    }

    #[test]
    fn shared_head_is_mean_of_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let enc = make(&mut rng);
        let x = Array::from_shape_simple_fn((1, 6, 9), || rand::Rng::gen::<f64>(&mut rng) - 0.5);
        let shared = enc.infer(&x, None).unwrap();
        let mut sum = Array2::<f64>::zeros((1, 5));
        for s in 0..3 {
            sum += &enc.infer(&x, Some(&[s])).unwrap();
        }
        sum.mapv_inplace(|v| v / 3.0);
        let diff = (&shared - &sum).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "shared head differs from head mean by {diff}");
    }

    #[test]
    fn out_of_range_speaker_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let enc = make(&mut rng);
        let x = Array3::<f64>::zeros((1, 6, 4));
        assert!(enc.infer(&x, Some(&[3])).is_err());
    }
}
