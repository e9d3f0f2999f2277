//! The 2-1-2 generator: 2D downsampling, a 1D W-AdaIN bottleneck stack,
//! and 2D upsampling back to the input shape.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv1dLayer, Conv2dLayer, ConvT2dLayer};
use crate::error::{Error, Result};
use crate::layers::NORM_EPS;
use crate::nn::conv::conv_out_len;
use crate::nn::{init, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Mel-cepstral order; the feature "height" is order + 1.
    pub mcep_order: usize,
    /// Channels after the first downsampling block's GLU. The second block
    /// doubles this and the 1D bottleneck runs at four times it.
    pub base_channels: usize,
    pub n_bottleneck_blocks: usize,
    pub embedding_dim: usize,
    pub bottleneck_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            mcep_order: 36,
            base_channels: 64,
            n_bottleneck_blocks: 9,
            embedding_dim: 128,
            bottleneck_kernel: 5,
        }
    }
}

impl GeneratorConfig {
    pub fn feature_dim(&self) -> usize {
        self.mcep_order + 1
    }

    /// Input length must be divisible by this (two stride-2 stages).
    pub fn temporal_downsample(&self) -> usize {
        4
    }

    pub fn bottleneck_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bottleneck_blocks < 1 {
            return Err(Error::Config("n_bottleneck_blocks must be >= 1".into()));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(
                "base_channels must be even and >= 2 (GLU halves channels)".into(),
            ));
        }
        if self.bottleneck_kernel % 2 == 0 {
            return Err(Error::Config("bottleneck_kernel must be odd".into()));
        }
        if self.embedding_dim == 0 || self.mcep_order < 1 {
            return Err(Error::Config("embedding_dim and mcep_order must be positive".into()));
        }
        if self.feature_dim() < 5 {
            return Err(Error::Config("feature dimension too small to downsample".into()));
        }
        Ok(())
    }
}

struct BottleneckBlock {
    kernel: ParamId,
    bias: ParamId,
    gamma_w: ParamId,
    gamma_b: ParamId,
    beta_w: ParamId,
    beta_b: ParamId,
}

pub struct Generator {
    pub config: GeneratorConfig,
    store: ParamStore,
    down1: Conv2dLayer,
    down2: Conv2dLayer,
    to_1d: Conv1dLayer,
    blocks: Vec<BottleneckBlock>,
    from_1d: Conv1dLayer,
    up1: ConvT2dLayer,
    up2: ConvT2dLayer,
    out: Conv2dLayer,
}

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let d2 = Self::down_sizes(config.feature_dim()).1;
        let c1d_in = 2 * b * d2;
        let cb = config.bottleneck_channels();
        let e = config.embedding_dim;

        let mut store = ParamStore::new();
        let down1 = Conv2dLayer::init(&mut store, rng, "down1", 1, 2 * b, (3, 4), (2, 2), (1, 1));
        let down2 = Conv2dLayer::init(&mut store, rng, "down2", b, 4 * b, (3, 4), (2, 2), (1, 1));
        let to_1d = Conv1dLayer::init(&mut store, rng, "to_1d", c1d_in, 2 * cb, 1);

        let mut blocks = Vec::with_capacity(config.n_bottleneck_blocks);
        for i in 0..config.n_bottleneck_blocks {
            let name = format!("block{i}");
            // Kernel at unit scale: demodulation renormalizes it anyway.
            let kernel = store.add(
                &format!("{name}.kernel"),
                init::normal(rng, &[2 * cb, cb, config.bottleneck_kernel], 1.0),
            );
            let bias = store.add(&format!("{name}.bias"), init::zeros(&[2 * cb]));
            // Demodulation cancels the scale of gamma and all of beta; what
            // survives is the sign pattern of gamma (plus an eps-sized
            // leak), so gamma starts zero-centered to make that pattern
            // embedding-dependent from the first step.
            let gamma_w = store.add(&format!("{name}.gamma.w"), init::normal(rng, &[e, cb], 0.3));
            let gamma_b = store.add(&format!("{name}.gamma.b"), init::zeros(&[cb]));
            let beta_w = store.add(&format!("{name}.beta.w"), init::normal(rng, &[e, cb], 0.01));
            let beta_b = store.add(&format!("{name}.beta.b"), init::zeros(&[cb]));
            blocks.push(BottleneckBlock {
                kernel,
                bias,
                gamma_w,
                gamma_b,
                beta_w,
                beta_b,
            });
        }

        let from_1d = Conv1dLayer::init(&mut store, rng, "from_1d", cb, 2 * c1d_in, 1);
        let up1 = ConvT2dLayer::init(&mut store, rng, "up1", 2 * b, 2 * b, (3, 4), (2, 2), (1, 1));
        let up2 = ConvT2dLayer::init(&mut store, rng, "up2", b, b, (3, 4), (2, 2), (1, 1));
        let out = Conv2dLayer::init(&mut store, rng, "out", b / 2, 1, (3, 9), (1, 1), (1, 4));

        Ok(Generator {
            config,
            store,
            down1,
            down2,
            to_1d,
            blocks,
            from_1d,
            up1,
            up2,
            out,
        })
    }

    fn down_sizes(d0: usize) -> (usize, usize) {
        let d1 = conv_out_len(d0, 3, 2, 1);
        let d2 = conv_out_len(d1, 3, 2, 1);
        (d1, d2)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x [B, 1, D, T]` with `D = mcep_order + 1` and `T` divisible by 4;
    /// `e [B, embedding_dim]`. Output has the input's shape.
    pub fn forward(&self, tape: &mut Tape, x: Var, e: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.config.feature_dim() {
            return Err(Error::shape(
                "generator_forward",
                format!(
                    "expected [B, 1, {}, T], got {shape:?}",
                    self.config.feature_dim()
                ),
            ));
        }
        let (batch, d0, t0) = (shape[0], shape[2], shape[3]);
        if t0 % self.config.temporal_downsample() != 0 {
            return Err(Error::shape(
                "generator_forward",
                format!("T = {t0} not divisible by {}", self.config.temporal_downsample()),
            ));
        }
        let eshape = tape.value(e).shape().to_vec();
        if eshape != [batch, self.config.embedding_dim] {
            return Err(Error::shape(
                "generator_forward",
                format!(
                    "embedding {eshape:?} vs expected [{batch}, {}]",
                    self.config.embedding_dim
                ),
            ));
        }

        let (d1, d2) = Self::down_sizes(d0);
        let (t1, t2) = (t0 / 2, t0 / 4);
        let b = self.config.base_channels;
        let cb = self.config.bottleneck_channels();
        let store = &self.store;

        // 2D downsampling: conv + IN + GLU.
        let h = self.down1.apply(tape, store, x);
        let h = tape.instance_norm(h, NORM_EPS);
        let h = tape.glu(h);
        let h = self.down2.apply(tape, store, h);
        let h = tape.instance_norm(h, NORM_EPS);
        let h = tape.glu(h);

        // 2 -> 1: collapse (channels x reduced D) into 1D channels.
        let h = tape.reshape(h, &[batch, 2 * b * d2, t2]);
        let h = self.to_1d.apply(tape, store, h);
        let mut h = tape.glu(h);

        // W-AdaIN bottleneck stack.
        for block in &self.blocks {
            let gw = tape.param(store, block.gamma_w);
            let gb = tape.param(store, block.gamma_b);
            let bw = tape.param(store, block.beta_w);
            let bb = tape.param(store, block.beta_b);
            let gamma = tape.linear(e, gw, gb);
            let beta = tape.linear(e, bw, bb);
            let kernel = tape.param(store, block.kernel);
            let modulated = tape.wadain_modulate(kernel, gamma, beta, NORM_EPS);
            let conv = tape.conv1d_per_sample(h, modulated);
            let bias = tape.param(store, block.bias);
            let conv = tape.add_bias(conv, bias);
            h = tape.glu(conv);
        }
        debug_assert_eq!(tape.value(h).shape(), &[batch, cb, t2]);

        // 1 -> 2: restore the 2D layout.
        let h = self.from_1d.apply(tape, store, h);
        let h = tape.glu(h);
        let h = tape.reshape(h, &[batch, 2 * b, d2, t2]);

        // 2D upsampling mirrored onto the recorded sizes: convT + IN + GLU.
        let h = self.up1.apply(tape, store, h, (d1, t1));
        let h = tape.instance_norm(h, NORM_EPS);
        let h = tape.glu(h);
        let h = self.up2.apply(tape, store, h, (d0, t0));
        let h = tape.instance_norm(h, NORM_EPS);
        let h = tape.glu(h);

        Ok(self.out.apply(tape, store, h))
    }

    /// Inference helper: runs a batch through a throwaway tape.
    pub fn infer(&self, x: &Array4<f64>, e: &Array2<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let ev = tape.leaf(e.clone().into_dyn());
        let out = self.forward(&mut tape, xv, ev)?;
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap())
    }
}
