//! Acoustic feature pipeline: waveform I/O, vocoder analysis/synthesis,
//! mel-cepstral coding, F0 statistics and conversion, loudness normalization.

pub mod f0;
pub mod loudness;
pub mod mcep;
pub mod vocoder;
pub mod wav;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sample rate for the whole pipeline.
pub const SAMPLE_RATE: u32 = 22050;
/// Default analysis frame period in milliseconds.
pub const FRAME_PERIOD_MS: f64 = 5.0;
/// Default FFT size for vocoder analysis.
pub const FFT_SIZE: usize = 1024;
/// Default mel-cepstral order (order + 1 coefficients including c0).
pub const MCEP_ORDER: usize = 36;

/// Settings of the analysis front end. Every derived artifact (feature
/// caches, checkpoints) embeds these so mismatches are detectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_period_ms: f64,
    pub fft_size: usize,
    pub mcep_order: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: SAMPLE_RATE,
            frame_period_ms: FRAME_PERIOD_MS,
            fft_size: FFT_SIZE,
            mcep_order: MCEP_ORDER,
        }
    }
}

impl FeatureConfig {
    pub fn alpha(&self) -> f64 {
        mcep::alpha_for_rate(self.sample_rate)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_period_ms <= 0.0 {
            return Err(Error::Config("invalid sample rate or frame period".into()));
        }
        if self.fft_size < 4 || !self.fft_size.is_power_of_two() {
            return Err(Error::Config("fft_size must be a power of two".into()));
        }
        if self.mcep_order < 1 {
            return Err(Error::Config("mcep_order must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mono audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Vocoder decomposition of an utterance: per-frame F0 in Hz (0 means
/// unvoiced), spectral envelope (power, frames x bins), and aperiodicity in
/// [0, 1] of the same shape.
#[derive(Debug, Clone)]
pub struct VocoderAnalysis {
    pub f0: Array1<f64>,
    pub spectral_envelope: Array2<f64>,
    pub aperiodicity: Array2<f64>,
    pub frame_period_ms: f64,
}

impl VocoderAnalysis {
    pub fn new(
        f0: Array1<f64>,
        spectral_envelope: Array2<f64>,
        aperiodicity: Array2<f64>,
        frame_period_ms: f64,
    ) -> Result<Self> {
        let frames = f0.len();
        if spectral_envelope.nrows() != frames || aperiodicity.nrows() != frames {
            return Err(Error::shape(
                "vocoder_analysis",
                format!(
                    "frame counts differ: f0 {frames}, envelope {}, aperiodicity {}",
                    spectral_envelope.nrows(),
                    aperiodicity.nrows()
                ),
            ));
        }
        if frame_period_ms <= 0.0 {
            return Err(Error::Audio("frame period must be positive".into()));
        }
        if f0.iter().any(|&v| v < 0.0) {
            return Err(Error::Audio("negative f0".into()));
        }
        Ok(VocoderAnalysis {
            f0,
            spectral_envelope,
            aperiodicity,
            frame_period_ms,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.f0.len()
    }
}

/// Mel-cepstral coefficients, frames x (order + 1).
#[derive(Debug, Clone, PartialEq)]
pub struct McepSegment {
    pub coeffs: Array2<f64>,
}

impl McepSegment {
    pub fn new(coeffs: Array2<f64>) -> Result<Self> {
        if coeffs.nrows() == 0 {
            return Err(Error::shape("mcep_segment", "zero frames"));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Audio("non-finite mcep coefficient".into()));
        }
        Ok(McepSegment { coeffs })
    }

    pub fn n_frames(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn order(&self) -> usize {
        self.coeffs.ncols() - 1
    }
}

/// Per-speaker statistics of log F0 over voiced frames. `n_voiced == 0`
/// flags that mean/std are undefined (stored as 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogF0Stats {
    pub mean: f64,
    pub std: f64,
    pub n_voiced: usize,
}

impl LogF0Stats {
    pub fn is_defined(&self) -> bool {
        self.n_voiced > 0
    }
}
