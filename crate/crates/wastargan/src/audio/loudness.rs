//! Integrated loudness measurement and gain normalization (EBU R128 / ITU-R
//! BS.1770 via the `ebur128` crate).

use ebur128::{EbuR128, Mode};

use super::Waveform;
use crate::error::{Error, Result};

/// Default normalization target.
pub const TARGET_LUFS: f64 = -23.0;

/// Outcome of [`normalize_loudness`]. `input_lufs` is `None` for digital
/// silence, in which case the waveform passes through unchanged.
#[derive(Debug, Clone)]
pub struct LoudnessNorm {
    pub waveform: Waveform,
    pub gain: f64,
    pub input_lufs: Option<f64>,
}

/// Integrated loudness in LUFS; `None` for silence (below the gating floor).
pub fn measure_lufs(w: &Waveform) -> Result<Option<f64>> {
    let mut meter = EbuR128::new(1, w.sample_rate, Mode::I)
        .map_err(|e| Error::Audio(format!("loudness meter: {e}")))?;
    meter
        .add_frames_f64(&w.samples)
        .map_err(|e| Error::Audio(format!("loudness meter: {e}")))?;
    let lufs = meter
        .loudness_global()
        .map_err(|e| Error::Audio(format!("loudness meter: {e}")))?;
    if lufs.is_finite() {
        Ok(Some(lufs))
    } else {
        Ok(None)
    }
}

/// Applies the single gain that brings integrated loudness to `target_lufs`.
/// A pure scale: the waveform shape is preserved.
pub fn normalize_loudness(w: &Waveform, target_lufs: f64) -> Result<LoudnessNorm> {
    match measure_lufs(w)? {
        None => Ok(LoudnessNorm {
            waveform: w.clone(),
            gain: 1.0,
            input_lufs: None,
        }),
        Some(input) => {
            let gain = 10f64.powf((target_lufs - input) / 20.0);
            let samples = w.samples.iter().map(|s| s * gain).collect();
            Ok(LoudnessNorm {
                waveform: Waveform::new(samples, w.sample_rate)?,
                gain,
                input_lufs: Some(input),
            })
        }
    }
}
