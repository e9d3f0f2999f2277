//! Vocoder analysis/synthesis backend.
//!
//! The pipeline talks to a [`Vocoder`] trait so the backend is swappable; the
//! built-in [`LiteVocoder`] provides a self-contained, deterministic
//! implementation: cumulative mean normalized difference pitch tracking,
//! cepstrally smoothed spectral envelopes, a per-frame scalar aperiodicity,
//! and pulse-plus-noise synthesis through minimum-phase envelope responses.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use std::sync::Arc;

use super::{VocoderAnalysis, Waveform};
use crate::error::{Error, Result};
use crate::parallel::par_map_indexed;

pub trait Vocoder: Send + Sync {
    fn analyze(&self, w: &Waveform, frame_period_ms: f64) -> Result<VocoderAnalysis>;
    fn synthesize(&self, a: &VocoderAnalysis, sample_rate: u32) -> Result<Waveform>;
}

#[derive(Debug, Clone)]
pub struct LiteVocoder {
    pub fft_size: usize,
    pub f0_floor: f64,
    pub f0_ceil: f64,
    /// Seed for the noise component of synthesis; fixed so synthesis is a
    /// pure function of its inputs.
    pub noise_seed: u64,
}

impl Default for LiteVocoder {
    fn default() -> Self {
        LiteVocoder {
            fft_size: super::FFT_SIZE,
            f0_floor: 70.0,
            f0_ceil: 500.0,
            noise_seed: 0,
        }
    }
}

/// Voicing decision thresholds for the difference function.
const VOICED_THRESHOLD: f64 = 0.15;
const UNVOICED_CUTOFF: f64 = 0.35;
const SILENCE_POWER: f64 = 1e-8;
const POWER_FLOOR: f64 = 1e-20;

impl LiteVocoder {
    fn plan(&self) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        let mut planner = FftPlanner::<f64>::new();
        (
            planner.plan_fft_forward(self.fft_size),
            planner.plan_fft_inverse(self.fft_size),
        )
    }

    /// Pitch of one zero-padded segment via the cumulative mean normalized
    /// difference function with parabolic refinement. Returns 0 for unvoiced.
    fn frame_f0(&self, segment: &[f64], fs: f64) -> f64 {
        let n = segment.len();
        let half = n / 2;
        let power = segment.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if power < SILENCE_POWER {
            return 0.0;
        }
        let tau_min = (fs / self.f0_ceil).floor().max(2.0) as usize;
        let tau_max = ((fs / self.f0_floor).ceil() as usize).min(half - 1);
        if tau_min >= tau_max {
            return 0.0;
        }

        let mut diff = vec![0.0f64; tau_max + 1];
        for tau in 1..=tau_max {
            let mut acc = 0.0;
            for j in 0..half {
                let d = segment[j] - segment[j + tau];
                acc += d * d;
            }
            diff[tau] = acc;
        }
        // Cumulative mean normalization.
        let mut cmndf = vec![1.0f64; tau_max + 1];
        let mut running = 0.0;
        for tau in 1..=tau_max {
            running += diff[tau];
            cmndf[tau] = if running > 0.0 {
                diff[tau] * tau as f64 / running
            } else {
                1.0
            };
        }

        // First dip under the threshold wins; otherwise the global minimum.
        let mut best = tau_min;
        for tau in tau_min..=tau_max {
            if cmndf[tau] < cmndf[best] {
                best = tau;
            }
            if cmndf[tau] < VOICED_THRESHOLD {
                let mut t = tau;
                while t + 1 <= tau_max && cmndf[t + 1] < cmndf[t] {
                    t += 1;
                }
                best = t;
                break;
            }
        }
        if cmndf[best] > UNVOICED_CUTOFF {
            return 0.0;
        }
        // Parabolic interpolation around the minimum.
        let tau = if best > tau_min && best < tau_max {
            let (a, b, c) = (cmndf[best - 1], cmndf[best], cmndf[best + 1]);
            let denom = a - 2.0 * b + c;
            if denom.abs() > 1e-12 {
                best as f64 + 0.5 * (a - c) / denom
            } else {
                best as f64
            }
        } else {
            best as f64
        };
        fs / tau
    }

    /// Cepstrally smoothed log power spectrum of a windowed segment.
    fn frame_envelope(
        &self,
        segment: &[f64],
        window: &[f64],
        window_energy: f64,
        f0: f64,
        fs: f64,
        fft: &Arc<dyn Fft<f64>>,
        ifft: &Arc<dyn Fft<f64>>,
    ) -> Vec<f64> {
        let n = self.fft_size;
        let bins = n / 2 + 1;
        let mut buf: Vec<Complex<f64>> = segment
            .iter()
            .zip(window)
            .map(|(&s, &w)| Complex::new(s * w, 0.0))
            .collect();
        fft.process(&mut buf);

        let mut logp = vec![0.0f64; n];
        for k in 0..bins {
            let p = buf[k].norm_sqr() / window_energy;
            logp[k] = (p + POWER_FLOOR).ln();
        }
        for k in 1..bins - 1 {
            logp[n - k] = logp[k];
        }

        // Lifter below the pitch quefrency to strip harmonic structure.
        let q_cut = if f0 > 0.0 {
            ((0.8 * fs / f0).round() as usize).clamp(8, n / 2 - 1)
        } else {
            60
        };
        let mut ceps: Vec<Complex<f64>> =
            logp.iter().map(|&v| Complex::new(v, 0.0)).collect();
        ifft.process(&mut ceps);
        let scale = 1.0 / n as f64;
        let mut lifted = vec![Complex::new(0.0, 0.0); n];
        for q in 0..n {
            let dist = q.min(n - q);
            if dist <= q_cut {
                lifted[q] = ceps[q] * scale;
            }
        }
        fft.process(&mut lifted);
        (0..bins).map(|k| lifted[k].re.exp()).collect()
    }

    /// Minimum-phase impulse response of a power envelope row.
    fn min_phase_response(
        &self,
        env: &[f64],
        fft: &Arc<dyn Fft<f64>>,
        ifft: &Arc<dyn Fft<f64>>,
    ) -> Vec<f64> {
        let n = self.fft_size;
        let bins = env.len();
        let mut logamp = vec![Complex::new(0.0, 0.0); n];
        for k in 0..bins {
            logamp[k] = Complex::new(0.5 * (env[k].max(POWER_FLOOR)).ln(), 0.0);
        }
        for k in 1..bins - 1 {
            logamp[n - k] = logamp[k];
        }
        ifft.process(&mut logamp);
        // Fold to the minimum-phase cepstrum.
        let scale = 1.0 / n as f64;
        let mut mp = vec![Complex::new(0.0, 0.0); n];
        mp[0] = logamp[0] * scale;
        for q in 1..n / 2 {
            mp[q] = logamp[q] * (2.0 * scale);
        }
        mp[n / 2] = logamp[n / 2] * scale;
        fft.process(&mut mp);
        let mut spectrum: Vec<Complex<f64>> = mp.iter().map(|c| c.exp()).collect();
        ifft.process(&mut spectrum);
        spectrum.iter().map(|c| c.re * scale).collect()
    }
}

impl Vocoder for LiteVocoder {
    fn analyze(&self, w: &Waveform, frame_period_ms: f64) -> Result<VocoderAnalysis> {
        if w.samples.is_empty() {
            return Err(Error::Audio("empty waveform".into()));
        }
        if !(4000..=48000).contains(&w.sample_rate) {
            return Err(Error::Audio(format!(
                "unsupported sample rate {}",
                w.sample_rate
            )));
        }
        if frame_period_ms <= 0.0 {
            return Err(Error::Audio("frame period must be positive".into()));
        }
        let fs = w.sample_rate as f64;
        let n = self.fft_size;
        let bins = n / 2 + 1;
        let period_samples = frame_period_ms * fs / 1000.0;
        let n_frames = (w.samples.len() as f64 / period_samples).floor() as usize + 1;

        let window: Vec<f64> = (0..n)
            .map(|i| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
            })
            .collect();
        let window_energy: f64 = window.iter().map(|v| v * v).sum();
        let (fft, ifft) = self.plan();

        let frames = par_map_indexed(n_frames, |i| {
            let center = (i as f64 * period_samples).round() as isize;
            let mut segment = vec![0.0f64; n];
            for (j, slot) in segment.iter_mut().enumerate() {
                let idx = center - (n / 2) as isize + j as isize;
                if idx >= 0 && (idx as usize) < w.samples.len() {
                    *slot = w.samples[idx as usize];
                }
            }
            let f0 = self.frame_f0(&segment, fs);
            let env =
                self.frame_envelope(&segment, &window, window_energy, f0, fs, &fft, &ifft);
            // Scalar aperiodicity from the normalized difference residual.
            let ap = if f0 > 0.0 {
                let tau = (fs / f0).round() as usize;
                let half = n / 2;
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..half.min(n - tau) {
                    let d = segment[j] - segment[j + tau];
                    num += d * d;
                    den += segment[j] * segment[j] + segment[j + tau] * segment[j + tau];
                }
                if den > 0.0 {
                    (num / den).sqrt().clamp(0.01, 1.0)
                } else {
                    1.0
                }
            } else {
                1.0
            };
            (f0, env, ap)
        });

        let mut f0 = Array1::<f64>::zeros(n_frames);
        let mut envelope = Array2::<f64>::zeros((n_frames, bins));
        let mut aperiodicity = Array2::<f64>::zeros((n_frames, bins));
        for (i, (fi, env, ap)) in frames.into_iter().enumerate() {
            f0[i] = fi;
            for (k, v) in env.into_iter().enumerate() {
                envelope[[i, k]] = v;
            }
            aperiodicity.row_mut(i).fill(ap);
        }
        VocoderAnalysis::new(f0, envelope, aperiodicity, frame_period_ms)
    }

    fn synthesize(&self, a: &VocoderAnalysis, sample_rate: u32) -> Result<Waveform> {
        let n_frames = a.n_frames();
        if a.spectral_envelope.nrows() != n_frames || a.aperiodicity.nrows() != n_frames {
            return Err(Error::shape(
                "synthesize",
                format!(
                    "frame counts differ: f0 {n_frames}, envelope {}, aperiodicity {}",
                    a.spectral_envelope.nrows(),
                    a.aperiodicity.nrows()
                ),
            ));
        }
        if n_frames == 0 {
            return Err(Error::Audio("no frames to synthesize".into()));
        }
        let n = self.fft_size;
        let bins = n / 2 + 1;
        if a.spectral_envelope.ncols() != bins {
            return Err(Error::shape(
                "synthesize",
                format!(
                    "envelope bins {} incompatible with fft size {n}",
                    a.spectral_envelope.ncols()
                ),
            ));
        }
        let fs = sample_rate as f64;
        let period_samples = a.frame_period_ms * fs / 1000.0;
        let out_len = (n_frames as f64 * period_samples).round() as usize;
        let (fft, ifft) = self.plan();

        let frame_at = |t: usize| -> usize {
            ((t as f64 / period_samples).round() as usize).min(n_frames - 1)
        };

        // Per-frame minimum-phase responses (periodic excitation filter).
        let responses = par_map_indexed(n_frames, |i| {
            let env: Vec<f64> = a.spectral_envelope.row(i).to_vec();
            self.min_phase_response(&env, &fft, &ifft)
        });

        let mut out = vec![0.0f64; out_len + n];

        // Pulse excitation through the per-frame responses.
        let mut phase = 0.99f64;
        for t in 0..out_len {
            let fi = frame_at(t);
            let f0 = a.f0[fi];
            if f0 <= 0.0 {
                continue;
            }
            phase += f0 / fs;
            if phase >= 1.0 {
                phase -= 1.0;
                let ap = a.aperiodicity[[fi, 0]].clamp(0.0, 1.0);
                let amp = (fs / f0).sqrt() * (1.0 - ap).max(0.0).sqrt();
                let h = &responses[fi];
                for (j, &hv) in h.iter().enumerate() {
                    out[t + j] += amp * hv;
                }
            }
        }

        // Noise component: random-phase spectra shaped by the envelope and
        // aperiodicity, overlap-added with a COLA hop.
        let hop = n / 4;
        let window: Vec<f64> = (0..n)
            .map(|i| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut start = 0usize;
        while start < out_len {
            let fi = frame_at((start + n / 2).min(out_len.saturating_sub(1)));
            let mut spec = vec![Complex::new(0.0, 0.0); n];
            for k in 1..bins - 1 {
                let mag = (a.spectral_envelope[[fi, k]]
                    * a.aperiodicity[[fi, k]].clamp(0.0, 1.0)
                    * n as f64)
                    .max(0.0)
                    .sqrt();
                let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                let c = Complex::from_polar(mag, theta);
                spec[k] = c;
                spec[n - k] = c.conj();
            }
            ifft.process(&mut spec);
            let scale = 1.0 / n as f64 / 2.0; // COLA factor for hann at n/4 hop
            for j in 0..n {
                if start + j < out.len() {
                    out[start + j] += spec[j].re * scale * window[j] * 2.0;
                }
            }
            start += hop;
        }

        out.truncate(out_len);
        Waveform::new(out, sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (22050.0 * secs).round() as usize;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin())
                .collect(),
            22050,
        )
        .unwrap()
    }

    /// Independent oracle: naive time-domain autocorrelation peak.
    fn autocorr_pitch(samples: &[f64], fs: f64) -> f64 {
        let n = samples.len().min(4096);
        let x = &samples[..n];
        let (lo, hi) = ((fs / 500.0) as usize, (fs / 70.0) as usize);
        let mut best_tau = lo;
        let mut best = f64::MIN;
        for tau in lo..=hi.min(n / 2) {
            let mut acc = 0.0;
            for j in 0..n - tau {
                acc += x[j] * x[j + tau];
            }
            if acc > best {
                best = acc;
                best_tau = tau;
            }
        }
        fs / best_tau as f64
    }

    fn median_voiced(f0: &Array1<f64>) -> f64 {
        let mut v: Vec<f64> = f0.iter().copied().filter(|&x| x > 0.0).collect();
        assert!(!v.is_empty(), "no voiced frames");
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn silence_is_all_unvoiced_with_expected_frame_count() {
        let voc = LiteVocoder::default();
        let w = Waveform::new(vec![0.0; 22050], 22050).unwrap();
        let a = voc.analyze(&w, 5.0).unwrap();
        assert!(a.f0.iter().all(|&v| v == 0.0));
        let expected = (1000.0f64 / 5.0).floor() as usize + 1;
        assert!((a.n_frames() as isize - expected as isize).abs() <= 1);
    }

    #[test]
    fn pure_tone_pitch_matches_autocorrelation_oracle() {
        let voc = LiteVocoder::default();
        let w = tone(220.0, 1.0, 0.6);
        let a = voc.analyze(&w, 5.0).unwrap();
        let med = median_voiced(&a.f0);
        assert!((med - 220.0).abs() / 220.0 < 0.02, "median f0 {med}");
        let oracle = autocorr_pitch(&w.samples, 22050.0);
        assert!((med - oracle).abs() / oracle < 0.03, "vs oracle {oracle}");
    }

    #[test]
    fn empty_waveform_is_an_error() {
        let voc = LiteVocoder::default();
        let w = Waveform::new(vec![], 22050).unwrap();
        assert!(voc.analyze(&w, 5.0).is_err());
    }

    #[test]
    fn round_trip_preserves_duration_and_pitch() {
        let voc = LiteVocoder::default();
        let w = tone(220.0, 1.0, 0.6);
        let a = voc.analyze(&w, 5.0).unwrap();
        let syn = voc.synthesize(&a, 22050).unwrap();
        let dur_err = (syn.duration_secs() - w.duration_secs()).abs();
        assert!(dur_err < 0.005, "duration error {dur_err}s");
        assert!(syn.samples.iter().all(|v| v.is_finite()));

        let a2 = voc.analyze(&syn, 5.0).unwrap();
        let med = median_voiced(&a2.f0);
        assert!(
            (med - 220.0).abs() / 220.0 < 0.02,
            "re-analyzed f0 {med}"
        );
    }

    #[test]
    fn mismatched_frame_counts_error() {
        let voc = LiteVocoder::default();
        let bins = voc.fft_size / 2 + 1;
        let a = VocoderAnalysis {
            f0: Array1::zeros(10),
            spectral_envelope: Array2::ones((9, bins)),
            aperiodicity: Array2::ones((10, bins)),
            frame_period_ms: 5.0,
        };
        assert!(voc.synthesize(&a, 22050).is_err());
    }
}
