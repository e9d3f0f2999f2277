//! Mel-cepstral coding of spectral envelopes.
//!
//! `envelope_to_mcep` takes a per-frame power envelope to a compact warped
//! cepstrum: log-amplitude spectrum, inverse FFT to the real cepstrum, then
//! the standard all-pass frequency-warping recursion truncated at the target
//! order. `mcep_to_envelope` unwarps back to a long cepstrum and evaluates the
//! cosine expansion. The pair is inverse up to the order truncation, which the
//! round-trip tests calibrate on synthetic spectra.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::parallel::par_map_indexed;

/// Power floor applied before taking logs.
const POWER_FLOOR: f64 = 1e-20;

/// All-pass warping coefficient approximating the mel scale at a given
/// sample rate.
pub fn alpha_for_rate(sample_rate: u32) -> f64 {
    match sample_rate {
        0..=9000 => 0.31,
        9001..=11500 => 0.35,
        11501..=13000 => 0.37,
        13001..=17000 => 0.42,
        17001..=25000 => 0.455,
        25001..=35000 => 0.50,
        _ => 0.544,
    }
}

/// Frequency-warping recursion: maps a cepstrum to the alpha-warped axis,
/// truncating/extending to `order_out + 1` coefficients. `alpha = 0` is the
/// identity (up to length).
pub fn freqt(c: &[f64], order_out: usize, alpha: f64) -> Vec<f64> {
    let b = 1.0 - alpha * alpha;
    let mut g = vec![0.0; order_out + 1];
    let mut d = vec![0.0; order_out + 1];
    for &ci in c.iter().rev() {
        d[0] = ci + alpha * g[0];
        if order_out >= 1 {
            d[1] = b * g[0] + alpha * g[1];
        }
        for j in 2..=order_out {
            d[j] = g[j - 1] + alpha * (g[j] - d[j - 1]);
        }
        std::mem::swap(&mut d, &mut g);
    }
    g
}

fn check_bins(bins: usize, op: &'static str) -> Result<usize> {
    if bins < 2 || (bins - 1) & (bins - 2) != 0 {
        return Err(Error::shape(
            op,
            format!("bins must be 2^n + 1, got {bins}"),
        ));
    }
    Ok(2 * (bins - 1))
}

/// Encodes a power envelope `[frames, bins]` (bins = fft/2 + 1) into
/// mel-cepstral coefficients `[frames, order + 1]`.
pub fn envelope_to_mcep(env: &Array2<f64>, order: usize, alpha: f64) -> Result<Array2<f64>> {
    if order < 1 {
        return Err(Error::shape("envelope_to_mcep", "order must be >= 1"));
    }
    let bins = env.ncols();
    let fft_size = check_bins(bins, "envelope_to_mcep")?;
    let frames = env.nrows();

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(fft_size);

    let rows = par_map_indexed(frames, |t| {
        let mut buf: Vec<Complex<f64>> = (0..fft_size)
            .map(|k| {
                let bin = if k < bins { k } else { fft_size - k };
                Complex::new(0.5 * env[[t, bin]].max(POWER_FLOOR).ln(), 0.0)
            })
            .collect();
        ifft.process(&mut buf);
        // One-sided cepstrum for the cosine expansion: c0 as is, doubled
        // interior terms, Nyquist term single.
        let mut ceps = vec![0.0; bins];
        ceps[0] = buf[0].re / fft_size as f64;
        for n in 1..bins - 1 {
            ceps[n] = 2.0 * buf[n].re / fft_size as f64;
        }
        ceps[bins - 1] = buf[bins - 1].re / fft_size as f64;
        freqt(&ceps, order, alpha)
    });

    let mut out = Array2::<f64>::zeros((frames, order + 1));
    for (t, row) in rows.into_iter().enumerate() {
        for (i, v) in row.into_iter().enumerate() {
            out[[t, i]] = v;
        }
    }
    Ok(out)
}

/// Decodes mel-cepstral coefficients back into a power envelope with
/// `fft_bins` bins.
pub fn mcep_to_envelope(mcep: &Array2<f64>, fft_bins: usize, alpha: f64) -> Result<Array2<f64>> {
    let fft_size = check_bins(fft_bins, "mcep_to_envelope")?;
    let frames = mcep.nrows();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);

    let rows = par_map_indexed(frames, |t| {
        let row: Vec<f64> = mcep.row(t).to_vec();
        let ceps = freqt(&row, fft_bins - 1, -alpha);
        // Rebuild the symmetric cepstrum, undoing the one-sided doubling.
        let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
        buf[0].re = ceps[0];
        for n in 1..fft_bins - 1 {
            buf[n].re = ceps[n] / 2.0;
            buf[fft_size - n].re = ceps[n] / 2.0;
        }
        buf[fft_bins - 1].re = ceps[fft_bins - 1];
        fft.process(&mut buf);
        (0..fft_bins)
            .map(|k| (2.0 * buf[k].re).exp())
            .collect::<Vec<f64>>()
    });

    let mut out = Array2::<f64>::zeros((frames, fft_bins));
    for (t, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            out[[t, k]] = v;
        }
    }
    Ok(out)
}
