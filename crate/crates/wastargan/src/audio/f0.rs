//! Log-F0 statistics and the linear log-domain pitch transform.

use super::LogF0Stats;
use crate::error::{Error, Result};

/// Mean and population std of `ln f0` over voiced frames (`f0 > 0`). With no
/// voiced frames the stats are flagged undefined via `n_voiced == 0`.
pub fn logf0_stats(f0: &[f64]) -> LogF0Stats {
    let voiced: Vec<f64> = f0.iter().filter(|&&v| v > 0.0).map(|v| v.ln()).collect();
    let n = voiced.len();
    if n == 0 {
        return LogF0Stats {
            mean: 0.0,
            std: 0.0,
            n_voiced: 0,
        };
    }
    let mean = voiced.iter().sum::<f64>() / n as f64;
    let var = voiced.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    LogF0Stats {
        mean,
        std: var.sqrt(),
        n_voiced: n,
    }
}

/// Maps voiced frames by `exp(tgt.mean + tgt.std * (ln f0 - src.mean) / src.std)`;
/// unvoiced frames stay 0. A degenerate source (`std == 0`) maps every voiced
/// frame to `exp(tgt.mean)`, the limit the formula supports.
pub fn transform_logf0(f0: &[f64], src: &LogF0Stats, tgt: &LogF0Stats) -> Result<Vec<f64>> {
    if !src.is_defined() || !tgt.is_defined() {
        return Err(Error::DegenerateF0Source);
    }
    Ok(f0
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                0.0
            } else if src.std == 0.0 {
                tgt.mean.exp()
            } else {
                (tgt.mean + tgt.std * (v.ln() - src.mean) / src.std).exp()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_contour_stats() {
        let f0 = vec![200.0; 50];
        let s = logf0_stats(&f0);
        assert!((s.mean - 200f64.ln()).abs() < 1e-12);
        assert!(s.std < 1e-12);
        assert_eq!(s.n_voiced, 50);
    }

    #[test]
    fn all_unvoiced_contour() {
        let s = logf0_stats(&[0.0; 10]);
        assert_eq!(s.n_voiced, 0);
        assert!(!s.is_defined());
    }

    #[test]
    fn stats_skip_unvoiced_frames() {
        // Hand computation over {ln 200, ln 300}.
        let s = logf0_stats(&[200.0, 0.0, 300.0]);
        assert_eq!(s.n_voiced, 2);
        let m = (200f64.ln() + 300f64.ln()) / 2.0;
        let v = ((200f64.ln() - m).powi(2) + (300f64.ln() - m).powi(2)) / 2.0;
        assert!((s.mean - m).abs() < 1e-12);
        assert!((s.std - v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identity_when_src_equals_tgt() {
        let f0 = vec![180.0, 0.0, 220.0, 260.0];
        let s = logf0_stats(&f0);
        let out = transform_logf0(&f0, &s, &s).unwrap();
        for (a, b) in out.iter().zip(&f0) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn unvoiced_maps_to_unvoiced_and_voiced_stays_positive() {
        let src = LogF0Stats { mean: 5.3, std: 0.2, n_voiced: 10 };
        let tgt = LogF0Stats { mean: 4.8, std: 0.1, n_voiced: 10 };
        let out = transform_logf0(&[0.0, 150.0, 900.0], &src, &tgt).unwrap();
        assert_eq!(out[0], 0.0);
        assert!(out[1] > 0.0 && out[2] > 0.0);
    }

    #[test]
    fn hand_case_from_affine_formula() {
        // ln f0 = 5.5, src (5.3, 0.2), tgt (4.8, 0.1) -> ln f0' = 4.9.
        let src = LogF0Stats { mean: 5.3, std: 0.2, n_voiced: 5 };
        let tgt = LogF0Stats { mean: 4.8, std: 0.1, n_voiced: 5 };
        let out = transform_logf0(&[5.5f64.exp()], &src, &tgt).unwrap();
        assert!((out[0] - 4.9f64.exp()).abs() < 1e-9);
        assert!((out[0] - 134.2898).abs() < 0.01);
    }

    #[test]
    fn degenerate_source_maps_to_target_mean() {
        let src = LogF0Stats { mean: 5.0, std: 0.0, n_voiced: 3 };
        let tgt = LogF0Stats { mean: 4.5, std: 0.2, n_voiced: 3 };
        let out = transform_logf0(&[100.0, 200.0, 0.0], &src, &tgt).unwrap();
        assert!((out[0] - 4.5f64.exp()).abs() < 1e-12);
        assert!((out[1] - 4.5f64.exp()).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn undefined_stats_are_an_error() {
        let undef = logf0_stats(&[0.0]);
        let ok = LogF0Stats { mean: 5.0, std: 0.1, n_voiced: 4 };
        assert!(transform_logf0(&[100.0], &undef, &ok).is_err());
        assert!(transform_logf0(&[100.0], &ok, &undef).is_err());
    }

    #[test]
    fn statistics_matching_property() {
        // transform(c, stats(c), tgt) has log stats equal to tgt within 1e-9.
        let f0 = vec![120.0, 0.0, 180.0, 240.0, 200.0, 0.0, 160.0];
        let src = logf0_stats(&f0);
        let tgt = LogF0Stats { mean: 5.1, std: 0.33, n_voiced: 99 };
        let out = transform_logf0(&f0, &src, &tgt).unwrap();
        let got = logf0_stats(&out);
        assert!((got.mean - tgt.mean).abs() < 1e-9);
        assert!((got.std - tgt.std).abs() < 1e-9);
        assert_eq!(got.n_voiced, src.n_voiced);
    }
}
