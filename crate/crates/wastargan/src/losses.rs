//! Loss functions: the least-squares adversarial pair, cycle consistency,
//! speaker-embedding reconstruction, and the older StarGAN-style baseline
//! primitives (identity loss, domain-classifier loss, the literal
//! expectation-form adversarial pair, speaker-pair concatenation).
//!
//! These are plain evaluations over `ndarray` data, used for reporting and
//! tests; the training step computes the same quantities through the tape.
//! Cross-checks between the two routes live in the training tests.

use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor inside [`domain_cls_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Weighting of the generator-side objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_spk: f64,
    pub lambda_id: f64,
    /// The identity loss is a baseline primitive, disabled by default.
    pub use_identity: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_spk: 1.0,
            lambda_id: 5.0,
            use_identity: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cyc < 0.0 || self.lambda_spk < 0.0 || self.lambda_id < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training iteration's loss components; serialized as a log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub g_adv: f64,
    pub d_adv: f64,
    pub cyc: f64,
    pub spk_rec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<f64>,
    pub weighted_total_g: f64,
    pub weighted_total_d: f64,
    pub g_lr: f64,
    pub d_lr: f64,
    pub e_lr: f64,
    pub wall_clock_ms: f64,
}

/// Discriminator side of the least-squares objective:
/// `mean((d_real - 1)^2) + mean(d_fake^2)`.
pub fn lsgan_d_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::shape("lsgan_d_loss", "empty score batch"));
    }
    let real: f64 =
        d_real.iter().map(|&o| (o - 1.0) * (o - 1.0)).sum::<f64>() / d_real.len() as f64;
    let fake: f64 = d_fake.iter().map(|&o| o * o).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// Generator side of the least-squares objective: `mean((d_fake - 1)^2)`.
pub fn lsgan_g_loss(d_fake: &[f64]) -> Result<f64> {
    if d_fake.is_empty() {
        return Err(Error::shape("lsgan_g_loss", "empty score batch"));
    }
    Ok(d_fake.iter().map(|&o| (o - 1.0) * (o - 1.0)).sum::<f64>() / d_fake.len() as f64)
}

fn mean_abs_diff(op: &'static str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::shape(op, "empty tensors"));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Cycle consistency: mean absolute error between the source batch and its
/// there-and-back reconstruction.
pub fn cycle_loss(x: &ArrayD<f64>, x_cyc: &ArrayD<f64>) -> Result<f64> {
    mean_abs_diff("cycle_loss", x, x_cyc)
}

/// Identity mapping penalty (baseline primitive), same L1 contract.
pub fn identity_loss(x: &ArrayD<f64>, g_xx: &ArrayD<f64>) -> Result<f64> {
    mean_abs_diff("identity_loss", x, g_xx)
}

/// Speaker-embedding reconstruction: mean absolute error between the target
/// embedding batch and the embedding of the converted batch.
pub fn spk_rec_loss(e_target: &Array2<f64>, e_converted: &Array2<f64>) -> Result<f64> {
    mean_abs_diff(
        "spk_rec_loss",
        &e_target.clone().into_dyn(),
        &e_converted.clone().into_dyn(),
    )
}

/// Negative log-likelihood of the labeled speaker under a posterior batch
/// (baseline primitive), floored at [`PROB_FLOOR`].
pub fn domain_cls_loss(posteriors: &Array2<f64>, speakers: &[usize]) -> Result<f64> {
    let (b, n) = posteriors.dim();
    if speakers.len() != b {
        return Err(Error::shape(
            "domain_cls_loss",
            format!("{} labels for batch {b}", speakers.len()),
        ));
    }
    if b == 0 {
        return Err(Error::shape("domain_cls_loss", "empty batch"));
    }
    for (bi, row) in posteriors.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::shape(
                "domain_cls_loss",
                format!("row {bi} is not a probability vector (sum {sum})"),
            ));
        }
    }
    if let Some(&bad) = speakers.iter().find(|&&s| s >= n) {
        return Err(Error::UnknownSpeaker(format!("index {bad} of {n}")));
    }
    Ok(speakers
        .iter()
        .enumerate()
        .map(|(bi, &s)| -(posteriors[[bi, s]].max(PROB_FLOOR)).ln())
        .sum::<f64>()
        / b as f64)
}

/// The expectation-form adversarial pair of the original StarGAN recipe,
/// exactly as written: `g = -mean(d_fake)`,
/// `d = -mean(d_real) - mean(1 - d_fake)`. Unbounded by construction.
pub fn stargan_vc_adv_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::shape("stargan_vc_adv_losses", "empty score batch"));
    }
    let mean_fake = d_fake.iter().sum::<f64>() / d_fake.len() as f64;
    let mean_real = d_real.iter().sum::<f64>() / d_real.len() as f64;
    let g = -mean_fake;
    let d = -mean_real - (1.0 - mean_fake);
    Ok((g, d))
}

/// Speaker-pair conditioning vector: `[e_x, e_y]` concatenated.
pub fn concat_speaker_pair(e_x: &Array1<f64>, e_y: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::<f64>::zeros(e_x.len() + e_y.len());
    out.slice_mut(ndarray::s![..e_x.len()]).assign(e_x);
    out.slice_mut(ndarray::s![e_x.len()..]).assign(e_y);
    out
}

/// Raw loss components before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub g_adv: f64,
    pub d_adv: f64,
    pub cyc: f64,
    pub spk_rec: f64,
    pub id: Option<f64>,
    pub domain: Option<f64>,
}

/// Folds components into a [`LossReport`] with the declared weighted sums.
pub fn total_losses(c: &LossComponents, w: &LossWeights) -> LossReport {
    let mut total_g = c.g_adv + w.lambda_cyc * c.cyc + w.lambda_spk * c.spk_rec;
    if w.use_identity {
        if let Some(id) = c.id {
            total_g += w.lambda_id * id;
        }
    }
    LossReport {
        iteration: 0,
        g_adv: c.g_adv,
        d_adv: c.d_adv,
        cyc: c.cyc,
        spk_rec: c.spk_rec,
        id: c.id,
        domain: c.domain,
        weighted_total_g: total_g,
        weighted_total_d: c.d_adv,
        g_lr: 0.0,
        d_lr: 0.0,
        e_lr: 0.0,
        wall_clock_ms: 0.0,
    }
}
