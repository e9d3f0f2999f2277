//! Conditional normalization building blocks.
//!
//! Instance normalization, conditional IN, adaptive IN, gated linear units,
//! and weight-adaptive instance normalization (W-AdaIN), which moves the
//! affine-then-standardize step from the feature map onto the convolution
//! kernel itself: the kernel is scaled and shifted per input channel from the
//! speaker embedding, then standardized across its output-channel axis before
//! the convolution runs.
//!
//! These are pure forward evaluations over `ndarray` tensors, generic over
//! `f32`/`f64`. The differentiable versions used in training live in
//! [`crate::nn::tape`] and call back into the same math.
//!
//! Conventions:
//! - feature maps are `[B, C, T]` or `[B, C, H, T]`
//! - a shared 1D kernel is `[I, J, K]` with `I` the output channels, `J` the
//!   input channels, `K` the kernel width
//! - per-batch affine parameters are `[B, J]`
//! - all standard deviations are population (divide by the count), and the
//!   stabilizer `eps` is added to sigma, not to the variance

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, NdFloat};

use crate::error::{Error, Result};
use crate::nn::conv::conv1d_per_sample;
use crate::parallel::par_map_indexed;

/// Default sigma stabilizer for every normalization in the crate.
pub const NORM_EPS: f64 = 1e-5;

/// Per-batch affine parameters (gamma, beta), each `[B, J]`.
#[derive(Debug, Clone)]
pub struct AffineParams<F> {
    pub gamma: Array2<F>,
    pub beta: Array2<F>,
}

impl<F: NdFloat> AffineParams<F> {
    pub fn new(gamma: Array2<F>, beta: Array2<F>) -> Result<Self> {
        if gamma.dim() != beta.dim() {
            return Err(Error::shape(
                "affine_params",
                format!("gamma {:?} vs beta {:?}", gamma.dim(), beta.dim()),
            ));
        }
        Ok(AffineParams { gamma, beta })
    }
}

fn flatten_spatial<F: NdFloat>(f: &ArrayD<F>) -> Result<(usize, usize, usize)> {
    let shape = f.shape();
    if shape.len() < 3 {
        return Err(Error::shape(
            "feature_map",
            format!("expected [B, C, spatial...], got {shape:?}"),
        ));
    }
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    Ok((b, c, s))
}

/// Per-(batch, channel) standardization over all spatial positions, no
/// learned affine.
pub fn instance_norm<F: NdFloat>(f: &ArrayD<F>, eps: F) -> Result<ArrayD<F>> {
    let (b, c, s) = flatten_spatial(f)?;
    let shape = f.shape().to_vec();
    let flat = f
        .to_shape((b, c, s))
        .map_err(|e| Error::shape("instance_norm", e.to_string()))?;
    let mut out = Array3::<F>::zeros((b, c, s));
    let count = F::from(s).unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let slice = flat.index_axis(Axis(0), bi);
            let row = slice.index_axis(Axis(0), ci);
            let mean = row.sum() / count;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let denom = var.sqrt() + eps;
            let mut dst = out.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            dst.assign(&row.mapv(|v| (v - mean) / denom));
        }
    }
    out.into_shape_with_order(shape)
        .map_err(|e| Error::shape("instance_norm", e.to_string()))
        .map(|a| a.into_dyn())
}

/// Conditional instance normalization: `gamma * IN(f) + beta` per channel.
pub fn cin<F: NdFloat>(f: &ArrayD<F>, params: &AffineParams<F>, eps: F) -> Result<ArrayD<F>> {
    let (b, c, s) = flatten_spatial(f)?;
    if params.gamma.dim() != (b, c) {
        return Err(Error::shape(
            "cin",
            format!("affine {:?} vs feature (B={b}, C={c})", params.gamma.dim()),
        ));
    }
    let shape = f.shape().to_vec();
    let normed = instance_norm(f, eps)?;
    let flat = normed
        .to_shape((b, c, s))
        .map_err(|e| Error::shape("cin", e.to_string()))?;
    let mut out = Array3::<F>::zeros((b, c, s));
    for bi in 0..b {
        for ci in 0..c {
            let g = params.gamma[[bi, ci]];
            let be = params.beta[[bi, ci]];
            let src = flat.index_axis(Axis(0), bi);
            let row = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            dst.assign(&row.mapv(|v| g * v + be));
        }
    }
    out.into_shape_with_order(shape)
        .map_err(|e| Error::shape("cin", e.to_string()))
        .map(|a| a.into_dyn())
}

/// Adaptive instance normalization: the affine parameters come from linear
/// maps applied to a per-sample embedding, then [`cin`] runs as usual.
pub fn adain<F: NdFloat>(
    f: &ArrayD<F>,
    embedding: &ArrayView2<F>,
    gamma_map: (&ArrayView2<F>, &[F]),
    beta_map: (&ArrayView2<F>, &[F]),
    eps: F,
) -> Result<ArrayD<F>> {
    let params = affine_from_embedding(embedding, gamma_map, beta_map)?;
    cin(f, &params, eps)
}

/// Applies the two linear maps `(weight [E, C], bias [C])` to an embedding
/// batch `[B, E]`, yielding [`AffineParams`] of shape `[B, C]`.
pub fn affine_from_embedding<F: NdFloat>(
    embedding: &ArrayView2<F>,
    gamma_map: (&ArrayView2<F>, &[F]),
    beta_map: (&ArrayView2<F>, &[F]),
) -> Result<AffineParams<F>> {
    let (b, e) = embedding.dim();
    let check = |name: &'static str, w: &ArrayView2<F>, bias: &[F]| -> Result<usize> {
        if w.dim().0 != e || w.dim().1 != bias.len() {
            return Err(Error::shape(
                name,
                format!("map {:?} with bias {} vs embedding dim {e}", w.dim(), bias.len()),
            ));
        }
        Ok(w.dim().1)
    };
    let c = check("adain_gamma_map", gamma_map.0, gamma_map.1)?;
    check("adain_beta_map", beta_map.0, beta_map.1)?;

    let mut gamma = embedding.dot(gamma_map.0);
    let mut beta = embedding.dot(beta_map.0);
    for bi in 0..b {
        for ci in 0..c {
            gamma[[bi, ci]] = gamma[[bi, ci]] + gamma_map.1[ci];
            beta[[bi, ci]] = beta[[bi, ci]] + beta_map.1[ci];
        }
    }
    AffineParams::new(gamma, beta)
}

/// Gated linear unit over the channel axis: the first half of the channels is
/// gated by the sigmoid of the second half.
pub fn glu<F: NdFloat>(f: &ArrayD<F>) -> Result<ArrayD<F>> {
    let shape = f.shape().to_vec();
    if shape.len() < 2 || shape[1] % 2 != 0 {
        return Err(Error::shape(
            "glu",
            format!("channel axis must be even, got {shape:?}"),
        ));
    }
    let half = shape[1] / 2;
    let a = f.slice_axis(Axis(1), ndarray::Slice::from(0..half));
    let b = f.slice_axis(Axis(1), ndarray::Slice::from(half..shape[1]));
    let one = F::one();
    let gated = &a.to_owned() * &b.mapv(|v| one / (one + (-v).exp()));
    Ok(gated)
}

/// W-AdaIN kernel modulation and demodulation.
///
/// The shared kernel `w [I, J, K]` is transformed per batch element by
/// `gamma, beta [B, J]` broadcast over `I` and `K`:
///
/// ```text
/// w*[b,i,j,k]  = gamma[b,j] * w[i,j,k] + beta[b,j]
/// w**[b,i,j,k] = (w*[b,i,j,k] - mu[b,j,k]) / (sigma[b,j,k] + eps)
/// ```
///
/// where `mu`/`sigma` are the population statistics of `w*` across the
/// output-channel axis `I`. The result has zero mean and (up to `eps`) unit
/// std over `i` for every `(b, j, k)`.
pub fn wadain_modulate<F: NdFloat + Send + Sync>(
    w: &ArrayView3<F>,
    gamma: &ArrayView2<F>,
    beta: &ArrayView2<F>,
    eps: F,
) -> Result<Array4<F>> {
    let (i_dim, j_dim, k_dim) = w.dim();
    let (b_dim, jg) = gamma.dim();
    if i_dim < 2 {
        return Err(Error::shape(
            "wadain_modulate",
            format!("output-channel dimension must be >= 2, got {i_dim}"),
        ));
    }
    if jg != j_dim || beta.dim() != (b_dim, j_dim) {
        return Err(Error::shape(
            "wadain_modulate",
            format!(
                "kernel [I={i_dim}, J={j_dim}, K={k_dim}] vs gamma {:?} beta {:?}",
                gamma.dim(),
                beta.dim()
            ),
        ));
    }

    let count = F::from(i_dim).unwrap();
    let per_batch = par_map_indexed(b_dim, |b| {
        let mut wstar = Array3::<F>::zeros((i_dim, j_dim, k_dim));
        for j in 0..j_dim {
            let g = gamma[[b, j]];
            let be = beta[[b, j]];
            for i in 0..i_dim {
                for k in 0..k_dim {
                    wstar[[i, j, k]] = g * w[[i, j, k]] + be;
                }
            }
        }
        let mean = wstar.sum_axis(Axis(0)) / count;
        let mut var = Array2::<F>::zeros((j_dim, k_dim));
        for i in 0..i_dim {
            for j in 0..j_dim {
                for k in 0..k_dim {
                    let d = wstar[[i, j, k]] - mean[[j, k]];
                    var[[j, k]] = var[[j, k]] + d * d;
                }
            }
        }
        var.mapv_inplace(|v| (v / count).sqrt());
        for i in 0..i_dim {
            for j in 0..j_dim {
                for k in 0..k_dim {
                    wstar[[i, j, k]] =
                        (wstar[[i, j, k]] - mean[[j, k]]) / (var[[j, k]] + eps);
                }
            }
        }
        wstar
    });

    let mut out = Array4::<F>::zeros((b_dim, i_dim, j_dim, k_dim));
    for (b, sample) in per_batch.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&sample);
    }
    Ok(out)
}

/// Full W-AdaIN convolution: modulate the kernel per sample, then run the
/// per-sample stride-1 "same" 1D convolution.
pub fn wadain_conv(
    f: &ArrayView3<f64>,
    w: &ArrayView3<f64>,
    gamma: &ArrayView2<f64>,
    beta: &ArrayView2<f64>,
    eps: f64,
) -> Result<Array3<f64>> {
    let (b_feat, j_feat, _) = f.dim();
    let (_, j_kern, _) = w.dim();
    if j_feat != j_kern {
        return Err(Error::shape(
            "wadain_conv",
            format!("feature channels {j_feat} vs kernel input channels {j_kern}"),
        ));
    }
    if gamma.dim().0 != b_feat {
        return Err(Error::shape(
            "wadain_conv",
            format!("feature batch {b_feat} vs affine batch {}", gamma.dim().0),
        ));
    }
    let modulated = wadain_modulate(w, gamma, beta, eps)?;
    Ok(conv1d_per_sample(f, &modulated.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array, Array1, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn_dyn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        // Box-Muller keeps slices roughly unit-variance, which the
        // idempotence bound below relies on.
        Array::from_shape_simple_fn(IxDyn(shape), || {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    #[test]
    fn instance_norm_constant_slice_is_zero() {
        let f = ArrayD::from_elem(IxDyn(&[1, 1, 6]), 3.25);
        let out = instance_norm(&f, NORM_EPS).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn instance_norm_two_point_slice() {
        // [1, 3]: mean 2, population std 1 -> [-1, 1] up to eps.
        let f: ArrayD<f64> = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![1.0, 3.0]).unwrap();
        let out = instance_norm(&f, 0.0).unwrap();
        assert!((out[[0, 0, 0]] + 1.0).abs() < 1e-12);
        assert!((out[[0, 0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = randn_dyn(&mut rng, &[2, 3, 4, 50]);
        let out = instance_norm(&f, NORM_EPS).unwrap();
        let flat = out.to_shape((2, 3, 200)).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let bslice = flat.index_axis(Axis(0), b);
                let row = bslice.index_axis(Axis(0), c);
                let mean = row.mean().unwrap();
                let std = (row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap()).sqrt();
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((std - 1.0).abs() < 1e-4, "std {std}");
            }
        }
    }

    #[test]
    fn instance_norm_is_idempotent_up_to_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = randn_dyn(&mut rng, &[2, 4, 64]);
        let once = instance_norm(&f, NORM_EPS).unwrap();
        let twice = instance_norm(&once, NORM_EPS).unwrap();
        let diff = (&once - &twice).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "second application moved by {diff}");
    }

    #[test]
    fn cin_identity_affine_equals_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = randn_dyn(&mut rng, &[2, 3, 10]);
        let params = AffineParams::new(Array2::ones((2, 3)), Array2::zeros((2, 3))).unwrap();
        let a = cin(&f, &params, NORM_EPS).unwrap();
        let b = instance_norm(&f, NORM_EPS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cin_zero_gamma_broadcasts_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = randn_dyn(&mut rng, &[1, 2, 7]);
        let params =
            AffineParams::new(Array2::zeros((1, 2)), arr2(&[[1.5, -2.0]])).unwrap();
        let out = cin(&f, &params, NORM_EPS).unwrap();
        for t in 0..7 {
            assert_eq!(out[[0, 0, t]], 1.5);
            assert_eq!(out[[0, 1, t]], -2.0);
        }
    }

    #[test]
    fn cin_hand_example() {
        // IN([1, 3]) = [-1, 1]; gamma 2, beta 1 -> [-1, 3].
        let f: ArrayD<f64> = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![1.0, 3.0]).unwrap();
        let params = AffineParams::new(arr2(&[[2.0]]), arr2(&[[1.0]])).unwrap();
        let out = cin(&f, &params, 0.0).unwrap();
        assert!((out[[0, 0, 0]] + 1.0).abs() < 1e-12);
        assert!((out[[0, 0, 1]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adain_is_cin_of_computed_affines() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = randn_dyn(&mut rng, &[2, 3, 8]);
        let e = arr2(&[[0.3, -0.1], [1.0, 0.5]]);
        let wg = arr2(&[[0.2, -0.4, 0.1], [0.5, 0.3, -0.2]]);
        let bg = [1.0, 1.0, 1.0];
        let wb = arr2(&[[-0.3, 0.2, 0.0], [0.1, -0.1, 0.4]]);
        let bb = [0.0, 0.0, 0.0];

        let via_adain = adain(&f, &e.view(), (&wg.view(), &bg), (&wb.view(), &bb), NORM_EPS)
            .unwrap();
        let params = affine_from_embedding(&e.view(), (&wg.view(), &bg), (&wb.view(), &bb))
            .unwrap();
        let via_cin = cin(&f, &params, NORM_EPS).unwrap();
        assert_eq!(via_adain, via_cin);
    }

    #[test]
    fn adain_identity_initialization_matches_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = randn_dyn(&mut rng, &[2, 3, 8]);
        let e = arr2(&[[0.3, -0.1], [1.0, 0.5]]);
        let zero = Array2::zeros((2, 3));
        let out = adain(
            &f,
            &e.view(),
            (&zero.view(), &[1.0, 1.0, 1.0]),
            (&zero.view(), &[0.0, 0.0, 0.0]),
            NORM_EPS,
        )
        .unwrap();
        assert_eq!(out, instance_norm(&f, NORM_EPS).unwrap());
    }

    #[test]
    fn glu_zero_gate_halves_values() {
        let mut f: ArrayD<f64> = ArrayD::zeros(IxDyn(&[1, 4, 3]));
        f.slice_axis_mut(Axis(1), ndarray::Slice::from(0..2))
            .mapv_inplace(|_| 2.0);
        let out = glu(&f).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3]);
        assert!(out.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn glu_saturated_gate_passes_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f = randn_dyn(&mut rng, &[2, 6, 5]);
        f.slice_axis_mut(Axis(1), ndarray::Slice::from(3..6))
            .mapv_inplace(|_| 20.0);
        let a = f.slice_axis(Axis(1), ndarray::Slice::from(0..3)).to_owned();
        let out = glu(&f).unwrap();
        let diff = (&out - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-8);
    }

    #[test]
    fn glu_hand_example() {
        // A = [1, 2], B = ln 3 -> sigmoid = 0.75 -> [0.75, 1.5].
        let f: ArrayD<f64> = ArrayD::from_shape_vec(
            IxDyn(&[1, 4, 1]),
            vec![1.0, 2.0, 3f64.ln(), 3f64.ln()],
        )
        .unwrap();
        let out = glu(&f).unwrap();
        assert!((out[[0, 0, 0]] - 0.75).abs() < 1e-12);
        assert!((out[[0, 1, 0]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn glu_rejects_odd_channels() {
        let f: ArrayD<f64> = ArrayD::zeros(IxDyn(&[1, 3, 4]));
        assert!(glu(&f).is_err());
    }

    #[test]
    fn glu_bounded_by_value_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = randn_dyn(&mut rng, &[3, 8, 6]);
        let a = f.slice_axis(Axis(1), ndarray::Slice::from(0..4)).to_owned();
        let out = glu(&f).unwrap();
        for (o, av) in out.iter().zip(a.iter()) {
            assert!(o.abs() <= av.abs() + 1e-15);
        }
    }

    #[test]
    fn wadain_modulate_standardizes_two_outputs() {
        // gamma 1, beta 0, w[:, 0, 0] = [1, 3] -> [-1, 1].
        let mut w = Array3::<f64>::zeros((2, 1, 1));
        w[[0, 0, 0]] = 1.0;
        w[[1, 0, 0]] = 3.0;
        let gamma = Array2::ones((1, 1));
        let beta = Array2::zeros((1, 1));
        let out = wadain_modulate(&w.view(), &gamma.view(), &beta.view(), 0.0).unwrap();
        assert!((out[[0, 0, 0, 0]] + 1.0).abs() < 1e-12);
        assert!((out[[0, 1, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wadain_modulate_rejects_single_output_channel() {
        let w = Array3::<f64>::zeros((1, 2, 3));
        let gamma = Array2::ones((1, 2));
        let beta = Array2::zeros((1, 2));
        assert!(wadain_modulate(&w.view(), &gamma.view(), &beta.view(), 0.0).is_err());
    }

    #[test]
    fn wadain_conv_matches_precomputed_kernel_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Array3::from_shape_simple_fn((4, 3, 3), || rng.gen::<f64>() - 0.5);
        let gamma = Array2::from_shape_simple_fn((1, 3), || rng.gen::<f64>() + 0.5);
        let beta = Array2::from_shape_simple_fn((1, 3), || rng.gen::<f64>() - 0.5);
        let f = Array3::from_shape_simple_fn((1, 3, 9), || rng.gen::<f64>() - 0.5);

        let fused = wadain_conv(&f.view(), &w.view(), &gamma.view(), &beta.view(), NORM_EPS)
            .unwrap();
        let modulated =
            wadain_modulate(&w.view(), &gamma.view(), &beta.view(), NORM_EPS).unwrap();
        let reference = conv1d_per_sample(&f.view(), &modulated.view());
        assert_eq!(fused, reference);
    }

    #[test]
    fn wadain_conv_identical_inputs_no_cross_batch_leakage() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Array3::from_shape_simple_fn((4, 2, 3), || rng.gen::<f64>() - 0.5);
        let f1 = Array3::from_shape_simple_fn((1, 2, 7), || rng.gen::<f64>() - 0.5);
        let mut f = Array3::<f64>::zeros((2, 2, 7));
        f.index_axis_mut(Axis(0), 0).assign(&f1.index_axis(Axis(0), 0));
        f.index_axis_mut(Axis(0), 1).assign(&f1.index_axis(Axis(0), 0));

        // Identical embeddings -> identical rows.
        let gamma_same = Array2::from_elem((2, 2), 1.3);
        let beta_same = Array2::from_elem((2, 2), -0.2);
        let out = wadain_conv(&f.view(), &w.view(), &gamma_same.view(), &beta_same.view(), NORM_EPS)
            .unwrap();
        assert_eq!(out.index_axis(Axis(0), 0), out.index_axis(Axis(0), 1));

        // Different affines -> rows differ.
        let mut gamma_diff = gamma_same.clone();
        gamma_diff[[1, 0]] = 0.4;
        let out2 = wadain_conv(&f.view(), &w.view(), &gamma_diff.view(), &beta_same.view(), NORM_EPS)
            .unwrap();
        assert_ne!(out2.index_axis(Axis(0), 0), out2.index_axis(Axis(0), 1));
    }

    #[test]
    fn modulate_f32_demodulation_invariant_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Array3::from_shape_simple_fn((6, 4, 3), || rng.gen::<f32>() * 2.0 - 1.0);
        let gamma = Array2::from_shape_simple_fn((3, 4), || rng.gen::<f32>() + 0.5);
        let beta = Array2::from_shape_simple_fn((3, 4), || rng.gen::<f32>() - 0.5);
        let out = wadain_modulate(&w.view(), &gamma.view(), &beta.view(), 1e-5f32).unwrap();
        for b in 0..3 {
            for j in 0..4 {
                for k in 0..3 {
                    let col: Vec<f32> = (0..6).map(|i| out[[b, i, j, k]]).collect();
                    let mean = col.iter().sum::<f32>() / 6.0;
                    let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 6.0).sqrt();
                    assert!(mean.abs() < 1e-5);
                    assert!((std - 1.0).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn modulate_positive_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = Array3::from_shape_simple_fn((5, 3, 3), || rng.gen::<f64>() * 2.0 - 1.0);
        let gamma = Array2::from_shape_simple_fn((2, 3), || rng.gen::<f64>() + 0.5);
        let beta = Array2::<f64>::zeros((2, 3));
        // Exact in the eps -> 0 limit; with the default eps the deviation is O(eps).
        let base = wadain_modulate(&w.view(), &gamma.view(), &beta.view(), 1e-12).unwrap();
        let scaled_gamma = gamma.mapv(|g| g * 7.3);
        let scaled =
            wadain_modulate(&w.view(), &scaled_gamma.view(), &beta.view(), 1e-12).unwrap();
        let diff = (&base - &scaled).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "scale invariance violated by {diff}");
    }

    #[test]
    fn affine_map_shape_mismatch_is_error() {
        let e = arr2(&[[0.1, 0.2]]);
        let w = Array2::<f64>::zeros((3, 4)); // wrong input dim
        let b: Array1<f64> = Array1::zeros(4);
        assert!(affine_from_embedding(
            &e.view(),
            (&w.view(), b.as_slice().unwrap()),
            (&w.view(), b.as_slice().unwrap())
        )
        .is_err());
    }
}
