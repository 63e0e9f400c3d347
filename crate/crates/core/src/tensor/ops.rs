//! Pointwise, normalization and classifier-head operators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{
    conv2d_backward, conv2d_forward, depthwise_conv2d_backward, depthwise_conv2d_forward, ConvCtx,
    ConvGrads, Padding,
};
use crate::tensor::{debug_check_finite, Tensor};

pub fn relu_forward<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    input.map(|x| if x > F::zero() { x } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(d_out: &Tensor<F>, input: &Tensor<F>) -> Tensor<F> {
    let mut d_in = d_out.clone();
    for (g, &x) in d_in.data_mut().iter_mut().zip(input.data()) {
        if x <= F::zero() {
            *g = F::zero();
        }
    }
    d_in
}

/// Per-channel batch statistics saved for the backward pass.
pub struct BnCtx<F> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
}

/// Batch normalization over (N, H, W) per channel, training mode.
/// Updates running statistics in place: `r = momentum * r + (1 - momentum) * batch`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train<F: Scalar>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &mut Tensor<F>,
    running_var: &mut Tensor<F>,
    momentum: F,
    eps: F,
) -> Result<(Tensor<F>, BnCtx<F>)> {
    let (n, c, h, w) = input.dims4();
    check_bn_params(c, gamma, beta)?;
    let plane = h * w;
    let count = F::from_count(n * plane);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut xhat = Tensor::zeros(&[n, c, h, w]);
    let mut inv_std = vec![F::zero(); c];
    let id = input.data();
    for ch in 0..c {
        let mut sum = F::zero();
        let mut sum_sq = F::zero();
        for img in 0..n {
            let off = (img * c + ch) * plane;
            for &x in &id[off..off + plane] {
                sum += x;
                sum_sq += x * x;
            }
        }
        let mean = sum / count;
        let var = (sum_sq / count - mean * mean).max(F::zero());
        let istd = F::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for img in 0..n {
            let off = (img * c + ch) * plane;
            for i in off..off + plane {
                let xh = (id[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
        let m = momentum;
        running_mean.data_mut()[ch] = m * running_mean.data()[ch] + (F::one() - m) * mean;
        running_var.data_mut()[ch] = m * running_var.data()[ch] + (F::one() - m) * var;
    }
    debug_check_finite("batchnorm", &out);
    Ok((out, BnCtx { xhat, inv_std }))
}

/// Batch normalization using frozen running statistics (evaluation mode).
pub fn batchnorm_forward_eval<F: Scalar>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &Tensor<F>,
    running_var: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = input.dims4();
    check_bn_params(c, gamma, beta)?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let id = input.data();
    for ch in 0..c {
        let istd = F::one() / (running_var.data()[ch] + eps).sqrt();
        let (mean, g, b) = (running_mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
        for img in 0..n {
            let off = (img * c + ch) * plane;
            for i in off..off + plane {
                out.data_mut()[i] = g * (id[i] - mean) * istd + b;
            }
        }
    }
    debug_check_finite("batchnorm_eval", &out);
    Ok(out)
}

pub fn batchnorm_backward<F: Scalar>(
    d_out: &Tensor<F>,
    gamma: &Tensor<F>,
    ctx: &BnCtx<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n, c, h, w) = d_out.dims4();
    let plane = h * w;
    let count = F::from_count(n * plane);
    let mut d_input = Tensor::zeros(&[n, c, h, w]);
    let mut d_gamma = Tensor::zeros(&[c]);
    let mut d_beta = Tensor::zeros(&[c]);
    let dod = d_out.data();
    let xh = ctx.xhat.data();
    for ch in 0..c {
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for img in 0..n {
            let off = (img * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += dod[i];
                sum_dy_xhat += dod[i] * xh[i];
            }
        }
        d_beta.data_mut()[ch] = sum_dy;
        d_gamma.data_mut()[ch] = sum_dy_xhat;
        let g = gamma.data()[ch];
        let istd = ctx.inv_std[ch];
        for img in 0..n {
            let off = (img * c + ch) * plane;
            for i in off..off + plane {
                // d_x = gamma * istd / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                let t = count * dod[i] - sum_dy - xh[i] * sum_dy_xhat;
                d_input.data_mut()[i] = g * istd * t / count;
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

fn check_bn_params<F: Scalar>(c: usize, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm scale/shift length {}/{} != {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// N,C,H,W -> N,C mean over the spatial plane.
pub fn global_avgpool_forward<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = input.dims4();
    let plane = h * w;
    let scale = F::one() / F::from_count(plane);
    let mut out = Tensor::zeros(&[n, c]);
    let id = input.data();
    for img in 0..n {
        for ch in 0..c {
            let off = (img * c + ch) * plane;
            out.data_mut()[img * c + ch] = id[off..off + plane].iter().copied().sum::<F>() * scale;
        }
    }
    out
}

pub fn global_avgpool_backward<F: Scalar>(d_out: &Tensor<F>, in_shape: &[usize]) -> Tensor<F> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let plane = h * w;
    let scale = F::one() / F::from_count(plane);
    let mut d_input = Tensor::zeros(in_shape);
    let did = d_input.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let g = d_out.data()[img * c + ch] * scale;
            let off = (img * c + ch) * plane;
            did[off..off + plane].iter_mut().for_each(|x| *x = g);
        }
    }
    d_input
}

/// `x[n x d] * w[d x k] + b[k]`.
pub fn fully_connected_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, d) = x.dims2();
    let (wd, k) = w.dims2();
    if wd != d {
        return Err(Error::Shape(format!("fully_connected: input dim {d} != weight rows {wd}")));
    }
    if b.len() != k {
        return Err(Error::Shape(format!("fully_connected: bias length {} != {k}", b.len())));
    }
    let mut out = Tensor::zeros(&[n, k]);
    F::gemm(false, false, n, d, k, F::one(), x.data(), w.data(), F::zero(), out.data_mut());
    for row in 0..n {
        for col in 0..k {
            out.data_mut()[row * k + col] += b.data()[col];
        }
    }
    debug_check_finite("fully_connected", &out);
    Ok(out)
}

pub fn fully_connected_backward<F: Scalar>(
    d_out: &Tensor<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n, d) = x.dims2();
    let (_, k) = w.dims2();
    let mut d_x = Tensor::zeros(&[n, d]);
    let mut d_w = Tensor::zeros(&[d, k]);
    let mut d_b = Tensor::zeros(&[k]);
    // dX = dY * W^T ; dW = X^T * dY
    F::gemm(false, true, n, k, d, F::one(), d_out.data(), w.data(), F::zero(), d_x.data_mut());
    F::gemm(true, false, d, n, k, F::one(), x.data(), d_out.data(), F::zero(), d_w.data_mut());
    for row in 0..n {
        for col in 0..k {
            d_b.data_mut()[col] += d_out.data()[row * k + col];
        }
    }
    (d_x, d_w, d_b)
}

/// Inverted dropout: kept elements are scaled by 1/keep so evaluation needs no rescale.
/// Returns the multiplicative mask applied.
pub fn dropout_forward<F: Scalar>(
    input: &Tensor<F>,
    keep_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!("dropout keep probability {keep_prob} outside (0, 1]")));
    }
    let inv = F::from_float(1.0 / keep_prob);
    let mut mask = Tensor::zeros(input.shape());
    for m in mask.data_mut() {
        if rng.gen::<f64>() < keep_prob {
            *m = inv;
        }
    }
    let mut out = input.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o = *o * m;
    }
    Ok((out, mask))
}

pub fn dropout_backward<F: Scalar>(d_out: &Tensor<F>, mask: &Tensor<F>) -> Tensor<F> {
    let mut d_in = d_out.clone();
    for (g, &m) in d_in.data_mut().iter_mut().zip(mask.data()) {
        *g = *g * m;
    }
    d_in
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Returns (loss, probabilities) — probabilities feed the backward pass.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    let (n, k) = logits.dims2();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Tensor::zeros(&[n, k]);
    let mut loss = F::zero();
    for row in 0..n {
        let slice = &logits.data()[row * k..(row + 1) * k];
        let max = slice.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (j, &x) in slice.iter().enumerate() {
            let e = (x - max).exp();
            probs.data_mut()[row * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs.data_mut()[row * k + j] = probs.data()[row * k + j] / denom;
        }
        let p = probs.data()[row * k + labels[row]];
        loss -= p.max(F::from_float(1e-300)).ln();
    }
    Ok((loss / F::from_count(n), probs))
}

/// Gradient of the mean cross-entropy w.r.t. logits: (probs - onehot) / n.
pub fn softmax_cross_entropy_backward<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Tensor<F> {
    let (n, k) = probs.dims2();
    let scale = F::one() / F::from_count(n);
    let mut d = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        d.data_mut()[row * k + label] -= F::one();
    }
    d.scale_in_place(scale);
    d
}

/// Depth-concatenate along the channel axis. All inputs share N, H, W.
pub fn concat_channels<F: Scalar>(inputs: &[&Tensor<F>]) -> Tensor<F> {
    assert!(!inputs.is_empty(), "concat of zero tensors");
    let (n, _, h, w) = inputs[0].dims4();
    let total_c: usize = inputs.iter().map(|t| t.dims4().1).sum();
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    let plane = h * w;
    let od = out.data_mut();
    for img in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let (tn, tc, th, tw) = t.dims4();
            assert!(tn == n && th == h && tw == w, "concat spatial/batch mismatch");
            let src = &t.data()[img * tc * plane..(img + 1) * tc * plane];
            let dst_off = (img * total_c + c_off) * plane;
            od[dst_off..dst_off + tc * plane].copy_from_slice(src);
            c_off += tc;
        }
    }
    out
}

/// Split the concat gradient back into per-input gradients.
pub fn concat_channels_backward<F: Scalar>(d_out: &Tensor<F>, channel_splits: &[usize]) -> Vec<Tensor<F>> {
    let (n, total_c, h, w) = d_out.dims4();
    debug_assert_eq!(channel_splits.iter().sum::<usize>(), total_c);
    let plane = h * w;
    let mut grads: Vec<Tensor<F>> = channel_splits.iter().map(|&c| Tensor::zeros(&[n, c, h, w])).collect();
    for img in 0..n {
        let mut c_off = 0;
        for (g, &c) in grads.iter_mut().zip(channel_splits) {
            let src_off = (img * total_c + c_off) * plane;
            let dst = &mut g.data_mut()[img * c * plane..(img + 1) * c * plane];
            dst.copy_from_slice(&d_out.data()[src_off..src_off + c * plane]);
            c_off += c;
        }
    }
    grads
}

/// Multiply a tensor by a learned scalar (skip-connection weight).
pub fn scale_forward<F: Scalar>(input: &Tensor<F>, weight: F) -> Tensor<F> {
    input.map(|x| x * weight)
}

/// Returns (d_input, d_weight).
pub fn scale_backward<F: Scalar>(d_out: &Tensor<F>, input: &Tensor<F>, weight: F) -> (Tensor<F>, F) {
    let d_input = d_out.map(|g| g * weight);
    let d_weight = d_out.data().iter().zip(input.data()).map(|(&g, &x)| g * x).sum();
    (d_input, d_weight)
}

/// Saved context for the separable convolution backward pass.
pub struct SepConvCtx<F> {
    pub mid: Tensor<F>,
    pub point_ctx: ConvCtx<F>,
}

/// Depthwise convolution followed by a 1x1 pointwise convolution.
pub fn separable_conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    depth_kernel: &Tensor<F>,
    point_kernel: &Tensor<F>,
    point_bias: Option<&Tensor<F>>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<F>, SepConvCtx<F>)> {
    let mid = depthwise_conv2d_forward(input, depth_kernel, stride, padding)?;
    let (out, point_ctx) = conv2d_forward(&mid, point_kernel, point_bias, 1, Padding::Same)?;
    Ok((out, SepConvCtx { mid, point_ctx }))
}

pub struct SepConvGrads<F> {
    pub d_input: Tensor<F>,
    pub d_depth_kernel: Tensor<F>,
    pub d_point_kernel: Tensor<F>,
    pub d_point_bias: Option<Tensor<F>>,
}

#[allow(clippy::too_many_arguments)]
pub fn separable_conv2d_backward<F: Scalar>(
    d_out: &Tensor<F>,
    input: &Tensor<F>,
    depth_kernel: &Tensor<F>,
    point_kernel: &Tensor<F>,
    has_bias: bool,
    stride: usize,
    padding: Padding,
    ctx: &SepConvCtx<F>,
) -> SepConvGrads<F> {
    let ConvGrads { d_input: d_mid, d_kernel: d_point_kernel, d_bias } =
        conv2d_backward(d_out, point_kernel, has_bias, &ctx.point_ctx);
    let (d_input, d_depth_kernel) =
        depthwise_conv2d_backward(&d_mid, input, depth_kernel, stride, padding);
    SepConvGrads { d_input, d_depth_kernel, d_point_kernel, d_point_bias: d_bias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(&[4], vec![-2.0f64, -0.5, 0.0, 3.0]);
        assert_eq!(relu_forward(&t).data(), &[0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::from_vec(&[1, 10], vec![0.7f64; 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let input = Tensor::from_vec(&[2, 3, 4, 4], data);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::filled(&[3], 1.0);
        let (out, _) =
            batchnorm_forward_train(&input, &gamma, &beta, &mut rm, &mut rv, 0.9, 1e-8).unwrap();
        let plane = 16;
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for img in 0..2 {
                let off = (img * 3 + ch) * plane;
                for &x in &out.data()[off..off + plane] {
                    sum += x;
                    sum_sq += x * x;
                }
            }
            let m = sum / 32.0;
            let v = sum_sq / 32.0 - m * m;
            assert!(m.abs() < 1e-5, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-5, "channel var {v}");
        }
    }

    #[test]
    fn dropout_disabled_at_keep_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let input = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (out, _) = dropout_forward(&input, 1.0, &mut rng).unwrap();
        assert_eq!(out, input);
        assert!(dropout_forward(&input, 0.0, &mut rng).is_err());
        assert!(dropout_forward(&input, 1.5, &mut rng).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[1, 2, 2, 2], (10..18).map(f64::from).collect());
        let cat = concat_channels(&[&a, &b]);
        assert_eq!(cat.shape(), &[1, 3, 2, 2]);
        let parts = concat_channels_backward(&cat, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn separable_identity_composition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::from_vec(&[2, 2, 4, 4], data);
        // depthwise identity (center tap) + pointwise identity
        let mut dk = Tensor::zeros(&[2, 3, 3]);
        dk.data_mut()[4] = 1.0;
        dk.data_mut()[13] = 1.0;
        let mut pk = Tensor::zeros(&[2, 2, 1, 1]);
        pk.data_mut()[0] = 1.0;
        pk.data_mut()[3] = 1.0;
        let (out, _) = separable_conv2d_forward(&input, &dk, &pk, None, 1, Padding::Same).unwrap();
        assert_eq!(out, input);
    }
}
