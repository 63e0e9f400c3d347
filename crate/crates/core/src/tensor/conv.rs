//! Convolution, depthwise convolution and max pooling with backward passes.
//!
//! Dense convolutions go through im2col + GEMM over the whole batch; the
//! depthwise pass uses direct loops (its arithmetic is too thin for GEMM to
//! pay off at these sizes).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{debug_check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial dims = ceil(in / stride); zero padding split low/high.
    Same,
    /// No padding; output = (in - k) / stride + 1.
    Valid,
}

/// Output length and low-side padding for one spatial dimension.
pub fn out_dim(in_dim: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = in_dim.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(in_dim);
            (out, pad_total / 2)
        }
        Padding::Valid => {
            assert!(in_dim >= k, "valid padding needs input {in_dim} >= kernel {k}");
            ((in_dim - k) / stride + 1, 0)
        }
    }
}

/// Saved forward context reused by the backward pass.
pub struct ConvCtx<F> {
    cols: Vec<F>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    pad: (usize, usize),
    stride: usize,
}

/// Unroll input patches into a `(ci*kh*kw) x (n*out_h*out_w)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    input: &Tensor<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_h: usize,
    pad_w: usize,
) -> Vec<F> {
    let (n, ci, h, w) = input.dims4();
    let cols_w = n * out_h * out_w;
    let mut cols = vec![F::zero(); ci * kh * kw * cols_w];
    let data = input.data();
    for img in 0..n {
        for c in 0..ci {
            let plane = &data[(img * ci + c) * h * w..(img * ci + c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let base = row * cols_w + img * out_h * out_w;
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = iy as usize * w;
                        let dst = base + oy * out_w;
                        for ox in 0..out_w {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + ox] = plane[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of the column-matrix gradient back to input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    d_cols: &[F],
    in_shape: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_h: usize,
    pad_w: usize,
) -> Tensor<F> {
    let [n, ci, h, w] = in_shape;
    let cols_w = n * out_h * out_w;
    let mut d_input = Tensor::zeros(&[n, ci, h, w]);
    let out = d_input.data_mut();
    for img in 0..n {
        for c in 0..ci {
            let plane_off = (img * ci + c) * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let base = row * cols_w + img * out_h * out_w;
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = plane_off + iy as usize * w;
                        let src = base + oy * out_w;
                        for ox in 0..out_w {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            if ix >= 0 && ix < w as isize {
                                out[dst_row + ix as usize] = out[dst_row + ix as usize] + d_cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    d_input
}

/// 2D cross-correlation. `kernel` is `co x ci x kh x kw`; `input` is NCHW.
pub fn conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<F>, ConvCtx<F>)> {
    let (n, ci, h, w) = input.dims4();
    let (co, kci, kh, kw) = kernel.dims4();
    if kci != ci {
        return Err(Error::Shape(format!(
            "conv2d kernel expects {kci} input channels, input has {ci}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel spatial size must be odd, got {kh}x{kw}")));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::Shape(format!("conv2d bias length {} != {co} output channels", b.len())));
        }
    }
    let (out_h, pad_h) = out_dim(h, kh, stride, padding);
    let (out_w, pad_w) = out_dim(w, kw, stride, padding);
    let cols = im2col(input, kh, kw, stride, out_h, out_w, pad_h, pad_w);
    let cols_w = n * out_h * out_w;
    let k_len = ci * kh * kw;

    // out_mat[co, n*oh*ow] = kernel[co, k] * cols[k, n*oh*ow]
    let mut out_mat = vec![F::zero(); co * cols_w];
    F::gemm(false, false, co, k_len, cols_w, F::one(), kernel.data(), &cols, F::zero(), &mut out_mat);

    let mut out = Tensor::zeros(&[n, co, out_h, out_w]);
    let plane = out_h * out_w;
    {
        let out_data = out.data_mut();
        for c in 0..co {
            let b = bias.map(|b| b.data()[c]).unwrap_or_else(F::zero);
            for img in 0..n {
                let src = &out_mat[c * cols_w + img * plane..c * cols_w + (img + 1) * plane];
                let dst = &mut out_data[(img * co + c) * plane..(img * co + c + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + b;
                }
            }
        }
    }
    debug_check_finite("conv2d", &out);
    Ok((
        out,
        ConvCtx { cols, in_shape: [n, ci, h, w], out_hw: (out_h, out_w), pad: (pad_h, pad_w), stride },
    ))
}

/// Gradients of conv2d w.r.t. input, kernel and bias.
pub struct ConvGrads<F> {
    pub d_input: Tensor<F>,
    pub d_kernel: Tensor<F>,
    pub d_bias: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Scalar>(
    d_out: &Tensor<F>,
    kernel: &Tensor<F>,
    has_bias: bool,
    ctx: &ConvCtx<F>,
) -> ConvGrads<F> {
    let (n, co, out_h, out_w) = d_out.dims4();
    let (kco, ci, kh, kw) = kernel.dims4();
    assert_eq!(co, kco, "conv2d_backward channel mismatch");
    assert_eq!((out_h, out_w), ctx.out_hw, "conv2d_backward spatial mismatch");
    let cols_w = n * out_h * out_w;
    let k_len = ci * kh * kw;
    let plane = out_h * out_w;

    // Regroup dOut from NCHW to [co, n*oh*ow].
    let mut d_mat = vec![F::zero(); co * cols_w];
    let d_out_data = d_out.data();
    for c in 0..co {
        for img in 0..n {
            let src = &d_out_data[(img * co + c) * plane..(img * co + c + 1) * plane];
            d_mat[c * cols_w + img * plane..c * cols_w + (img + 1) * plane].copy_from_slice(src);
        }
    }

    let mut d_kernel = Tensor::zeros(&[co, ci, kh, kw]);
    F::gemm(false, true, co, cols_w, k_len, F::one(), &d_mat, &ctx.cols, F::zero(), d_kernel.data_mut());

    let mut d_cols = vec![F::zero(); k_len * cols_w];
    F::gemm(true, false, k_len, co, cols_w, F::one(), kernel.data(), &d_mat, F::zero(), &mut d_cols);
    let d_input = col2im(
        &d_cols,
        ctx.in_shape,
        kh,
        kw,
        ctx.stride,
        out_h,
        out_w,
        ctx.pad.0,
        ctx.pad.1,
    );

    let d_bias = has_bias.then(|| {
        let mut db = Tensor::zeros(&[co]);
        for (c, slot) in db.data_mut().iter_mut().enumerate() {
            *slot = d_mat[c * cols_w..(c + 1) * cols_w].iter().copied().sum();
        }
        db
    });

    ConvGrads { d_input, d_kernel, d_bias }
}

/// Depthwise 2D convolution; `kernel` is `c x kh x kw` (channel multiplier 1).
pub fn depthwise_conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = input.dims4();
    let kshape = kernel.shape();
    if kshape.len() != 3 || kshape[0] != c {
        return Err(Error::Shape(format!(
            "depthwise kernel shape {kshape:?} does not match {c} input channels"
        )));
    }
    let (kh, kw) = (kshape[1], kshape[2]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("depthwise kernel spatial size must be odd, got {kh}x{kw}")));
    }
    let (out_h, pad_h) = out_dim(h, kh, stride, padding);
    let (out_w, pad_w) = out_dim(w, kw, stride, padding);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let kd = kernel.data();
    let id = input.data();
    let od = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let plane = &id[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            let kplane = &kd[ch * kh * kw..(ch + 1) * kh * kw];
            let oplane = &mut od[(img * c + ch) * out_h * out_w..(img * c + ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = F::zero();
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            if ix >= 0 && ix < w as isize {
                                acc = acc + plane[iy as usize * w + ix as usize] * kplane[ky * kw + kx];
                            }
                        }
                    }
                    oplane[oy * out_w + ox] = acc;
                }
            }
        }
    }
    debug_check_finite("depthwise_conv2d", &out);
    Ok(out)
}

pub fn depthwise_conv2d_backward<F: Scalar>(
    d_out: &Tensor<F>,
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> (Tensor<F>, Tensor<F>) {
    let (n, c, h, w) = input.dims4();
    let kshape = kernel.shape();
    let (kh, kw) = (kshape[1], kshape[2]);
    let (out_h, pad_h) = out_dim(h, kh, stride, padding);
    let (out_w, pad_w) = out_dim(w, kw, stride, padding);
    let mut d_input = Tensor::zeros(&[n, c, h, w]);
    let mut d_kernel = Tensor::zeros(&[c, kh, kw]);
    let kd = kernel.data();
    let id = input.data();
    let dod = d_out.data();
    let did = d_input.data_mut();
    let dkd = d_kernel.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let plane_off = (img * c + ch) * h * w;
            let o_off = (img * c + ch) * out_h * out_w;
            let k_off = ch * kh * kw;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let g = dod[o_off + oy * out_w + ox];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            if ix >= 0 && ix < w as isize {
                                let ii = plane_off + iy as usize * w + ix as usize;
                                did[ii] = did[ii] + g * kd[k_off + ky * kw + kx];
                                dkd[k_off + ky * kw + kx] = dkd[k_off + ky * kw + kx] + g * id[ii];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernel)
}

/// Max pooling; records flat argmax indices for the backward pass.
pub fn maxpool_forward<F: Scalar>(
    input: &Tensor<F>,
    k: usize,
    stride: usize,
    padding: Padding,
) -> (Tensor<F>, Vec<u32>) {
    let (n, c, h, w) = input.dims4();
    let (out_h, pad_h) = out_dim(h, k, stride, padding);
    let (out_w, pad_w) = out_dim(w, k, stride, padding);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let mut argmax = vec![0u32; n * c * out_h * out_w];
    let id = input.data();
    let od = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let plane_off = (img * c + ch) * h * w;
            let o_off = (img * c + ch) * out_h * out_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = F::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            if ix >= 0 && ix < w as isize {
                                let ii = plane_off + iy as usize * w + ix as usize;
                                if id[ii] > best {
                                    best = id[ii];
                                    best_idx = ii;
                                }
                            }
                        }
                    }
                    assert!(best_idx != usize::MAX, "maxpool window with no valid element");
                    od[o_off + oy * out_w + ox] = best;
                    argmax[o_off + oy * out_w + ox] = best_idx as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<F: Scalar>(d_out: &Tensor<F>, argmax: &[u32], in_shape: &[usize]) -> Tensor<F> {
    let mut d_input = Tensor::zeros(in_shape);
    let did = d_input.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax.iter()) {
        did[idx as usize] = did[idx as usize] + *g;
    }
    d_input
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        // kernel[o][i] = delta(o, i)
        let mut kernel = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            kernel.data_mut()[i * 3 + i] = 1.0;
        }
        let (out, _) = conv2d_forward(&input, &kernel, None, 1, Padding::Same).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[2, 3, 5, 5]);
        let kernel = Tensor::zeros(&[4, 3, 3, 3]);
        let (out, _) = conv2d_forward(&input, &kernel, None, 1, Padding::Same).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let input = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let kernel = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        assert!(matches!(
            conv2d_forward(&input, &kernel, None, 1, Padding::Same),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        let input = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let kernel = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&input, &kernel, None, 1, Padding::Same).is_err());
    }

    #[test]
    fn same_padding_output_dims() {
        // ceil(H / stride)
        assert_eq!(out_dim(16, 3, 2, Padding::Same).0, 8);
        assert_eq!(out_dim(5, 3, 2, Padding::Same).0, 3);
        assert_eq!(out_dim(5, 3, 1, Padding::Valid).0, 3);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        // 3x3 kernel with center 1 per channel
        let mut kernel = Tensor::zeros(&[2, 3, 3]);
        kernel.data_mut()[4] = 1.0;
        kernel.data_mut()[9 + 4] = 1.0;
        let out = depthwise_conv2d_forward(&input, &kernel, 1, Padding::Same).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 5.0, 2.0, 3.0]);
        let (out, argmax) = maxpool_forward(&input, 2, 2, Padding::Valid);
        assert_eq!(out.data(), &[5.0]);
        let d_out = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]);
        let d_in = maxpool_backward(&d_out, &argmax, &[1, 1, 2, 2]);
        assert_eq!(d_in.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
