//! Dense forward and backward kernels for the spatial operators.
//!
//! All kernels are direct loops over NCHW buffers. Convolution uses the
//! cross-correlation convention with stride 1 and explicit zero padding;
//! downsampling is done by max pooling, so no strided convolution is needed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Validates conv2d operand shapes and returns
/// `(batch, c_in, h, w, c_out, kh, kw)`.
fn conv2d_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d weight channels",
            expected: vec![c_in],
            got: vec![wc_in],
        });
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias",
            expected: vec![c_out],
            got: bias.shape().to_vec(),
        });
    }
    Ok((n, c_in, h, w, c_out, kh, kw))
}

/// 2D convolution, stride 1, zero padding of `pad` pixels on every edge.
///
/// `input` is `[N, C_in, H, W]`, `weight` is `[C_out, C_in, KH, KW]`,
/// `bias` is `[C_out]`. Output is `[N, C_out, H + 2 pad - KH + 1, W + 2 pad - KW + 1]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c_in, h, w, c_out, kh, kw) = conv2d_dims(input, weight, bias)?;
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);

    for b in 0..n {
        for co in 0..c_out {
            let base = out.idx4(b, co, 0, 0);
            let bias_v = bias.data()[co];
            out.data_mut()[base..base + oh * ow].fill(bias_v);
            for ci in 0..c_in {
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, pad);
                    for kx in 0..kw {
                        let wv = weight.at4(co, ci, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, pad);
                        for oy in oy_lo..oy_hi {
                            let in_row = input.idx4(b, ci, oy + ky - pad, kx + ox_lo - pad);
                            let out_row = base + oy * ow + ox_lo;
                            let in_span = &input.data()[in_row..in_row + (ox_hi - ox_lo)];
                            let out_span = &mut out.data_mut()[out_row..out_row + (ox_hi - ox_lo)];
                            for (o, &v) in out_span.iter_mut().zip(in_span) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output coordinates along one axis whose kernel tap stays inside the
/// unpadded input: `out + k - pad` in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo.min(hi), hi)
}

/// Backward pass of [`conv2d`]. Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c_in, h, w, c_out, kh, kw) = conv2d_dims(input, weight, bias)?;
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let expected = [n, c_out, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward grad_out",
            expected: expected.to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }

    let mut grad_input = Tensor::zeros(&[n, c_in, h, w]);
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[c_out]);

    for b in 0..n {
        for co in 0..c_out {
            let go_base = grad_out.idx4(b, co, 0, 0);
            let go_plane = &grad_out.data()[go_base..go_base + oh * ow];
            grad_bias.data_mut()[co] += go_plane.iter().sum::<f64>();
            for ci in 0..c_in {
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, pad);
                        let wv = weight.at4(co, ci, ky, kx);
                        let mut gw = 0.0;
                        for oy in oy_lo..oy_hi {
                            let span = ox_hi - ox_lo;
                            let in_row = input.idx4(b, ci, oy + ky - pad, kx + ox_lo - pad);
                            let gi_row = grad_input.idx4(b, ci, oy + ky - pad, kx + ox_lo - pad);
                            let go_row = oy * ow + ox_lo;
                            let go_span = &go_plane[go_row..go_row + span];
                            let in_span = &input.data()[in_row..in_row + span];
                            let gi_span = &mut grad_input.data_mut()[gi_row..gi_row + span];
                            for k in 0..span {
                                let g = go_span[k];
                                gw += g * in_span[k];
                                gi_span[k] += g * wv;
                            }
                        }
                        let gw_idx = grad_weight.idx4(co, ci, ky, kx);
                        grad_weight.data_mut()[gw_idx] += gw;
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

/// 2x2 max pooling with stride 2. Requires even spatial dimensions.
/// Returns the pooled tensor and the flat input index of each selected
/// maximum for use by the backward pass. Ties select the first element
/// in row-major window order, which keeps replay deterministic.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = input.idx4(b, ch, oy * 2, ox * 2);
                    let mut best = input.data()[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = input.idx4(b, ch, oy * 2 + dy, ox * 2 + dx);
                        let v = input.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    let o = out.idx4(b, ch, oy, ox);
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Backward pass of [`maxpool2`]: routes each output gradient to the
/// input position that produced the maximum.
pub fn maxpool2_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            context: "maxpool2_backward grad_out",
            expected: vec![argmax.len()],
            got: vec![grad_out.len()],
        });
    }
    let mut grad_input = Tensor::zeros(input_shape);
    for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
        grad_input.data_mut()[idx] += g;
    }
    Ok(grad_input)
}

/// Source coordinates and weights for one output row or column of the
/// bilinear upsample: `(lo, hi, w_hi)` so the sample is
/// `(1 - w_hi) * in[lo] + w_hi * in[hi]`.
fn bilinear_axis(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let f = factor as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / f - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, using half-pixel centers
/// with edge clamping.
pub fn upsample_bilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_axis(oh, h, factor);
    let xs = bilinear_axis(ow, w, factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let row0 = input.idx4(b, ch, y0, 0);
                let row1 = input.idx4(b, ch, y1, 0);
                let out_row = out.idx4(b, ch, oy, 0);
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = (1.0 - wx) * input.data()[row0 + x0] + wx * input.data()[row0 + x1];
                    let bot = (1.0 - wx) * input.data()[row1 + x0] + wx * input.data()[row1 + x1];
                    out.data_mut()[out_row + ox] = (1.0 - wy) * top + wy * bot;
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`upsample_bilinear`]: transposes the interpolation,
/// scattering each output gradient onto its four source pixels.
pub fn upsample_bilinear_backward(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let mut grad_input = Tensor::zeros(input_shape);
    let (n, c, h, w) = grad_input.dims4()?;
    let (go_n, go_c, oh, ow) = grad_out.dims4()?;
    if go_n != n || go_c != c || oh != h * factor || ow != w * factor {
        return Err(Error::ShapeMismatch {
            context: "upsample_bilinear_backward grad_out",
            expected: vec![n, c, h * factor, w * factor],
            got: grad_out.shape().to_vec(),
        });
    }
    let ys = bilinear_axis(oh, h, factor);
    let xs = bilinear_axis(ow, w, factor);
    for b in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let row0 = grad_input.idx4(b, ch, y0, 0);
                let row1 = grad_input.idx4(b, ch, y1, 0);
                let go_row = grad_out.idx4(b, ch, oy, 0);
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let g = grad_out.data()[go_row + ox];
                    grad_input.data_mut()[row0 + x0] += (1.0 - wy) * (1.0 - wx) * g;
                    grad_input.data_mut()[row0 + x1] += (1.0 - wy) * wx * g;
                    grad_input.data_mut()[row1 + x0] += wy * (1.0 - wx) * g;
                    grad_input.data_mut()[row1 + x1] += wy * wx * g;
                }
            }
        }
    }
    Ok(grad_input)
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels needs at least one input"));
    }
    let (n, _, h, w) = parts[0].dims4()?;
    let mut c_total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if pn != n || ph != h || pw != w {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                expected: vec![n, h, w],
                got: vec![pn, ph, pw],
            });
        }
        c_total += pc;
    }
    let mut out = Tensor::zeros(&[n, c_total, h, w]);
    let plane = h * w;
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = p.idx4(b, 0, 0, 0);
            let dst = out.idx4(b, c_off, 0, 0);
            out.data_mut()[dst..dst + pc * plane].copy_from_slice(&p.data()[src..src + pc * plane]);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Splits a channel-axis gradient back into per-input gradients with the
/// given channel counts.
pub fn concat_channels_backward(grad_out: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c_total, h, w) = grad_out.dims4()?;
    if channels.iter().sum::<usize>() != c_total {
        return Err(Error::ShapeMismatch {
            context: "concat_channels_backward",
            expected: vec![c_total],
            got: vec![channels.iter().sum()],
        });
    }
    let plane = h * w;
    let mut grads: Vec<Tensor> = channels
        .iter()
        .map(|&c| Tensor::zeros(&[n, c, h, w]))
        .collect();
    for b in 0..n {
        let mut c_off = 0;
        for (gi, &c) in grads.iter_mut().zip(channels.iter()) {
            let src = grad_out.idx4(b, c_off, 0, 0);
            let dst = gi.idx4(b, 0, 0, 0);
            gi.data_mut()[dst..dst + c * plane]
                .copy_from_slice(&grad_out.data()[src..src + c * plane]);
            c_off += c;
        }
    }
    Ok(grads)
}
