//! Per-channel batch normalization over NCHW activations.
//!
//! Training mode normalizes with the current batch's mean and population
//! variance and folds those statistics into the running buffers; inference
//! mode normalizes with the frozen running statistics. The backward pass
//! matches whichever mode produced the forward result.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running mean and variance buffers, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    /// Fresh buffers: zero mean, unit variance.
    pub fn new(channels: usize) -> BnStats {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Forward result plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct BnForward {
    pub output: Tensor,
    /// Normalized input, before scale and shift.
    pub x_hat: Tensor,
    /// Per-channel `1 / sqrt(var + eps)` used in the forward pass.
    pub inv_std: Vec<f64>,
    /// True when batch statistics were used (training mode).
    pub from_batch: bool,
}

fn check_bn_shapes(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let (_, c, _, _) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            context: "batchnorm gamma/beta",
            expected: vec![c],
            got: gamma.shape().to_vec(),
        });
    }
    Ok(c)
}

fn normalize(
    input: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = input.dims4().expect("checked by caller");
    let plane = h * w;
    let mut x_hat = Tensor::zeros(input.shape());
    let mut output = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = input.idx4(b, ch, 0, 0);
            let (m, s) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let xh = (input.data()[i] - m) * s;
                x_hat.data_mut()[i] = xh;
                output.data_mut()[i] = g * xh + bt;
            }
        }
    }
    (output, x_hat)
}

/// Training-mode forward pass. Normalizes with batch statistics and
/// updates `stats` in place: `r <- momentum * r + (1 - momentum) * batch`.
pub fn batchnorm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    eps: f64,
    momentum: f64,
) -> Result<BnForward> {
    let c = check_bn_shapes(input, gamma, beta)?;
    if stats.mean.len() != c {
        return Err(Error::ShapeMismatch {
            context: "batchnorm running stats",
            expected: vec![c],
            got: vec![stats.mean.len()],
        });
    }
    let (n, _, h, w) = input.dims4()?;
    let count = (n * h * w) as f64;
    if count == 0.0 {
        return Err(Error::invalid("batchnorm on empty batch"));
    }

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let base = input.idx4(b, ch, 0, 0);
            mean[ch] += input.data()[base..base + plane].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = input.idx4(b, ch, 0, 0);
            let m = mean[ch];
            var[ch] += input.data()[base..base + plane]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }

    for ch in 0..c {
        stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
        stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
    }

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (output, x_hat) = normalize(input, &mean, &inv_std, gamma, beta);
    Ok(BnForward {
        output,
        x_hat,
        inv_std,
        from_batch: true,
    })
}

/// Inference-mode forward pass using the frozen running statistics.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    eps: f64,
) -> Result<BnForward> {
    let c = check_bn_shapes(input, gamma, beta)?;
    if stats.mean.len() != c {
        return Err(Error::ShapeMismatch {
            context: "batchnorm running stats",
            expected: vec![c],
            got: vec![stats.mean.len()],
        });
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (output, x_hat) = normalize(input, &stats.mean, &inv_std, gamma, beta);
    Ok(BnForward {
        output,
        x_hat,
        inv_std,
        from_batch: false,
    })
}

/// Backward pass. Returns `(grad_input, grad_gamma, grad_beta)`.
///
/// `x_hat`, `inv_std`, and `from_batch` come from the matching forward
/// result. When batch statistics were used, the mean and variance depend
/// on the input, which adds the usual centering terms; with frozen
/// statistics the input gradient is a plain rescale.
pub fn batchnorm_backward(
    x_hat: &Tensor,
    inv_std: &[f64],
    from_batch: bool,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x_hat.dims4()?;
    if grad_out.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            context: "batchnorm_backward grad_out",
            expected: x_hat.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let plane = h * w;
    let count = (n * h * w) as f64;

    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let base = x_hat.idx4(b, ch, 0, 0);
            let mut gg = 0.0;
            let mut gb = 0.0;
            for i in base..base + plane {
                gg += grad_out.data()[i] * x_hat.data()[i];
                gb += grad_out.data()[i];
            }
            grad_gamma.data_mut()[ch] += gg;
            grad_beta.data_mut()[ch] += gb;
        }
    }

    let mut grad_input = Tensor::zeros(x_hat.shape());
    for ch in 0..c {
        let g = gamma.data()[ch];
        let s = inv_std[ch];
        if from_batch {
            let mean_dy = grad_beta.data()[ch] / count;
            let mean_dy_xhat = grad_gamma.data()[ch] / count;
            for b in 0..n {
                let base = x_hat.idx4(b, ch, 0, 0);
                for i in base..base + plane {
                    grad_input.data_mut()[i] =
                        g * s * (grad_out.data()[i] - mean_dy - x_hat.data()[i] * mean_dy_xhat);
                }
            }
        } else {
            for b in 0..n {
                let base = x_hat.idx4(b, ch, 0, 0);
                for i in base..base + plane {
                    grad_input.data_mut()[i] = g * s * grad_out.data()[i];
                }
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
