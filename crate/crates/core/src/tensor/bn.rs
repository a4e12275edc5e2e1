//! Batch normalization over `[N,C,H,W]` maps, per-channel statistics
//! taken over N, H, W.

use super::ops::dims4;
use super::Tensor;
use crate::error::TensorError;

fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize, TensorError> {
    if x.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(c)
}

/// Train-mode batch norm. Returns the normalized map together with the
/// batch mean and (biased) variance per channel, which the caller uses to
/// update running statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>), TensorError> {
    let c = check_bn_shapes(x, gamma, beta)?;
    let (n, _, h, w) = dims4(x.shape());
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .iter()
                .sum::<f64>();
        }
        mean[ci] = s / m;
        let mu = mean[ci];
        let mut v = 0.0;
        for ni in 0..n {
            v += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        var[ci] = v / m;
    }

    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let base = (ni * c + ci) * hw;
            for t in 0..hw {
                out[base + t] = g[ci] * (xd[base + t] - mean[ci]) * inv + b[ci];
            }
        }
    }

    let xc = x.clone();
    let gc = gamma.clone();
    let mean_b = mean.clone();
    let var_b = var.clone();
    let tensor = Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |_, grad| {
            let xd = xc.data();
            let gam = gc.data();
            let mut gx = vec![0.0; xd.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ci in 0..c {
                let mu = mean_b[ci];
                let inv = 1.0 / (var_b[ci] + eps).sqrt();
                // reductions over the channel slice
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for t in 0..hw {
                        let dy = grad[base + t];
                        let xhat = (xd[base + t] - mu) * inv;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                }
                gb[ci] = sum_dy;
                gg[ci] = sum_dy_xhat;
                let scale = gam[ci] * inv / m;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for t in 0..hw {
                        let dy = grad[base + t];
                        let xhat = (xd[base + t] - mu) * inv;
                        gx[base + t] = scale * (m * dy - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
        "batch_norm_train",
    );
    Ok((tensor, mean, var))
}

/// Eval-mode batch norm using fixed running statistics. Rejects
/// nonpositive running variances.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor, TensorError> {
    let c = check_bn_shapes(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm_eval",
            lhs: x.shape().to_vec(),
            rhs: vec![running_mean.len()],
        });
    }
    if let Some(idx) = running_var.iter().position(|v| *v <= 0.0) {
        return Err(TensorError::NonPositiveVariance {
            channel: idx,
            value: running_var[idx],
        });
    }
    let (n, _, h, w) = dims4(x.shape());
    let hw = h * w;
    let xd = x.data();
    let g = gamma.data();
    let b = beta.data();
    let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for t in 0..hw {
                out[base + t] = g[ci] * (xd[base + t] - running_mean[ci]) * inv[ci] + b[ci];
            }
        }
    }
    let xc = x.clone();
    let gc = gamma.clone();
    let mean_b = running_mean.to_vec();
    let inv_b = inv;
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |_, grad| {
            let xd = xc.data();
            let gam = gc.data();
            let mut gx = vec![0.0; xd.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for t in 0..hw {
                        let dy = grad[base + t];
                        let xhat = (xd[base + t] - mean_b[ci]) * inv_b[ci];
                        gx[base + t] = dy * gam[ci] * inv_b[ci];
                        gg[ci] += dy * xhat;
                        gb[ci] += dy;
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
        "batch_norm_eval",
    ))
}
