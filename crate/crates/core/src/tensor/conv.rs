//! 2-d convolution with gradients for both input and kernel.

use super::ops::dims4;
use super::Tensor;
use crate::error::TensorError;

/// Convolve `input [N,C,H,W]` with `kernel [K,C,kh,kw]` at the given
/// stride and zero padding. Output is `[N,K,H',W']` with
/// `H' = (H + 2*pad - kh)/stride + 1` (floor), analogously `W'`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    if input.shape().len() != 4 || kernel.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let (n, c, h, w) = dims4(input.shape());
    let (k, ck, kh, kw) = dims4(kernel.shape());
    if ck != c || kh > h + 2 * pad || kw > w + 2 * pad || stride == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;

    // For a kernel offset `kk` along an input dimension of size `dim`, the
    // output positions whose sampled input cell lands inside the (unpadded)
    // input form a contiguous half-open range. Hoisting that range out of
    // the inner loops removes all padding checks from the hot path.
    let valid_range = |kk: usize, dim: usize, out_dim: usize| -> (usize, usize) {
        let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
        let hi = if kk < dim + pad {
            (dim + pad - 1 - kk) / stride + 1
        } else {
            0
        };
        (lo.min(out_dim), hi.min(out_dim))
    };
    let row_range: Vec<(usize, usize)> =
        (0..kh).map(|ky| valid_range(ky, h, ho)).collect();
    let col_range: Vec<(usize, usize)> =
        (0..kw).map(|kx| valid_range(kx, w, wo)).collect();

    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![0.0; n * k * ho * wo];
    for ni in 0..n {
        for ko in 0..k {
            let obase = (ni * k + ko) * ho * wo;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * w;
                let wbase = (ko * c + ci) * kh * kw;
                for (ky, &(oy_lo, oy_hi)) in row_range.iter().enumerate() {
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let xrow = &x[xbase + iy * w..xbase + iy * w + w];
                        let orow =
                            &mut out[obase + oy * wo..obase + oy * wo + wo];
                        for (kx, &(ox_lo, ox_hi)) in
                            col_range.iter().enumerate()
                        {
                            let wv = wt[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for (ox, o) in
                                orow[ox_lo..ox_hi].iter_mut().enumerate()
                            {
                                let ix = (ox_lo + ox) * stride + kx - pad;
                                *o += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    let inp = input.clone();
    let ker = kernel.clone();
    Ok(Tensor::from_op(
        vec![n, k, ho, wo],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |_, g| {
            let x = inp.data();
            let wt = ker.data();
            let mut gx = vec![0.0; n * c * h * w];
            let mut gw = vec![0.0; k * c * kh * kw];
            for ni in 0..n {
                for ko in 0..k {
                    let gbase = (ni * k + ko) * ho * wo;
                    for ci in 0..c {
                        let xbase = (ni * c + ci) * h * w;
                        let wbase = (ko * c + ci) * kh * kw;
                        for (ky, &(oy_lo, oy_hi)) in row_range.iter().enumerate() {
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow =
                                    &g[gbase + oy * wo..gbase + oy * wo + wo];
                                let xoff = xbase + iy * w;
                                for (kx, &(ox_lo, ox_hi)) in
                                    col_range.iter().enumerate()
                                {
                                    let wi = wbase + ky * kw + kx;
                                    let wv = wt[wi];
                                    let mut acc = 0.0;
                                    for (j, &gv) in
                                        grow[ox_lo..ox_hi].iter().enumerate()
                                    {
                                        let ix =
                                            (ox_lo + j) * stride + kx - pad;
                                        gx[xoff + ix] += gv * wv;
                                        acc += gv * x[xoff + ix];
                                    }
                                    gw[wi] += acc;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw)]
        }),
        "conv2d",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_product_case() {
        let x = Tensor::leaf(&[1, 1, 1, 1], vec![3.0], false);
        let k = Tensor::leaf(&[1, 1, 1, 1], vec![2.0], false);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_preserves_map() {
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = Tensor::leaf(&[1, 1, 3, 3], data.clone(), false);
        let k = Tensor::leaf(&[1, 1, 1, 1], vec![1.0], false);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn output_shape_formula() {
        let x = Tensor::leaf(&[1, 2, 8, 8], vec![0.0; 128], false);
        let k = Tensor::leaf(&[4, 2, 3, 3], vec![0.0; 72], false);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::leaf(&[1, 2, 4, 4], vec![0.0; 32], false);
        let k = Tensor::leaf(&[1, 3, 3, 3], vec![0.0; 27], false);
        let err = conv2d(&x, &k, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn kernel_larger_than_padded_input_rejected() {
        let x = Tensor::leaf(&[1, 1, 2, 2], vec![0.0; 4], false);
        let k = Tensor::leaf(&[1, 1, 5, 5], vec![0.0; 25], false);
        assert!(conv2d(&x, &k, 1, 0).is_err());
    }
}
