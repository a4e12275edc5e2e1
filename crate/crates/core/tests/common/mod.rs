//! Independent reference implementations used as test oracles. These are
//! deliberately written as plain nested loops over raw slices, sharing no
//! code with the library, so that agreement between the two is meaningful.
#![allow(dead_code)] // each integration-test target uses a subset

use pixpro::viewgen::CropRecord;

/// Positive/negative pairing of feature cells computed by direct
/// enumeration: warp every cell center of both grids into original-image
/// pixels, measure straight-line distance, normalize by the larger of the
/// two views' bin diagonals, and threshold.
pub fn brute_force_assignment(
    rec_a: &CropRecord,
    rec_b: &CropRecord,
    feat_res: usize,
    t: f64,
) -> Vec<bool> {
    let centers = |rec: &CropRecord| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for r in 0..feat_res {
            for c in 0..feat_res {
                let col = if rec.flip { feat_res - 1 - c } else { c };
                let x = rec.x0 as f64 + (col as f64 + 0.5) * rec.w as f64 / feat_res as f64;
                let y = rec.y0 as f64 + (r as f64 + 0.5) * rec.h as f64 / feat_res as f64;
                out.push((x, y));
            }
        }
        out
    };
    let diag = |rec: &CropRecord| -> f64 {
        let side = ((rec.w * rec.h) as f64).sqrt();
        side / feat_res as f64 * 2f64.sqrt()
    };
    let ca = centers(rec_a);
    let cb = centers(rec_b);
    let norm = diag(rec_a).max(diag(rec_b));
    let mut out = Vec::with_capacity(ca.len() * cb.len());
    for (ax, ay) in &ca {
        for (bx, by) in &cb {
            let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() / norm;
            out.push(d <= t);
        }
    }
    out
}

/// Direct quadratic-time propagation over one image's cells:
/// `y_i = sum_j max(cos(x_i, x_j), 0)^gamma * g(x_j)`, with `g` a stack of
/// `layers` pointwise linear maps separated by batch norm + relu.
///
/// `cells` is row-major `[n_cells][dim]`; the weight of layer `i` is
/// `g_w[i]` in row-major `[dim][dim]` with bias `g_b[i]`; `bn` holds the
/// (scale, shift) pairs applied between layers.
pub fn ppm_reference(
    cells: &[Vec<f64>],
    gamma: f64,
    layers: usize,
    g_w: &[Vec<f64>],
    g_b: &[Vec<f64>],
    bn: &[(Vec<f64>, Vec<f64>)],
    bn_eps: f64,
) -> Vec<Vec<f64>> {
    let d = cells[0].len();
    let mut transformed: Vec<Vec<f64>> = cells.to_vec();
    for layer in 0..layers {
        let mut next = Vec::with_capacity(transformed.len());
        for v in &transformed {
            let mut out = vec![0.0; d];
            for (row, o) in out.iter_mut().enumerate() {
                let mut acc = g_b[layer][row];
                for (col, x) in v.iter().enumerate() {
                    acc += g_w[layer][row * d + col] * x;
                }
                *o = acc;
            }
            next.push(out);
        }
        if layer + 1 < layers {
            // Batch norm over all cells, biased variance, then relu.
            let n = next.len() as f64;
            let (scale, shift) = &bn[layer];
            for ch in 0..d {
                let mean = next.iter().map(|v| v[ch]).sum::<f64>() / n;
                let var = next.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + bn_eps).sqrt();
                for v in next.iter_mut() {
                    v[ch] = (scale[ch] * (v[ch] - mean) * inv + shift[ch]).max(0.0);
                }
            }
        }
        transformed = next;
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(cells.len());
    for xi in cells {
        let mut acc = vec![0.0; d];
        for (xj, gj) in cells.iter().zip(&transformed) {
            let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            let cos = dot / (norm(xi) * norm(xj));
            let sim = cos.max(0.0).powf(gamma);
            for (a, g) in acc.iter_mut().zip(gj) {
                *a += sim * g;
            }
        }
        out.push(acc);
    }
    out
}

/// Textbook cross-correlation with zero padding, one output value at a
/// time. `x` is `[n][c][h][w]`, `k` is `[ko][c][kh][kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    ko: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * ko * ho * wo];
    for ni in 0..n {
        for kk in 0..ko {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * w + ix as usize;
                                let wi = ((kk * c + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * k[wi];
                            }
                        }
                    }
                    out[((ni * ko + kk) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}
