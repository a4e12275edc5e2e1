//! Elementwise ops, reductions, and the matrix operations used by the
//! encoder and loss code.

use super::Tensor;

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape("add", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
            "add",
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape("sub", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            }),
            "sub",
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape("mul", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
            "mul",
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * c).collect())]),
            "scale",
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
            "add_scalar",
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }),
            "relu",
        )
    }

    /// Elementwise x^gamma on nonnegative inputs. The gradient is zero
    /// wherever x == 0, matching the clamped-similarity convention.
    pub fn pow_nonneg(&self, gamma: f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|v| {
                debug_assert!(*v >= 0.0, "pow_nonneg on negative input {v}");
                v.powf(gamma)
            })
            .collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            g * gamma * x.powf(gamma - 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(gx)]
            }),
            "pow_nonneg",
        )
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
            "sum",
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Reinterpret the same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape: {:?} incompatible with {:?}",
            shape,
            self.shape()
        );
        Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
            "reshape",
        )
    }

    /// Matrix product of `self [N,K]` with the transpose of `other [M,K]`,
    /// yielding `[N,M]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul_nt: lhs must be 2-d");
        assert_eq!(other.shape().len(), 2, "matmul_nt: rhs must be 2-d");
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (m, k2) = (other.shape()[0], other.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul_nt: inner dims differ: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i * k + t] * b[j * k + t];
                }
                out[i * m + j] = acc;
            }
        }
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                // dL/dA = G B, dL/dB = G^T A
                let a = lhs.data();
                let b = rhs.data();
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            ga[i * k + t] += gv * b[j * k + t];
                            gb[j * k + t] += gv * a[i * k + t];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
            "matmul_nt",
        )
    }

    /// Matrix product `self [N,K] * other [K,M] -> [N,M]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be 2-d");
        assert_eq!(other.shape().len(), 2, "matmul: rhs must be 2-d");
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (other.shape()[0], other.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul: inner dims differ: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += av * b[t * m + j];
                }
            }
        }
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                // dL/dA = G B^T, dL/dB = A^T G
                let a = lhs.data();
                let b = rhs.data();
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            ga[i * k + t] += gv * b[t * m + j];
                            gb[t * m + j] += gv * a[i * k + t];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
            "matmul",
        )
    }

    /// 2x2 average pooling with stride 2 on a `[N,C,H,W]` map (H, W even).
    pub fn avg_pool2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 4, "avg_pool2: input must be 4-d");
        let (n, c, h, w) = dims4(self.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims {h}x{w}");
        let (h2, w2) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for i in 0..n * c {
            for r in 0..h2 {
                for q in 0..w2 {
                    let base = i * h * w + 2 * r * w + 2 * q;
                    out[i * h2 * w2 + r * w2 + q] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        Tensor::from_op(
            vec![n, c, h2, w2],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * c * h * w];
                for i in 0..n * c {
                    for r in 0..h2 {
                        for q in 0..w2 {
                            let gv = 0.25 * g[i * h2 * w2 + r * w2 + q];
                            let base = i * h * w + 2 * r * w + 2 * q;
                            gx[base] += gv;
                            gx[base + 1] += gv;
                            gx[base + w] += gv;
                            gx[base + w + 1] += gv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
            "avg_pool2",
        )
    }

    /// Normalize each row of a `[N,d]` matrix to unit length, with the
    /// denominator clamped at `eps`. Through the clamp the denominator is
    /// treated as the constant `eps`, so the gradient there is `I/eps`.
    pub fn row_normalize(&self, eps: f64) -> Tensor {
        assert_eq!(self.shape().len(), 2, "row_normalize: input must be 2-d");
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = nrm.max(eps);
            norms[i] = nrm;
            for t in 0..d {
                out[i * d + t] = row[t] / denom;
            }
        }
        let src = self.clone();
        Tensor::from_op(
            vec![n, d],
            out,
            vec![self.clone()],
            Box::new(move |out_data, g| {
                let x = src.data();
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let nrm = {
                        let row = &x[i * d..(i + 1) * d];
                        row.iter().map(|v| v * v).sum::<f64>().sqrt()
                    };
                    if nrm > eps {
                        // d(x/|x|)/dx = (I - y y^T) / |x|
                        let y = &out_data[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for t in 0..d {
                            gx[i * d + t] = (gr[t] - y[t] * dot) / nrm;
                        }
                    } else {
                        for t in 0..d {
                            gx[i * d + t] = g[i * d + t] / eps;
                        }
                    }
                }
                vec![Some(gx)]
            }),
            "row_normalize",
        )
    }

    /// Spatial mean over H and W: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Tensor {
        assert_eq!(self.shape().len(), 4, "global_avg_pool: input must be 4-d");
        let (n, c, h, w) = dims4(self.shape());
        let hw = h * w;
        let x = self.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = x[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    let gv = g[i] / hw as f64;
                    for t in 0..hw {
                        gx[i * hw + t] = gv;
                    }
                }
                vec![Some(gx)]
            }),
            "global_avg_pool",
        )
    }

    /// Nearest-neighbour 2x upsampling of a `[N,C,H,W]` map.
    pub fn upsample_nearest2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 4, "upsample_nearest2: input must be 4-d");
        let (n, c, h, w) = dims4(self.shape());
        let x = self.data();
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        for i in 0..n * c {
            for r in 0..h2 {
                for q in 0..w2 {
                    out[i * h2 * w2 + r * w2 + q] = x[i * h * w + (r / 2) * w + q / 2];
                }
            }
        }
        Tensor::from_op(
            vec![n, c, h2, w2],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * c * h * w];
                for i in 0..n * c {
                    for r in 0..h2 {
                        for q in 0..w2 {
                            gx[i * h * w + (r / 2) * w + q / 2] +=
                                g[i * h2 * w2 + r * w2 + q];
                        }
                    }
                }
                vec![Some(gx)]
            }),
            "upsample_nearest2",
        )
    }

    /// Extract image `n`'s feature cells from a `[N,d,h,w]` map as a
    /// `[h*w, d]` matrix, rows in row-major cell order.
    pub fn image_cells(&self, n_idx: usize) -> Tensor {
        assert_eq!(self.shape().len(), 4, "image_cells: input must be 4-d");
        let (n, d, h, w) = dims4(self.shape());
        assert!(n_idx < n, "image_cells: index {n_idx} out of batch {n}");
        let hw = h * w;
        let x = self.data();
        let mut out = vec![0.0; hw * d];
        for c in 0..d {
            for cell in 0..hw {
                out[cell * d + c] = x[n_idx * d * hw + c * hw + cell];
            }
        }
        Tensor::from_op(
            vec![hw, d],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * d * hw];
                for c in 0..d {
                    for cell in 0..hw {
                        gx[n_idx * d * hw + c * hw + cell] = g[cell * d + c];
                    }
                }
                vec![Some(gx)]
            }),
            "image_cells",
        )
    }

    /// Row `i` of a 2-d matrix as a vector tensor.
    pub fn select_row(&self, i: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "select_row: input must be 2-d");
        let (n, m) = (self.shape()[0], self.shape()[1]);
        assert!(i < n, "select_row: row {i} out of {n}");
        let out = self.data()[i * m..(i + 1) * m].to_vec();
        Tensor::from_op(
            vec![m],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * m];
                gx[i * m..(i + 1) * m].copy_from_slice(g);
                vec![Some(gx)]
            }),
            "select_row",
        )
    }

    /// Numerically stable log-sum-exp over the entries of a vector where
    /// `mask` is true. The mask must select at least one entry.
    pub fn masked_lse(&self, mask: &[bool]) -> Tensor {
        assert_eq!(self.shape().len(), 1, "masked_lse: input must be 1-d");
        assert_eq!(mask.len(), self.numel(), "masked_lse: mask length mismatch");
        assert!(mask.iter().any(|m| *m), "masked_lse: empty mask");
        let x = self.data();
        let mx = x
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| (v - mx).exp())
            .sum();
        let out = mx + s.ln();
        let mask_owned: Vec<bool> = mask.to_vec();
        let src = self.clone();
        Tensor::from_op(
            vec![1],
            vec![out],
            vec![self.clone()],
            Box::new(move |out_data, g| {
                let lse = out_data[0];
                let gx = src
                    .data()
                    .iter()
                    .zip(&mask_owned)
                    .map(|(v, m)| if *m { g[0] * (v - lse).exp() } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }),
            "masked_lse",
        )
    }

    /// Mean of the entries of a `[N,M]` matrix selected by `mask`.
    pub fn masked_mean(&self, mask: &[bool]) -> Tensor {
        assert_eq!(mask.len(), self.numel(), "masked_mean: mask length mismatch");
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 0, "masked_mean: empty mask");
        let total: f64 = self
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .sum();
        let mask_owned: Vec<bool> = mask.to_vec();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total / count as f64],
            vec![self.clone()],
            Box::new(move |_, g| {
                let gv = g[0] / count as f64;
                let mut gx = vec![0.0; n];
                for (t, m) in gx.iter_mut().zip(&mask_owned) {
                    if *m {
                        *t = gv;
                    }
                }
                vec![Some(gx)]
            }),
            "masked_mean",
        )
    }

    /// Per-channel bias broadcast over a `[N,K,H,W]` map.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 4, "add_channel_bias: input must be 4-d");
        let (n, k, h, w) = dims4(self.shape());
        assert_eq!(
            bias.shape(),
            &[k],
            "add_channel_bias: bias shape {:?} vs {k} channels",
            bias.shape()
        );
        let hw = h * w;
        let b = bias.data();
        let mut out = self.data().to_vec();
        for i in 0..n {
            for c in 0..k {
                let bv = b[c];
                for t in 0..hw {
                    out[(i * k + c) * hw + t] += bv;
                }
            }
        }
        Tensor::from_op(
            vec![n, k, h, w],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g| {
                let mut gb = vec![0.0; k];
                for i in 0..n {
                    for c in 0..k {
                        gb[c] += g[(i * k + c) * hw..(i * k + c + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
            "add_channel_bias",
        )
    }
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Sum of a non-empty list of scalar tensors.
pub fn sum_scalars(terms: &[Tensor]) -> Tensor {
    assert!(!terms.is_empty(), "sum_scalars: no terms");
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t);
    }
    acc
}

/// Reassemble per-image `[h*w, d]` cell matrices into a `[N,d,h,w]` map
/// (inverse of [`Tensor::image_cells`] applied per image).
pub fn cells_to_map(cells: &[Tensor], h: usize, w: usize) -> Tensor {
    assert!(!cells.is_empty(), "cells_to_map: empty batch");
    let hw = h * w;
    let d = cells[0].shape()[1];
    for c in cells {
        assert_eq!(c.shape(), &[hw, d], "cells_to_map: inconsistent cell shape");
    }
    let n = cells.len();
    let mut out = vec![0.0; n * d * hw];
    for (ni, cell) in cells.iter().enumerate() {
        let x = cell.data();
        for c in 0..d {
            for t in 0..hw {
                out[ni * d * hw + c * hw + t] = x[t * d + c];
            }
        }
    }
    Tensor::from_op(
        vec![n, d, h, w],
        out,
        cells.to_vec(),
        Box::new(move |_, g| {
            (0..n)
                .map(|ni| {
                    let mut gc = vec![0.0; hw * d];
                    for c in 0..d {
                        for t in 0..hw {
                            gc[t * d + c] = g[ni * d * hw + c * hw + t];
                        }
                    }
                    Some(gc)
                })
                .collect()
        }),
        "cells_to_map",
    )
}

/// Cosine similarity matrix between the rows of `x [N,d]` and `y [M,d]`.
/// Zero rows are handled by clamping the norm at `eps`.
pub fn cosine_matrix(x: &Tensor, y: &Tensor, eps: f64) -> Tensor {
    x.row_normalize(eps).matmul_nt(&y.row_normalize(eps))
}
