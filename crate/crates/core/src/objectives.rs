//! Training objectives: pixel-level contrastive loss, pixel-to-propagation
//! consistency, the instance-level branch, their combination, and
//! multi-level averaging.
//!
//! Per-image losses operate on cell matrices `[HW, d]` (rows in the same
//! row-major order as the warp grid). Batch averaging is the trainer's
//! job. A view pair with no positive pairs yields [`LossOutcome::Skipped`],
//! a typed outcome the trainer counts and moves past.

use crate::encoder::COSINE_EPS;
use crate::error::PixproError;
use crate::tensor::ops::{cosine_matrix, sum_scalars};
use crate::tensor::Tensor;
use crate::viewgen::AssignmentMatrix;

/// A loss evaluation that may be skipped (no overlap / no positives).
#[derive(Debug, Clone)]
pub enum LossOutcome {
    Value(Tensor),
    Skipped,
}

impl LossOutcome {
    pub fn value(&self) -> Option<&Tensor> {
        match self {
            LossOutcome::Value(t) => Some(t),
            LossOutcome::Skipped => None,
        }
    }
}

/// Scalar components of one training step's loss.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub pix_component: f64,
    pub instance_component: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Pixel-level contrastive loss for one image.
///
/// Direction one scores each qualifying cell of view A (nonempty positive
/// set) against the momentum cells of view B; direction two is the
/// symmetric term. The result averages the two directions.
pub fn pix_contrast_loss(
    x_a: &Tensor,
    x_b: &Tensor,
    x_a_momentum: &Tensor,
    x_b_momentum: &Tensor,
    assign: &AssignmentMatrix,
    tau: f64,
) -> LossOutcome {
    assert!(tau > 0.0, "temperature must be positive");
    if assign.count_positive() == 0 {
        return LossOutcome::Skipped;
    }
    let dir_a = contrast_direction(x_a, x_b_momentum, assign, tau);
    let dir_b = contrast_direction(x_b, x_a_momentum, &assign.transpose(), tau);
    match (dir_a, dir_b) {
        (Some(a), Some(b)) => LossOutcome::Value(a.add(&b).scale(0.5)),
        (Some(a), None) => LossOutcome::Value(a),
        (None, Some(b)) => LossOutcome::Value(b),
        (None, None) => LossOutcome::Skipped,
    }
}

fn contrast_direction(
    anchors: &Tensor,
    targets_momentum: &Tensor,
    assign: &AssignmentMatrix,
    tau: f64,
) -> Option<Tensor> {
    let logits = cosine_matrix(anchors, targets_momentum, COSINE_EPS).scale(1.0 / tau);
    let all = vec![true; assign.cols];
    let mut terms = Vec::new();
    for i in 0..assign.rows {
        let mask = assign.row_mask(i);
        if !mask.iter().any(|m| *m) {
            continue; // cell outside the views' intersection
        }
        let row = logits.select_row(i);
        terms.push(row.masked_lse(&all).sub(&row.masked_lse(mask)));
    }
    if terms.is_empty() {
        None
    } else {
        let n = terms.len() as f64;
        Some(sum_scalars(&terms).scale(1.0 / n))
    }
}

/// Pixel-to-propagation consistency loss for one image:
/// `-cos(y_i, x'_j) - cos(y_j, x'_i)` averaged over the positive pairs.
pub fn pixpro_loss(
    y_a: &Tensor,
    y_b: &Tensor,
    x_a_momentum: &Tensor,
    x_b_momentum: &Tensor,
    assign: &AssignmentMatrix,
) -> LossOutcome {
    if assign.count_positive() == 0 {
        return LossOutcome::Skipped;
    }
    let c_ab = cosine_matrix(y_a, x_b_momentum, COSINE_EPS);
    let c_ba = cosine_matrix(y_b, x_a_momentum, COSINE_EPS);
    let t1 = c_ab.masked_mean(&assign.positives.to_vec());
    let tr = assign.transpose();
    let t2 = c_ba.masked_mean(&tr.positives.to_vec());
    LossOutcome::Value(t1.add(&t2).scale(-1.0))
}

/// Instance-level InfoNCE over a batch of global embeddings, symmetrized
/// over the two (online, momentum) directions. Needs at least two images
/// in the batch for negatives to exist.
pub fn instance_loss(
    z_a: &Tensor,
    z_b: &Tensor,
    z_a_momentum: &Tensor,
    z_b_momentum: &Tensor,
    tau: f64,
) -> Result<Tensor, PixproError> {
    assert!(tau > 0.0, "temperature must be positive");
    let n = z_a.shape()[0];
    if n < 2 {
        return Err(PixproError::Eval(
            "instance loss needs a batch of at least 2 (no negatives otherwise)".into(),
        ));
    }
    let dir = |online: &Tensor, momentum: &Tensor| -> Tensor {
        let logits = cosine_matrix(online, momentum, COSINE_EPS).scale(1.0 / tau);
        let all = vec![true; n];
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let mut pos = vec![false; n];
            pos[i] = true;
            let row = logits.select_row(i);
            terms.push(row.masked_lse(&all).sub(&row.masked_lse(&pos)));
        }
        sum_scalars(&terms).scale(1.0 / n as f64)
    };
    let a = dir(z_a, z_b_momentum);
    let b = dir(z_b, z_a_momentum);
    Ok(a.add(&b).scale(0.5))
}

/// Weighted combination `total = pix + alpha * inst`.
pub fn combined_loss(pix: &Tensor, inst: Option<&Tensor>, alpha: f64) -> Tensor {
    assert!(alpha >= 0.0, "alpha must be nonnegative");
    match inst {
        Some(inst) if alpha > 0.0 => pix.add(&inst.scale(alpha)),
        _ => pix.clone(),
    }
}

/// Mean of the per-level losses, excluding levels that produced no
/// positive pairs. All levels empty means the whole image is skipped.
pub fn multiscale_loss(per_level: &[LossOutcome]) -> LossOutcome {
    let values: Vec<Tensor> = per_level
        .iter()
        .filter_map(|o| o.value().cloned())
        .collect();
    if values.is_empty() {
        LossOutcome::Skipped
    } else {
        let n = values.len() as f64;
        LossOutcome::Value(sum_scalars(&values).scale(1.0 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assignment(rows: usize, cols: usize, positives: &[(usize, usize)]) -> AssignmentMatrix {
        let mut mask = vec![false; rows * cols];
        for (i, j) in positives {
            mask[i * cols + j] = true;
        }
        AssignmentMatrix {
            positives: mask,
            rows,
            cols,
            threshold_used: 0.7,
        }
    }

    fn random_cells(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::leaf(
            &[n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            true,
        )
    }

    // scalar-arithmetic oracle for the pixel contrastive loss
    fn pix_contrast_oracle(
        x_a: &Tensor,
        x_b: &Tensor,
        x_am: &Tensor,
        x_bm: &Tensor,
        assign: &AssignmentMatrix,
        tau: f64,
    ) -> f64 {
        let cos = |x: &[f64], y: &[f64]| -> f64 {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dot / (nx * ny)
        };
        let direction = |anchors: &Tensor, targets: &Tensor, pos: &dyn Fn(usize, usize) -> bool| {
            let d = anchors.shape()[1];
            let n = anchors.shape()[0];
            let m = targets.shape()[0];
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..n {
                let pset: Vec<usize> = (0..m).filter(|j| pos(i, *j)).collect();
                if pset.is_empty() {
                    continue;
                }
                let row: Vec<f64> = (0..m)
                    .map(|j| {
                        (cos(
                            &anchors.data()[i * d..(i + 1) * d],
                            &targets.data()[j * d..(j + 1) * d],
                        ) / tau)
                            .exp()
                    })
                    .collect();
                let num: f64 = pset.iter().map(|j| row[*j]).sum();
                let den: f64 = row.iter().sum();
                sum += -(num / den).ln();
                count += 1;
            }
            (sum, count)
        };
        let (sa, ca) = direction(x_a, x_bm, &|i, j| assign.is_positive(i, j));
        let (sb, cb) = direction(x_b, x_am, &|j, i| assign.is_positive(i, j));
        let mut total = 0.0;
        let mut dirs = 0.0;
        if ca > 0 {
            total += sa / ca as f64;
            dirs += 1.0;
        }
        if cb > 0 {
            total += sb / cb as f64;
            dirs += 1.0;
        }
        total / dirs
    }

    #[test]
    fn one_positive_one_negative_equal_cosines_gives_ln2() {
        // anchor (1,0); targets at equal cosine to it
        let x = Tensor::constant(&[1, 2], vec![1.0, 0.0]);
        let targets = Tensor::constant(&[2, 2], vec![0.6, 0.8, 0.6, -0.8]);
        let assign = assignment(1, 2, &[(0, 0)]);
        // single direction: reuse the same anchor both ways by symmetry
        match pix_contrast_loss(&x, &targets, &x, &targets, &assign, 0.3) {
            LossOutcome::Value(_) => {}
            _ => panic!("expected value"),
        }
        // direction-level check via the oracle-free closed form
        let d = contrast_direction(&x, &targets, &assign, 0.3).unwrap();
        assert!((d.item() - std::f64::consts::LN_2).abs() < 1e-9, "{}", d.item());
    }

    #[test]
    fn all_pairs_positive_gives_zero() {
        let x = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let assign = assignment(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let loss = pix_contrast_loss(&x, &x, &x, &x, &assign, 0.3);
        assert!(loss.value().unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn pix_contrast_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x_a = random_cells(&mut rng, 3, 4);
            let x_b = random_cells(&mut rng, 3, 4);
            let x_am = random_cells(&mut rng, 3, 4);
            let x_bm = random_cells(&mut rng, 3, 4);
            let mut pos = Vec::new();
            for i in 0..3 {
                for j in 0..3 {
                    if rng.gen_bool(0.4) {
                        pos.push((i, j));
                    }
                }
            }
            let assign = assignment(3, 3, &pos);
            let got = pix_contrast_loss(&x_a, &x_b, &x_am, &x_bm, &assign, 0.3);
            if pos.is_empty() {
                assert!(matches!(got, LossOutcome::Skipped));
                continue;
            }
            let want = pix_contrast_oracle(&x_a, &x_b, &x_am, &x_bm, &assign, 0.3);
            let got = got.value().unwrap().item();
            assert!((got - want).abs() < 1e-6, "got {got} want {want}");
        }
    }

    #[test]
    fn pix_contrast_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let x_a = random_cells(&mut rng, 4, 3);
            let x_b = random_cells(&mut rng, 4, 3);
            let assign = assignment(4, 4, &[(0, 1), (2, 2), (3, 0)]);
            let loss = pix_contrast_loss(&x_a, &x_b, &x_a, &x_b, &assign, 0.3);
            assert!(loss.value().unwrap().item() >= -1e-12);
        }
    }

    #[test]
    fn pixpro_aligned_pairs_reach_minus_two() {
        // y_a ∝ x_b', y_b ∝ x_a' on the single positive pair
        let y_a = Tensor::constant(&[1, 3], vec![2.0, 4.0, 6.0]);
        let x_bm = Tensor::constant(&[1, 3], vec![1.0, 2.0, 3.0]);
        let y_b = Tensor::constant(&[1, 3], vec![0.5, 0.0, 0.5]);
        let x_am = Tensor::constant(&[1, 3], vec![1.0, 0.0, 1.0]);
        let assign = assignment(1, 1, &[(0, 0)]);
        let loss = pixpro_loss(&y_a, &y_b, &x_am, &x_bm, &assign);
        assert!((loss.value().unwrap().item() + 2.0).abs() < 1e-9);
    }

    #[test]
    fn pixpro_orthogonal_vectors_give_zero() {
        let y = Tensor::constant(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let xm = Tensor::constant(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let assign = assignment(2, 2, &[(0, 0), (1, 1)]);
        let loss = pixpro_loss(&y, &y, &xm, &xm, &assign);
        assert!(loss.value().unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn pixpro_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let y_a = random_cells(&mut rng, 4, 3);
            let y_b = random_cells(&mut rng, 4, 3);
            let x_am = random_cells(&mut rng, 4, 3);
            let x_bm = random_cells(&mut rng, 4, 3);
            let mut pos = Vec::new();
            for i in 0..4 {
                for j in 0..4 {
                    if rng.gen_bool(0.3) {
                        pos.push((i, j));
                    }
                }
            }
            if pos.is_empty() {
                continue;
            }
            let assign = assignment(4, 4, &pos);
            let got = pixpro_loss(&y_a, &y_b, &x_am, &x_bm, &assign)
                .value()
                .unwrap()
                .item();
            // direct evaluation over the enumerated positive set
            let cos = |x: &[f64], y: &[f64]| -> f64 {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dot / (nx * ny)
            };
            let want: f64 = pos
                .iter()
                .map(|(i, j)| {
                    -cos(&y_a.data()[i * 3..i * 3 + 3], &x_bm.data()[j * 3..j * 3 + 3])
                        - cos(&y_b.data()[j * 3..j * 3 + 3], &x_am.data()[i * 3..i * 3 + 3])
                })
                .sum::<f64>()
                / pos.len() as f64;
            assert!((got - want).abs() < 1e-6, "got {got} want {want}");
            assert!((-2.0..=2.0).contains(&got));
        }
    }

    #[test]
    fn pixpro_invariant_to_online_feature_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y_a = random_cells(&mut rng, 3, 4);
        let y_b = random_cells(&mut rng, 3, 4);
        let x_am = random_cells(&mut rng, 3, 4);
        let x_bm = random_cells(&mut rng, 3, 4);
        let assign = assignment(3, 3, &[(0, 0), (1, 2)]);
        let base = pixpro_loss(&y_a, &y_b, &x_am, &x_bm, &assign)
            .value()
            .unwrap()
            .item();
        let scaled = pixpro_loss(&y_a.scale(7.5), &y_b, &x_am, &x_bm, &assign)
            .value()
            .unwrap()
            .item();
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn cell_without_positives_never_anchors() {
        // a cell with an empty positive set is excluded as an anchor (it
        // still serves as a negative *target* in the opposite direction)
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x_a = random_cells(&mut rng, 3, 4);
        let x_bm = random_cells(&mut rng, 2, 4);
        // cell 2 of view A has no positives
        let assign = assignment(3, 2, &[(0, 0), (1, 1)]);
        let full = contrast_direction(&x_a, &x_bm, &assign, 0.3).unwrap().item();
        // drop cell 2 from the anchors entirely: same direction loss
        let x_a2 = Tensor::constant(&[2, 4], x_a.data()[..8].to_vec());
        let assign2 = assignment(2, 2, &[(0, 0), (1, 1)]);
        let reduced = contrast_direction(&x_a2, &x_bm, &assign2, 0.3).unwrap().item();
        assert!((full - reduced).abs() < 1e-9, "full {full} reduced {reduced}");
    }

    #[test]
    fn losses_invariant_under_cell_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 3;
        let n = 4;
        let x_a = random_cells(&mut rng, n, d);
        let x_b = random_cells(&mut rng, n, d);
        let pos = [(0usize, 1usize), (1, 1), (3, 2)];
        let assign = assignment(n, n, &pos);
        let base = pix_contrast_loss(&x_a, &x_b, &x_a, &x_b, &assign, 0.3)
            .value()
            .unwrap()
            .item();
        // permute rows of A (rotate by 1) consistently with assignment rows
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let mut pdata = vec![0.0; n * d];
        for i in 0..n {
            pdata[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(&x_a.data()[i * d..(i + 1) * d]);
        }
        let x_ap = Tensor::constant(&[n, d], pdata);
        let ppos: Vec<(usize, usize)> = pos.iter().map(|(i, j)| (perm[*i], *j)).collect();
        let passign = assignment(n, n, &ppos);
        let permuted = pix_contrast_loss(&x_ap, &x_b, &x_ap, &x_b, &passign, 0.3)
            .value()
            .unwrap()
            .item();
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn instance_two_logit_closed_form() {
        // batch 2: positive cosine 1, negative cosine 0, tau = 1
        let z = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let loss = instance_loss(&z, &z, &z, &z, 1.0).unwrap();
        let want = -((1f64.exp()) / (1f64.exp() + 1.0)).ln();
        assert!((loss.item() - want).abs() < 1e-9);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn instance_identical_embeddings_give_ln_batch() {
        let z = Tensor::constant(&[4, 2], [0.5, 0.5].repeat(4));
        let loss = instance_loss(&z, &z, &z, &z, 0.3).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn instance_batch_of_one_rejected() {
        let z = Tensor::constant(&[1, 2], vec![1.0, 0.0]);
        assert!(instance_loss(&z, &z, &z, &z, 0.3).is_err());
    }

    #[test]
    fn instance_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 4;
        let d = 3;
        let z_a = random_cells(&mut rng, n, d);
        let z_b = random_cells(&mut rng, n, d);
        let z_am = random_cells(&mut rng, n, d);
        let z_bm = random_cells(&mut rng, n, d);
        let tau = 0.3;
        let got = instance_loss(&z_a, &z_b, &z_am, &z_bm, tau).unwrap().item();
        let cos = |x: &[f64], y: &[f64]| -> f64 {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dot / (nx * ny)
        };
        let dir = |zo: &Tensor, zm: &Tensor| -> f64 {
            let mut total = 0.0;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|k| cos(&zo.data()[i * d..(i + 1) * d], &zm.data()[k * d..(k + 1) * d]) / tau)
                    .collect();
                let den: f64 = logits.iter().map(|l| l.exp()).sum();
                total += -(logits[i].exp() / den).ln();
            }
            total / n as f64
        };
        let want = 0.5 * (dir(&z_a, &z_bm) + dir(&z_b, &z_am));
        assert!((got - want).abs() < 1e-6, "got {got} want {want}");
    }

    #[test]
    fn combined_loss_arithmetic_and_gradient_linearity() {
        let pix = Tensor::leaf(&[1], vec![-1.5], true);
        let inst = Tensor::leaf(&[1], vec![0.3], true);
        assert_eq!(combined_loss(&pix, Some(&inst), 0.0).item(), -1.5);
        let total = combined_loss(&pix, Some(&inst), 1.0);
        assert!((total.item() + 1.2).abs() < 1e-12);
        total.backward().unwrap();
        assert_eq!(pix.grad().unwrap(), vec![1.0]);
        assert_eq!(inst.grad().unwrap(), vec![1.0]);
        // alpha scales the instance gradient
        let pix2 = Tensor::leaf(&[1], vec![-1.5], true);
        let inst2 = Tensor::leaf(&[1], vec![0.3], true);
        combined_loss(&pix2, Some(&inst2), 2.5).backward().unwrap();
        assert_eq!(inst2.grad().unwrap(), vec![2.5]);
    }

    #[test]
    fn multiscale_averaging() {
        let a = LossOutcome::Value(Tensor::scalar(1.0));
        let b = LossOutcome::Value(Tensor::scalar(3.0));
        match multiscale_loss(std::slice::from_ref(&a)) {
            LossOutcome::Value(v) => assert_eq!(v.item(), 1.0),
            _ => panic!(),
        }
        match multiscale_loss(&[a.clone(), b]) {
            LossOutcome::Value(v) => assert_eq!(v.item(), 2.0),
            _ => panic!(),
        }
        match multiscale_loss(&[a.clone(), LossOutcome::Skipped]) {
            LossOutcome::Value(v) => assert_eq!(v.item(), 1.0),
            _ => panic!(),
        }
        assert!(matches!(
            multiscale_loss(&[LossOutcome::Skipped]),
            LossOutcome::Skipped
        ));
        // identical levels equal the single-level value
        match multiscale_loss(&[a.clone(), a.clone(), a]) {
            LossOutcome::Value(v) => assert_eq!(v.item(), 1.0),
            _ => panic!(),
        }
    }
}
