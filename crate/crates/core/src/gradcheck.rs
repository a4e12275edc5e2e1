//! Central finite-difference gradient oracle.
//!
//! Every differentiable operation in the crate is expected to agree with
//! this oracle to a relative error below 1e-4 in 64-bit precision.

use crate::encoder::{ppm_forward, similarity_matrix, EncoderConfig, ForwardCtx, Mode, PpmMode};
use crate::error::TensorError;
use crate::objectives::{
    combined_loss, instance_loss, pix_contrast_loss, pixpro_loss, LossOutcome,
};
use crate::params::{BufferSet, LeafSet};
use crate::tensor::ops::cosine_matrix;
use crate::tensor::{batch_norm_train, conv2d, Tensor};
use crate::viewgen::AssignmentMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A scalar function of a fixed set of leaf parameters.
///
/// The closure receives freshly constructed leaves (one per parameter
/// point) and must rebuild its graph from them on every call.
pub trait ScalarFn {
    fn eval(&self, params: &[Tensor]) -> Tensor;
}

impl<F: Fn(&[Tensor]) -> Tensor> ScalarFn for F {
    fn eval(&self, params: &[Tensor]) -> Tensor {
        self(params)
    }
}

/// One parameter point: shape plus flattened values.
#[derive(Debug, Clone)]
pub struct ParamPoint {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamPoint {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        ParamPoint {
            shape: shape.to_vec(),
            values,
        }
    }
}

fn make_leaves(points: &[ParamPoint]) -> Vec<Tensor> {
    points
        .iter()
        .map(|p| Tensor::leaf(&p.shape, p.values.clone(), true))
        .collect()
}

/// Evaluate `f` at a point; a non-finite intermediate (which the tensor
/// core treats as a hard error) is reported as `NonFinite` at `index`.
fn eval_at<F: ScalarFn>(f: &F, points: &[ParamPoint], index: usize) -> Result<f64, TensorError> {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        f.eval(&make_leaves(points)).item()
    }));
    match result {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(TensorError::NonFinite { index }),
    }
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the maximum over all parameter coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F: ScalarFn>(
    f: &F,
    points: &[ParamPoint],
    h: f64,
) -> Result<f64, TensorError> {
    // analytic pass
    let leaves = make_leaves(points);
    let loss = f.eval(&leaves);
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut max_err = 0.0f64;
    let mut flat_index = 0usize;
    for (pi, point) in points.iter().enumerate() {
        for (vi, &a) in analytic[pi].iter().enumerate().take(point.values.len()) {
            let mut plus = points.to_vec();
            plus[pi].values[vi] += h;
            let mut minus = points.to_vec();
            minus[pi].values[vi] -= h;
            let fp = eval_at(f, &plus, flat_index)?;
            let fm = eval_at(f, &minus, flat_index)?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
            flat_index += 1;
        }
    }
    Ok(max_err)
}

pub const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const INSTANCES: usize = 20;

/// Outcome of the full suite: per-check name and either the maximum
/// relative error seen over all instances or the failure.
pub struct SuiteResult {
    pub checks: Vec<(String, Result<f64, TensorError>)>,
}

impl SuiteResult {
    pub fn all_passed(&self) -> bool {
        self.checks
            .iter()
            .all(|(_, r)| matches!(r, Ok(e) if *e < GRAD_TOL))
    }
}

fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random `[rows, d]` cell matrix whose pairwise cosines (and self
/// cosines against `other`, when given) stay clear of the clamp kink at
/// zero, so central differences are valid.
fn safe_cells(rng: &mut ChaCha8Rng, rows: usize, d: usize, other: Option<&[f64]>) -> Vec<f64> {
    'outer: loop {
        let vals = rand_vals(rng, rows * d);
        let all_rows: Vec<&[f64]> = vals
            .chunks(d)
            .chain(other.iter().flat_map(|o| o.chunks(d)))
            .collect();
        for r in &all_rows {
            let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 0.3 {
                continue 'outer;
            }
        }
        for (i, a) in all_rows.iter().enumerate() {
            for b in all_rows.iter().skip(i + 1) {
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (dot / (na * nb)).abs() < 1e-3 {
                    continue 'outer;
                }
            }
        }
        return vals;
    }
}

fn random_assignment(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> AssignmentMatrix {
    loop {
        let positives: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.3)).collect();
        if positives.iter().any(|p| *p) {
            return AssignmentMatrix {
                positives,
                rows,
                cols,
                threshold_used: 0.7,
            };
        }
    }
}

fn worst_over_instances(
    rng: &mut ChaCha8Rng,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64, TensorError>,
) -> Result<f64, TensorError> {
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        worst = worst.max(one(rng)?);
    }
    Ok(worst)
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let stride = rng.gen_range(1..=2);
        let x = ParamPoint::new(&[2, 2, 5, 5], rand_vals(rng, 100));
        let k = ParamPoint::new(&[3, 2, 3, 3], rand_vals(rng, 54));
        let side = (5 + 2 - 3) / stride + 1;
        let w_shape = [2, 3, side, side];
        let weights = Tensor::constant(&w_shape, rand_vals(rng, w_shape.iter().product()));
        let f = move |p: &[Tensor]| conv2d(&p[0], &p[1], stride, 1).unwrap().mul(&weights).sum();
        finite_diff_check(&f, &[x, k], STEP)
    })
}

fn check_batch_norm(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let x = ParamPoint::new(&[2, 3, 2, 2], rand_vals(rng, 24));
        let gamma = ParamPoint::new(&[3], (0..3).map(|_| rng.gen_range(0.5..1.5)).collect());
        let beta = ParamPoint::new(&[3], rand_vals(rng, 3));
        let weights = Tensor::constant(&[2, 3, 2, 2], rand_vals(rng, 24));
        let f = move |p: &[Tensor]| {
            let (y, _, _) = batch_norm_train(&p[0], &p[1], &p[2], 1e-5).unwrap();
            y.mul(&weights).sum()
        };
        finite_diff_check(&f, &[x, gamma, beta], STEP)
    })
}

fn check_cosine(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let a_vals = safe_cells(rng, 3, 4, None);
        let b_vals = safe_cells(rng, 3, 4, Some(&a_vals));
        let a = ParamPoint::new(&[3, 4], a_vals);
        let b = ParamPoint::new(&[3, 4], b_vals);
        let weights = Tensor::constant(&[3, 3], rand_vals(rng, 9));
        let f = move |p: &[Tensor]| cosine_matrix(&p[0], &p[1], 1e-12).mul(&weights).sum();
        finite_diff_check(&f, &[a, b], STEP)
    })
}

fn check_similarity(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let gamma = [2.0, 4.0][rng.gen_range(0..2)];
        let a_vals = safe_cells(rng, 3, 4, None);
        let b_vals = safe_cells(rng, 3, 4, Some(&a_vals));
        let a = ParamPoint::new(&[3, 4], a_vals);
        let b = ParamPoint::new(&[3, 4], b_vals);
        let weights = Tensor::constant(&[3, 3], rand_vals(rng, 9));
        let f = move |p: &[Tensor]| similarity_matrix(&p[0], &p[1], gamma).mul(&weights).sum();
        finite_diff_check(&f, &[a, b], STEP)
    })
}

fn check_ppm(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let d = 3;
        let (h, w) = (2, 2);
        let map_vals = safe_cells(rng, h * w, d, None);
        // [h*w, d] cells -> [1, d, h, w] map layout
        let mut chw = vec![0.0; d * h * w];
        for cell in 0..h * w {
            for ch in 0..d {
                chw[ch * h * w + cell] = map_vals[cell * d + ch];
            }
        }
        let map = ParamPoint::new(&[1, d, h, w], chw);
        let gw = ParamPoint::new(&[d, d, 1, 1], rand_vals(rng, d * d));
        let gb = ParamPoint::new(&[d], rand_vals(rng, d));
        let weights = Tensor::constant(&[1, d, h, w], rand_vals(rng, d * h * w));
        let cfg = EncoderConfig {
            embed_dim: d,
            ppm_mode: PpmMode::Propagation { layers: 1 },
            gamma: 2.0,
            ..EncoderConfig::default()
        };
        let f = move |p: &[Tensor]| {
            let leaves = LeafSet::from_named(vec![
                ("ppm.g0.w".to_string(), p[1].clone()),
                ("ppm.g0.b".to_string(), p[2].clone()),
            ]);
            let mut buffers = BufferSet::new();
            let mut ctx = ForwardCtx {
                leaves: &leaves,
                buffers: &mut buffers,
                mode: Mode::Train,
                update_stats: false,
            };
            ppm_forward(&p[0], &cfg, &mut ctx).unwrap().mul(&weights).sum()
        };
        finite_diff_check(&f, &[map, gw, gb], STEP)
    })
}

fn check_pix_contrast(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let assign = random_assignment(rng, 3, 3);
        let mk = |rng: &mut ChaCha8Rng| ParamPoint::new(&[3, 4], safe_cells(rng, 3, 4, None));
        let pts = vec![mk(rng), mk(rng), mk(rng), mk(rng)];
        let f = move |p: &[Tensor]| {
            match pix_contrast_loss(&p[0], &p[1], &p[2], &p[3], &assign, 0.3) {
                LossOutcome::Value(v) => v,
                LossOutcome::Skipped => unreachable!("assignment has positives"),
            }
        };
        finite_diff_check(&f, &pts, STEP)
    })
}

fn check_pixpro(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let assign = random_assignment(rng, 3, 3);
        let mk = |rng: &mut ChaCha8Rng| ParamPoint::new(&[3, 4], safe_cells(rng, 3, 4, None));
        let pts = vec![mk(rng), mk(rng), mk(rng), mk(rng)];
        let f = move |p: &[Tensor]| match pixpro_loss(&p[0], &p[1], &p[2], &p[3], &assign) {
            LossOutcome::Value(v) => v,
            LossOutcome::Skipped => unreachable!(),
        };
        finite_diff_check(&f, &pts, STEP)
    })
}

fn check_instance(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let mk = |rng: &mut ChaCha8Rng| ParamPoint::new(&[4, 3], safe_cells(rng, 4, 3, None));
        let pts = vec![mk(rng), mk(rng), mk(rng), mk(rng)];
        let f = |p: &[Tensor]| instance_loss(&p[0], &p[1], &p[2], &p[3], 0.3).unwrap();
        finite_diff_check(&f, &pts, STEP)
    })
}

fn check_combined(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    worst_over_instances(rng, |rng| {
        let assign = random_assignment(rng, 3, 3);
        let alpha = rng.gen_range(0.5..2.0);
        let mk3 = |rng: &mut ChaCha8Rng| ParamPoint::new(&[3, 4], safe_cells(rng, 3, 4, None));
        let mk4 = |rng: &mut ChaCha8Rng| ParamPoint::new(&[4, 3], safe_cells(rng, 4, 3, None));
        let pts = vec![
            mk3(rng), mk3(rng), mk3(rng), mk3(rng), // pixel branch
            mk4(rng), mk4(rng), mk4(rng), mk4(rng), // instance branch
        ];
        let f = move |p: &[Tensor]| {
            let pix = match pixpro_loss(&p[0], &p[1], &p[2], &p[3], &assign) {
                LossOutcome::Value(v) => v,
                LossOutcome::Skipped => unreachable!(),
            };
            let inst = instance_loss(&p[4], &p[5], &p[6], &p[7], 0.3).unwrap();
            combined_loss(&pix, Some(&inst), alpha)
        };
        finite_diff_check(&f, &pts, STEP)
    })
}

/// Run the full finite-difference suite over every differentiable
/// building block, `INSTANCES` random instances each.
pub fn run_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Check = fn(&mut ChaCha8Rng) -> Result<f64, TensorError>;
    let checks: Vec<(&str, Check)> = vec![
        ("conv2d", check_conv2d),
        ("batch_norm", check_batch_norm),
        ("cosine_similarity", check_cosine),
        ("similarity_sharpened", check_similarity),
        ("ppm_forward", check_ppm),
        ("pix_contrast_loss", check_pix_contrast),
        ("pixpro_loss", check_pixpro),
        ("instance_loss", check_instance),
        ("combined_loss", check_combined),
    ];
    SuiteResult {
        checks: checks
            .into_iter()
            .map(|(name, f)| (name.to_string(), f(&mut rng)))
            .collect(),
    }
}
