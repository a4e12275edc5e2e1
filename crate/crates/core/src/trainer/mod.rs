//! The optimization loop: deterministic batch orchestration, two-branch
//! forward passes, loss assembly, LARS updates, momentum-encoder EMA,
//! checkpointing, and per-step metrics.

pub mod checkpoint;
pub mod config;
pub mod lars;
pub mod metrics;

pub use config::{TrainRunConfig, Variant};
pub use lars::{cosine_lr, effective_base_lr, lars_step, OptimizerState};
pub use metrics::StepMetrics;

use crate::data::{Dataset, Image};
use crate::encoder::{
    self, backbone_forward, instance_forward, momentum_schedule, ppm_forward, projection_forward,
    EncoderConfig, ForwardCtx, LevelId, Mode,
};
use crate::error::PixproError;
use crate::objectives::{
    combined_loss, instance_loss, multiscale_loss, pix_contrast_loss, pixpro_loss, LossOutcome,
};
use crate::params::{BufferSet, LeafSet, ParamSet};
use crate::tensor::ops::sum_scalars;
use crate::tensor::Tensor;
use crate::viewgen::{self, overlap_check, sample_rng, sample_view_pair, CropRecord};
use rand::seq::SliceRandom;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// RNG stream index reserved for the per-epoch batch-order shuffle, far
/// outside any realistic dataset index.
const SHUFFLE_STREAM: u64 = u64::MAX;

/// Everything one training run mutates, and exactly what a checkpoint
/// persists.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainRunConfig,
    pub step: u64,
    pub online: ParamSet,
    pub momentum: ParamSet,
    pub buffers: BufferSet,
    pub opt: OptimizerState,
}

pub fn init_state(config: &TrainRunConfig) -> TrainState {
    let enc = config.to_encoder_config();
    let (online, buffers) = encoder::init_params(&enc, config.seed);
    let momentum = encoder::init_momentum(&online);
    TrainState {
        config: config.clone(),
        step: 0,
        online,
        momentum,
        buffers,
        opt: OptimizerState::new(),
    }
}

/// Stack images into one `[N, C, H, W]` constant tensor.
pub fn images_to_tensor(images: &[Image]) -> Tensor {
    assert!(!images.is_empty());
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!((img.channels, img.height, img.width), (c, h, w));
        data.extend_from_slice(&img.data);
    }
    Tensor::constant(&[images.len(), c, h, w], data)
}

/// One branch's outputs for one batch of views.
pub struct BranchOut {
    /// Projection embedding map per configured level, `[N, d, h, w]`.
    pub proj: Vec<(LevelId, Tensor)>,
    /// Propagated map per level (online branch only), `[N, d, h, w]`.
    pub prop: Vec<(LevelId, Tensor)>,
    /// Global instance embeddings `[N, d]` when the head is requested.
    pub instance: Option<Tensor>,
}

/// Full forward pass of one branch over a batch of rendered views.
#[allow(clippy::too_many_arguments)]
pub fn encode_batch(
    images: &Tensor,
    cfg: &EncoderConfig,
    leaves: &LeafSet,
    buffers: &mut BufferSet,
    mode: Mode,
    update_stats: bool,
    with_ppm: bool,
    with_instance: bool,
) -> Result<BranchOut, PixproError> {
    let mut ctx = ForwardCtx {
        leaves,
        buffers,
        mode,
        update_stats,
    };
    let maps = backbone_forward(images, cfg, &mut ctx)?;
    let mut proj = Vec::with_capacity(maps.len());
    let mut prop = Vec::with_capacity(maps.len());
    for (level, map) in &maps {
        let embed = projection_forward(map, cfg, &mut ctx)?;
        if with_ppm {
            prop.push((*level, ppm_forward(&embed, cfg, &mut ctx)?));
        }
        proj.push((*level, embed));
    }
    let instance = if with_instance {
        let c5 = maps
            .iter()
            .find(|(l, _)| *l == LevelId::C5)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| {
                PixproError::Config("the instance branch requires the c5 level".into())
            })?;
        Some(instance_forward(&c5, cfg, &mut ctx)?)
    } else {
        None
    };
    Ok(BranchOut {
        proj,
        prop,
        instance,
    })
}

/// Mean per-channel standard deviation of L2-normalized embedding
/// vectors; the scalar the collapse detector thresholds.
pub fn normalized_embedding_std(cells: &[Vec<f64>]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let d = cells[0].len();
    let n = cells.len() as f64;
    let normed: Vec<Vec<f64>> = cells
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for ch in 0..d {
        let mean: f64 = normed.iter().map(|v| v[ch]).sum::<f64>() / n;
        let var: f64 = normed.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / d as f64
}

/// Rows of an `[N, d, h, w]` map as plain per-cell vectors.
pub fn map_cell_vectors(map: &Tensor) -> Vec<Vec<f64>> {
    let (n, d, h, w) = (
        map.shape()[0],
        map.shape()[1],
        map.shape()[2],
        map.shape()[3],
    );
    let data = map.data();
    let mut out = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut v = Vec::with_capacity(d);
                for ch in 0..d {
                    v.push(data[((ni * d + ch) * h + y) * w + x]);
                }
                out.push(v);
            }
        }
    }
    out
}

struct SampledPair {
    view_a: Image,
    rec_a: CropRecord,
    view_b: Image,
    rec_b: CropRecord,
    overlapping: bool,
}

fn sample_batch_views(
    config: &TrainRunConfig,
    images: &[Image],
    epoch: u64,
    rng_indices: &[u64],
) -> Result<Vec<SampledPair>, PixproError> {
    let mut aug = config.to_aug_config();
    let (pa, pb) = config.photometric_pair();
    aug.photometric_a = pa;
    aug.photometric_b = pb;
    let mut out = Vec::with_capacity(images.len());
    for (img, idx) in images.iter().zip(rng_indices) {
        let mut rng = sample_rng(config.seed, epoch, *idx);
        let ((view_a, rec_a), (view_b, rec_b)) = sample_view_pair(img, &aug, &mut rng)?;
        let overlapping = overlap_check(&rec_a, &rec_b);
        out.push(SampledPair {
            view_a,
            rec_a,
            view_b,
            rec_b,
            overlapping,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn pixel_loss_for_image(
    config: &TrainRunConfig,
    enc: &EncoderConfig,
    pair: &SampledPair,
    image_index: usize,
    online_a: &BranchOut,
    online_b: &BranchOut,
    momentum_a: &BranchOut,
    momentum_b: &BranchOut,
) -> LossOutcome {
    let mut per_level = Vec::with_capacity(config.feat_levels.len());
    for (li, level) in config.feat_levels.iter().enumerate() {
        let feat_res = enc.level_res(*level, config.out_res);
        let assign = viewgen::assignment_for(
            &pair.rec_a,
            &pair.rec_b,
            feat_res,
            config.threshold,
            config.diag_norm,
        );
        let x_am = momentum_a.proj[li].1.image_cells(image_index);
        let x_bm = momentum_b.proj[li].1.image_cells(image_index);
        let outcome = match config.variant {
            Variant::PixContrast => {
                let x_a = online_a.proj[li].1.image_cells(image_index);
                let x_b = online_b.proj[li].1.image_cells(image_index);
                pix_contrast_loss(&x_a, &x_b, &x_am, &x_bm, &assign, config.tau)
            }
            Variant::PixPro | Variant::PixProInstance => {
                let y_a = online_a.prop[li].1.image_cells(image_index);
                let y_b = online_b.prop[li].1.image_cells(image_index);
                pixpro_loss(&y_a, &y_b, &x_am, &x_bm, &assign)
            }
        };
        per_level.push(outcome);
    }
    multiscale_loss(&per_level)
}

/// One optimization step over a batch. Returns the metrics record; the
/// parameter update is skipped (but still logged) when no view pair in
/// the batch has any positive cell pair.
pub fn train_step(
    state: &mut TrainState,
    images: &[Image],
    batch_indices: &[usize],
    epoch: u64,
    total_steps: u64,
) -> Result<StepMetrics, PixproError> {
    let config = state.config.clone();
    let enc = config.to_encoder_config();
    let step = state.step;
    let lr = cosine_lr(
        step as usize,
        total_steps as usize,
        config.effective_lr(),
        config.warmup_steps(total_steps as usize),
    );
    let m = momentum_schedule((step + 1).min(total_steps), total_steps.max(1), config.m_base);

    let rng_indices: Vec<u64> = batch_indices.iter().map(|i| *i as u64).collect();
    let pairs = sample_batch_views(&config, images, epoch, &rng_indices)?;
    let batch_a = images_to_tensor(&pairs.iter().map(|p| p.view_a.clone()).collect::<Vec<_>>());
    let batch_b = images_to_tensor(&pairs.iter().map(|p| p.view_b.clone()).collect::<Vec<_>>());

    let with_ppm = config.variant != Variant::PixContrast;
    let with_inst = config.variant.uses_instance();
    let online_leaves = state.online.bind(true);
    let momentum_leaves = state.momentum.bind(false);

    let online_a = encode_batch(
        &batch_a,
        &enc,
        &online_leaves,
        &mut state.buffers,
        Mode::Train,
        true,
        with_ppm,
        with_inst,
    )?;
    let online_b = encode_batch(
        &batch_b,
        &enc,
        &online_leaves,
        &mut state.buffers,
        Mode::Train,
        true,
        with_ppm,
        with_inst,
    )?;
    // The momentum branch runs on batch statistics but never touches the
    // running buffers; hand it a scratch copy.
    let mut scratch = state.buffers.clone();
    let momentum_a = encode_batch(
        &batch_a,
        &enc,
        &momentum_leaves,
        &mut scratch,
        Mode::Train,
        false,
        false,
        with_inst,
    )?;
    let momentum_b = encode_batch(
        &batch_b,
        &enc,
        &momentum_leaves,
        &mut scratch,
        Mode::Train,
        false,
        false,
        with_inst,
    )?;

    let mut per_image = Vec::new();
    let mut pairs_used = 0usize;
    let mut pairs_skipped = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        if !pair.overlapping {
            pairs_skipped += 1;
            continue;
        }
        match pixel_loss_for_image(
            &config, &enc, pair, i, &online_a, &online_b, &momentum_a, &momentum_b,
        ) {
            LossOutcome::Value(v) => {
                per_image.push(v);
                pairs_used += 1;
            }
            LossOutcome::Skipped => pairs_skipped += 1,
        }
    }

    let pix = if per_image.is_empty() {
        None
    } else {
        Some(sum_scalars(&per_image).scale(1.0 / per_image.len() as f64))
    };
    let inst = if with_inst {
        Some(instance_loss(
            online_a.instance.as_ref().unwrap(),
            online_b.instance.as_ref().unwrap(),
            momentum_a.instance.as_ref().unwrap(),
            momentum_b.instance.as_ref().unwrap(),
            config.tau_instance,
        )?)
    } else {
        None
    };

    let embed_std_mean = normalized_embedding_std(&map_cell_vectors(&online_a.proj[0].1));

    let total = match (&pix, &inst) {
        (Some(p), i) => Some(combined_loss(p, i.as_ref(), config.alpha)),
        (None, Some(i)) if config.alpha > 0.0 => Some(i.scale(config.alpha)),
        _ => None,
    };

    let (loss_total, loss_pix, loss_inst) = match &total {
        Some(t) => {
            let lt = t.item();
            if !lt.is_finite() {
                return Err(PixproError::NonFiniteLoss {
                    step,
                    indices: batch_indices.to_vec(),
                });
            }
            t.backward()?;
            let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
            for (name, grad) in online_leaves.grads() {
                if let Some(g) = grad {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(PixproError::NonFiniteGradient { name });
                    }
                    grads.insert(name, g);
                }
            }
            lars_step(&mut state.online, &grads, &mut state.opt, lr, config.weight_decay);
            (
                lt,
                pix.as_ref().map(|p| p.item()).unwrap_or(0.0),
                inst.as_ref().map(|i| i.item()).unwrap_or(0.0),
            )
        }
        None => (0.0, 0.0, 0.0),
    };
    state.momentum.momentum_update(&state.online, m)?;
    state.step += 1;

    Ok(StepMetrics {
        step,
        variant: config.variant.name().to_string(),
        lr,
        m,
        loss_total,
        loss_pix,
        loss_inst,
        pairs_used,
        pairs_skipped,
        embed_std_mean,
    })
}

/// Deterministic image order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, dataset_len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset_len).collect();
    let mut rng = sample_rng(seed, epoch, SHUFFLE_STREAM);
    order.shuffle(&mut rng);
    order
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.ckpt")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.jsonl")
}

/// Run (or resume) pretraining to completion. Returns the final
/// checkpoint path. With `resume` set and a checkpoint present in
/// `out_dir`, training continues from it; the configs must match.
/// `stop_after` interrupts the run once that many total steps have been
/// taken (it simulates a crash; the run stays resumable).
pub fn run_pretrain(
    config: &TrainRunConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<PathBuf, PixproError> {
    config.validate()?;
    let dataset = Dataset::open(Path::new(&config.dataset))?;
    let total_steps = config.total_steps(dataset.len()) as u64;
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size) as u64;

    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::io(out_dir, e))?;
    let ckpt_path = checkpoint_path(out_dir);
    let metrics_file = metrics_path(out_dir);

    let mut state = if resume && ckpt_path.exists() {
        let loaded = checkpoint::load(&ckpt_path)?;
        if loaded.config.digest() != config.digest() {
            return Err(PixproError::Checkpoint(
                "checkpoint config does not match the requested config".into(),
            ));
        }
        loaded
    } else {
        init_state(config)
    };
    if state.step == 0 && metrics_file.exists() {
        std::fs::remove_file(&metrics_file).map_err(|e| crate::error::io(&metrics_file, e))?;
    } else {
        metrics::truncate_from(&metrics_file, state.step)?;
    }

    while state.step < total_steps {
        if let Some(limit) = stop_after {
            if state.step >= limit {
                checkpoint::save(&state, &ckpt_path)?;
                return Ok(ckpt_path);
            }
        }
        let step = state.step;
        let epoch = step / batches_per_epoch;
        let batch_in_epoch = (step % batches_per_epoch) as usize;
        let order = epoch_order(config.seed, epoch, dataset.len());
        let start = batch_in_epoch * config.batch_size;
        let end = (start + config.batch_size).min(dataset.len());
        let indices = &order[start..end];
        let mut images = Vec::with_capacity(indices.len());
        for idx in indices {
            images.push(dataset.load_image(*idx)?);
        }
        let record = train_step(&mut state, &images, indices, epoch, total_steps)?;
        metrics::append_line(&metrics_file, &record)?;
        if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval as u64 == 0 {
            checkpoint::save(&state, &ckpt_path)?;
        }
    }
    checkpoint::save(&state, &ckpt_path)?;
    Ok(ckpt_path)
}
