//! Evaluation probes over trained checkpoints: linear classification on
//! frozen features, pixel-correspondence retrieval, collapse detection,
//! and a resumable ablation-grid runner.

use crate::data::Dataset;
use crate::encoder::{backbone_forward, projection_forward, ForwardCtx, LevelId, Mode};
use crate::error::PixproError;
use crate::tensor::ops::sum_scalars;
use crate::tensor::Tensor;
use crate::trainer::{
    self, checkpoint, cosine_lr, map_cell_vectors, normalized_embedding_std, TrainRunConfig,
    TrainState,
};
use crate::viewgen::{self, overlap_check, sample_rng, sample_view_pair, PhotometricConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const COLLAPSE_STD_THRESHOLD: f64 = 0.01;

/// One reproducible evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub config_digest: String,
    pub checkpoint_digest: String,
    pub seeds: Vec<u64>,
}

/// SHA-256 of the serialized checkpoint, hex-encoded.
pub fn checkpoint_digest(state: &TrainState) -> String {
    let bytes = checkpoint::serialize(state);
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen-backbone features: spatially averaged top-stage activations,
/// one row per image, computed with BN in eval mode.
pub fn pooled_features(state: &TrainState, dataset: &Dataset) -> Result<Vec<Vec<f64>>, PixproError> {
    let enc = state.config.to_encoder_config();
    let leaves = state.online.bind(false);
    let mut buffers = state.buffers.clone();
    let mut out = Vec::with_capacity(dataset.len());
    for idx in 0..dataset.len() {
        let img = dataset.load_image(idx)?;
        let batch = trainer::images_to_tensor(std::slice::from_ref(&img));
        let mut ctx = ForwardCtx {
            leaves: &leaves,
            buffers: &mut buffers,
            mode: Mode::Eval,
            update_stats: false,
        };
        let maps = backbone_forward(&batch, &enc, &mut ctx)?;
        let c5 = maps
            .iter()
            .find(|(l, _)| *l == LevelId::C5)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| maps[0].1.clone());
        let pooled = c5.global_avg_pool();
        out.push(pooled.data().to_vec());
    }
    Ok(out)
}

fn l2_normalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Deterministic split: every fifth image is held out.
pub fn probe_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..n {
        if i % 5 == 4 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

/// Train a linear classifier on frozen, pooled, L2-normalized features
/// and report held-out top-1 accuracy. Full-batch gradient descent with
/// momentum 0.9 and a cosine learning-rate schedule.
pub fn linear_probe(
    state: &TrainState,
    dataset: &Dataset,
    epochs: usize,
) -> Result<f64, PixproError> {
    let features = l2_normalize(&pooled_features(state, dataset)?);
    let labels: Vec<usize> = dataset.entries.iter().map(|e| e.class).collect();
    let n_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let (train_idx, held_idx) = probe_split(dataset.len());
    if train_idx.is_empty() || held_idx.is_empty() {
        return Err(PixproError::Eval(
            "dataset too small for a train/held-out probe split".into(),
        ));
    }
    for class in 0..n_classes {
        if labels.iter().enumerate().all(|(i, l)| *l != class || !train_idx.contains(&i))
            && labels.contains(&class)
        {
            return Err(PixproError::Eval(format!(
                "class {class} absent from the probe train split"
            )));
        }
    }

    let dim = features[0].len();
    let feat_tensor = |idx: &[usize]| -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for i in idx {
            data.extend_from_slice(&features[*i]);
        }
        Tensor::constant(&[idx.len(), dim], data)
    };
    let x_train = feat_tensor(&train_idx);
    let y_train: Vec<usize> = train_idx.iter().map(|i| labels[*i]).collect();

    let mut w = vec![0.0f64; n_classes * dim];
    let mut b = vec![0.0f64; n_classes];
    let mut vw = vec![0.0f64; w.len()];
    let mut vb = vec![0.0f64; b.len()];
    let base_lr = 1.0;
    let n_train = train_idx.len();
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, base_lr, 0);
        let wt = Tensor::leaf(&[n_classes, dim], w.clone(), true);
        let bt = Tensor::leaf(&[n_classes], b.clone(), true);
        let logits = x_train
            .matmul_nt(&wt)
            .reshape(&[n_train, n_classes, 1, 1])
            .add_channel_bias(&bt)
            .reshape(&[n_train, n_classes]);
        let all = vec![true; n_classes];
        let mut terms = Vec::with_capacity(n_train);
        for (row, label) in y_train.iter().enumerate() {
            let mut one_hot = vec![false; n_classes];
            one_hot[*label] = true;
            let r = logits.select_row(row);
            terms.push(r.masked_lse(&all).sub(&r.masked_lse(&one_hot)));
        }
        let loss = sum_scalars(&terms).scale(1.0 / n_train as f64);
        loss.backward()?;
        let gw = wt.grad().unwrap();
        let gb = bt.grad().unwrap();
        for k in 0..w.len() {
            vw[k] = 0.9 * vw[k] + gw[k];
            w[k] -= lr * vw[k];
        }
        for k in 0..b.len() {
            vb[k] = 0.9 * vb[k] + gb[k];
            b[k] -= lr * vb[k];
        }
    }

    let mut correct = 0usize;
    for i in &held_idx {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for class in 0..n_classes {
            let score: f64 = (0..dim).map(|k| w[class * dim + k] * features[*i][k]).sum::<f64>()
                + b[class];
            if score > best_v {
                best_v = score;
                best = class;
            }
        }
        if best == labels[*i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / held_idx.len() as f64)
}

/// Correspondence retrieval result: the hit rate and the empirical chance
/// baseline measured from the same sampled geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceResult {
    pub accuracy: f64,
    pub chance: f64,
    pub cells_evaluated: usize,
    pub pairs_used: usize,
}

/// For `n_pairs` sampled view pairs, retrieve each overlap cell's
/// nearest-cosine cell in the other view and score it against the
/// geometric assignment.
pub fn correspondence_eval(
    state: &TrainState,
    dataset: &Dataset,
    n_pairs: usize,
    seed: u64,
) -> Result<CorrespondenceResult, PixproError> {
    let config = &state.config;
    let enc = config.to_encoder_config();
    let level = config.feat_levels[0];
    let feat_res = enc.level_res(level, config.out_res);
    let mut aug = config.to_aug_config();
    aug.photometric_a = PhotometricConfig::disabled();
    aug.photometric_b = PhotometricConfig::disabled();
    let leaves = state.online.bind(false);

    let mut correct = 0usize;
    let mut cells = 0usize;
    let mut expected_hits = 0.0f64;
    let mut pairs_used = 0usize;
    for pair_idx in 0..n_pairs {
        let img = dataset.load_image(pair_idx % dataset.len())?;
        let mut rng = sample_rng(seed, 0, pair_idx as u64);
        let ((view_a, rec_a), (view_b, rec_b)) = sample_view_pair(&img, &aug, &mut rng)?;
        if !overlap_check(&rec_a, &rec_b) {
            continue;
        }
        let assign = viewgen::assignment_for(&rec_a, &rec_b, feat_res, config.threshold, config.diag_norm);
        if assign.count_positive() == 0 {
            continue;
        }
        pairs_used += 1;

        let batch = trainer::images_to_tensor(&[view_a, view_b]);
        let mut buffers = state.buffers.clone();
        let mut ctx = ForwardCtx {
            leaves: &leaves,
            buffers: &mut buffers,
            mode: Mode::Eval,
            update_stats: false,
        };
        let maps = backbone_forward(&batch, &enc, &mut ctx)?;
        let map = maps
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, m)| m.clone())
            .unwrap();
        let embed = projection_forward(&map, &enc, &mut ctx)?;
        let all_cells = map_cell_vectors(&embed);
        let hw = feat_res * feat_res;
        let (cells_a, cells_b) = all_cells.split_at(hw);

        let cos = |x: &[f64], y: &[f64]| -> f64 {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dot / (nx * ny)
        };
        for (i, ca) in cells_a.iter().enumerate() {
            let positives = assign.positives_of(i);
            if positives.is_empty() {
                continue;
            }
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, cb) in cells_b.iter().enumerate() {
                let v = cos(ca, cb);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if assign.is_positive(i, best) {
                correct += 1;
            }
            cells += 1;
            expected_hits += positives.len() as f64 / hw as f64;
        }
    }
    if pairs_used == 0 {
        return Err(PixproError::Eval(
            "no overlapping view pair with positives in the evaluation sample".into(),
        ));
    }
    Ok(CorrespondenceResult {
        accuracy: correct as f64 / cells as f64,
        chance: expected_hits / cells as f64,
        cells_evaluated: cells,
        pairs_used,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseReport {
    pub per_channel_std: Vec<f64>,
    pub mean_std: f64,
    pub collapsed: bool,
    pub threshold: f64,
}

/// Per-channel std of normalized projection embeddings over whole images.
pub fn collapse_diagnostic(
    state: &TrainState,
    dataset: &Dataset,
    threshold: f64,
) -> Result<CollapseReport, PixproError> {
    if dataset.len() < 32 {
        return Err(PixproError::Eval(format!(
            "collapse diagnostic needs at least 32 images, got {}",
            dataset.len()
        )));
    }
    let enc = state.config.to_encoder_config();
    let leaves = state.online.bind(false);
    let mut all_cells: Vec<Vec<f64>> = Vec::new();
    for idx in 0..dataset.len() {
        let img = dataset.load_image(idx)?;
        let batch = trainer::images_to_tensor(std::slice::from_ref(&img));
        let mut buffers = state.buffers.clone();
        let mut ctx = ForwardCtx {
            leaves: &leaves,
            buffers: &mut buffers,
            mode: Mode::Eval,
            update_stats: false,
        };
        let maps = backbone_forward(&batch, &enc, &mut ctx)?;
        let embed = projection_forward(&maps[0].1, &enc, &mut ctx)?;
        all_cells.extend(map_cell_vectors(&embed));
    }
    let normed = l2_normalize(&all_cells);
    let d = normed[0].len();
    let n = normed.len() as f64;
    let mut per_channel = Vec::with_capacity(d);
    for ch in 0..d {
        let mean: f64 = normed.iter().map(|v| v[ch]).sum::<f64>() / n;
        let var: f64 = normed.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / n;
        per_channel.push(var.sqrt());
    }
    let mean_std = per_channel.iter().sum::<f64>() / d as f64;
    debug_assert!((mean_std - normalized_embedding_std(&all_cells)).abs() < 1e-12);
    Ok(CollapseReport {
        per_channel_std: per_channel,
        mean_std,
        collapsed: mean_std < threshold,
        threshold,
    })
}

/// One grid cell's outcome: the reports, or the error that stopped it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub config_digest: String,
    pub label: String,
    pub reports: Vec<EvalReport>,
    pub error: Option<String>,
}

fn run_cell(
    config: &TrainRunConfig,
    cell_dir: &Path,
    probe_epochs: usize,
    eval_pairs: usize,
) -> Result<Vec<EvalReport>, PixproError> {
    let ckpt = trainer::run_pretrain(config, cell_dir, true, None)?;
    let state = checkpoint::load(&ckpt)?;
    let dataset = Dataset::open(Path::new(&config.dataset))?;
    let ckpt_digest = checkpoint_digest(&state);
    let probe = linear_probe(&state, &dataset, probe_epochs)?;
    let corr = correspondence_eval(&state, &dataset, eval_pairs, config.seed ^ 0x5eed)?;
    let mk = |metric: &str, value: f64| EvalReport {
        metric: metric.to_string(),
        value,
        config_digest: config.digest(),
        checkpoint_digest: ckpt_digest.clone(),
        seeds: vec![config.seed],
    };
    Ok(vec![
        mk("linear_probe_top1", probe),
        mk("correspondence_accuracy", corr.accuracy),
        mk("correspondence_chance", corr.chance),
    ])
}

/// Run pretraining plus both probes for every config in the grid.
/// Each cell works in its own directory keyed by config digest; finished
/// cells are cached on disk, so re-running a completed grid is a no-op
/// and individual failures don't stop the others.
pub fn run_ablation(
    grid: &[(String, TrainRunConfig)],
    out_dir: &Path,
    probe_epochs: usize,
    eval_pairs: usize,
) -> Result<Vec<AblationCell>, PixproError> {
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::io(out_dir, e))?;
    let mut cells = Vec::with_capacity(grid.len());
    for (label, config) in grid {
        let digest = config.digest();
        let cell_dir = out_dir.join(&digest[..16]);
        let report_path = cell_dir.join("report.json");
        if report_path.exists() {
            let text = std::fs::read_to_string(&report_path)
                .map_err(|e| crate::error::io(&report_path, e))?;
            let cell: AblationCell = serde_json::from_str(&text)
                .map_err(|e| PixproError::Eval(format!("cached report: {e}")))?;
            cells.push(cell);
            continue;
        }
        std::fs::create_dir_all(&cell_dir).map_err(|e| crate::error::io(&cell_dir, e))?;
        let cell = match run_cell(config, &cell_dir, probe_epochs, eval_pairs) {
            Ok(reports) => AblationCell {
                config_digest: digest,
                label: label.clone(),
                reports,
                error: None,
            },
            Err(e) => AblationCell {
                config_digest: digest,
                label: label.clone(),
                reports: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        // only successful cells are cached; failures rerun next time
        if cell.error.is_none() {
            let text = serde_json::to_string_pretty(&cell).unwrap();
            std::fs::write(&report_path, text).map_err(|e| crate::error::io(&report_path, e))?;
        }
        cells.push(cell);
    }
    cells.sort_by(|a, b| a.config_digest.cmp(&b.config_digest));
    Ok(cells)
}
