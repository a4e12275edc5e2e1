//! The two-branch encoder pair: a small staged convolutional backbone
//! with an optional top-down feature pyramid, a 1x1-conv projection head,
//! the pixel propagation module, an instance-level projection head, and
//! the momentum-target machinery.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PixproError, TensorError};
use crate::params::{he_init, identity_plus_noise, BufferSet, LeafSet, ParamSet};
use crate::tensor::ops::{cells_to_map, cosine_matrix};
use crate::tensor::{batch_norm_eval, batch_norm_train, conv2d, Tensor};

pub const COSINE_EPS: f64 = 1e-12;

/// Feature pyramid level identifiers. `C5` is the final backbone stage;
/// `P3`..`P6` are the top-down pyramid analogs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LevelId {
    C5,
    P3,
    P4,
    P5,
    P6,
}

impl LevelId {
    pub fn parse(s: &str) -> Option<LevelId> {
        match s.to_ascii_lowercase().as_str() {
            "c5" => Some(LevelId::C5),
            "p3" => Some(LevelId::P3),
            "p4" => Some(LevelId::P4),
            "p5" => Some(LevelId::P5),
            "p6" => Some(LevelId::P6),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LevelId::C5 => "c5",
            LevelId::P3 => "p3",
            LevelId::P4 => "p4",
            LevelId::P5 => "p5",
            LevelId::P6 => "p6",
        }
    }
}

/// How the propagation branch transforms the embedding map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PpmMode {
    /// Similarity-weighted propagation with `l` transform layers.
    Propagation { layers: usize },
    /// No propagation; a single linear layer stands in (the
    /// collapse-avoiding ablation).
    LinearOnly,
    /// No propagation and no transform: the online embedding is used
    /// directly (collapses in training).
    Bare,
}

impl PpmMode {
    /// Number of 1x1 transform layers that carry parameters.
    pub fn transform_layers(&self) -> usize {
        match self {
            PpmMode::Propagation { layers } => *layers,
            PpmMode::LinearOnly => 1,
            PpmMode::Bare => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder architecture knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Per-stage output channels; each stage is a stride-2 3x3 conv + BN + ReLU.
    pub stage_channels: Vec<usize>,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub ppm_mode: PpmMode,
    /// Sharpness exponent of the propagation similarity.
    pub gamma: f64,
    pub levels: Vec<LevelId>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            proj_hidden: 64,
            embed_dim: 32,
            ppm_mode: PpmMode::Propagation { layers: 1 },
            gamma: 2.0,
            levels: vec![LevelId::C5],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn needs_pyramid(&self) -> bool {
        self.levels.iter().any(|l| *l != LevelId::C5)
    }

    /// Spatial side of a level's map for a square input of side `in_res`.
    pub fn level_res(&self, level: LevelId, in_res: usize) -> usize {
        let c5 = in_res / self.total_stride();
        match level {
            LevelId::C5 | LevelId::P5 => c5,
            LevelId::P4 => c5 * 2,
            LevelId::P3 => c5 * 4,
            LevelId::P6 => c5 / 2,
        }
    }
}

/// Build the online parameter set and its BN buffers.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> (ParamSet, BufferSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut b = BufferSet::new();

    let mut c_in = cfg.in_channels;
    for (i, c_out) in cfg.stage_channels.iter().enumerate() {
        let shape = [*c_out, c_in, 3, 3];
        p.add(&format!("backbone.stage{i}.conv.w"), &shape, he_init(&shape, &mut rng), false);
        p.add(&format!("backbone.stage{i}.bn.gamma"), &[*c_out], vec![1.0; *c_out], true);
        p.add(&format!("backbone.stage{i}.bn.beta"), &[*c_out], vec![0.0; *c_out], true);
        b.add(&format!("backbone.stage{i}.bn.mean"), vec![0.0; *c_out]);
        b.add(&format!("backbone.stage{i}.bn.var"), vec![1.0; *c_out]);
        c_in = *c_out;
    }
    let feat_c = c_in;

    if cfg.needs_pyramid() {
        // lateral 1x1 convs from each stage output onto `feat_c` channels
        for (i, c_stage) in cfg.stage_channels.iter().enumerate() {
            let shape = [feat_c, *c_stage, 1, 1];
            p.add(&format!("pyramid.lateral{i}.w"), &shape, he_init(&shape, &mut rng), false);
            p.add(&format!("pyramid.lateral{i}.b"), &[feat_c], vec![0.0; feat_c], true);
        }
    }

    // pixel projection head: 1x1 conv -> BN -> ReLU -> 1x1 conv
    let s1 = [cfg.proj_hidden, feat_c, 1, 1];
    p.add("proj.conv1.w", &s1, he_init(&s1, &mut rng), false);
    p.add("proj.bn.gamma", &[cfg.proj_hidden], vec![1.0; cfg.proj_hidden], true);
    p.add("proj.bn.beta", &[cfg.proj_hidden], vec![0.0; cfg.proj_hidden], true);
    b.add("proj.bn.mean", vec![0.0; cfg.proj_hidden]);
    b.add("proj.bn.var", vec![1.0; cfg.proj_hidden]);
    let s2 = [cfg.embed_dim, cfg.proj_hidden, 1, 1];
    p.add("proj.conv2.w", &s2, he_init(&s2, &mut rng), false);
    p.add("proj.conv2.b", &[cfg.embed_dim], vec![0.0; cfg.embed_dim], true);

    // instance projection head (independent of the pixel head)
    let i1 = [cfg.proj_hidden, feat_c, 1, 1];
    p.add("inst.fc1.w", &i1, he_init(&i1, &mut rng), false);
    p.add("inst.bn.gamma", &[cfg.proj_hidden], vec![1.0; cfg.proj_hidden], true);
    p.add("inst.bn.beta", &[cfg.proj_hidden], vec![0.0; cfg.proj_hidden], true);
    b.add("inst.bn.mean", vec![0.0; cfg.proj_hidden]);
    b.add("inst.bn.var", vec![1.0; cfg.proj_hidden]);
    let i2 = [cfg.embed_dim, cfg.proj_hidden, 1, 1];
    p.add("inst.fc2.w", &i2, he_init(&i2, &mut rng), false);
    p.add("inst.fc2.b", &[cfg.embed_dim], vec![0.0; cfg.embed_dim], true);

    // propagation transform g: identity-plus-noise 1x1 convs, BN between
    // successive layers only
    let d = cfg.embed_dim;
    let n_layers = cfg.ppm_mode.transform_layers();
    for i in 0..n_layers {
        p.add(
            &format!("ppm.g{i}.w"),
            &[d, d, 1, 1],
            identity_plus_noise(d, 0.01, &mut rng),
            false,
        );
        p.add(&format!("ppm.g{i}.b"), &[d], vec![0.0; d], true);
        if i + 1 < n_layers {
            p.add(&format!("ppm.bn{i}.gamma"), &[d], vec![1.0; d], true);
            p.add(&format!("ppm.bn{i}.beta"), &[d], vec![0.0; d], true);
            b.add(&format!("ppm.bn{i}.mean"), vec![0.0; d]);
            b.add(&format!("ppm.bn{i}.var"), vec![1.0; d]);
        }
    }

    (p, b)
}

/// The momentum target owns copies of everything except the propagation
/// transform, which exists only on the regular branch.
pub fn init_momentum(online: &ParamSet) -> ParamSet {
    let mut m = ParamSet::new();
    for p in online.iter() {
        if !p.name.starts_with("ppm.") {
            m.add(&p.name, &p.shape, p.values.clone(), p.decay_exempt);
        }
    }
    m
}

/// One branch's forward context: leaves bound from the branch's params,
/// plus (in train mode, online branch only) mutable BN buffers.
pub struct ForwardCtx<'a> {
    pub leaves: &'a LeafSet,
    pub buffers: &'a mut BufferSet,
    pub mode: Mode,
    /// Whether this pass updates BN running statistics.
    pub update_stats: bool,
}

fn bn_forward(
    x: &Tensor,
    prefix: &str,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx,
) -> Result<Tensor, PixproError> {
    let gamma = ctx.leaves.get(&format!("{prefix}.gamma"));
    let beta = ctx.leaves.get(&format!("{prefix}.beta"));
    match ctx.mode {
        Mode::Train => {
            let (y, mean, var) = batch_norm_train(x, gamma, beta, cfg.bn_eps)?;
            if ctx.update_stats {
                let m = cfg.bn_momentum;
                let rm = ctx.buffers.get_mut(&format!("{prefix}.mean"));
                for (r, v) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                let rv = ctx.buffers.get_mut(&format!("{prefix}.var"));
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
            Ok(y)
        }
        Mode::Eval => {
            let rm = ctx.buffers.get(&format!("{prefix}.mean")).to_vec();
            let rv = ctx.buffers.get(&format!("{prefix}.var")).to_vec();
            Ok(batch_norm_eval(x, gamma, beta, &rm, &rv, cfg.bn_eps)?)
        }
    }
}

/// Run the backbone (and pyramid if configured), returning one embedding
/// source map per configured level.
pub fn backbone_forward(
    images: &Tensor,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx,
) -> Result<Vec<(LevelId, Tensor)>, PixproError> {
    let shape = images.shape().to_vec();
    assert_eq!(shape.len(), 4, "backbone input must be [N,C,H,W]");
    let stride = cfg.total_stride();
    if !shape[2].is_multiple_of(stride) || !shape[3].is_multiple_of(stride) {
        return Err(PixproError::Tensor(TensorError::ShapeMismatch {
            op: "backbone_forward",
            lhs: shape,
            rhs: vec![stride],
        }));
    }

    let mut stage_outputs = Vec::with_capacity(cfg.stage_channels.len());
    let mut x = images.clone();
    for i in 0..cfg.stage_channels.len() {
        let w = ctx.leaves.get(&format!("backbone.stage{i}.conv.w"));
        let y = conv2d(&x, w, 2, 1)?;
        let y = bn_forward(&y, &format!("backbone.stage{i}.bn"), cfg, ctx)?;
        x = y.relu();
        stage_outputs.push(x.clone());
    }
    let c5 = stage_outputs.last().unwrap().clone();

    let mut outputs = Vec::new();
    if cfg.needs_pyramid() {
        // top-down pathway: lateral 1x1 conv + nearest 2x upsample add
        let n_stages = stage_outputs.len();
        let lateral = |i: usize, ctx: &ForwardCtx| -> Result<Tensor, PixproError> {
            let w = ctx.leaves.get(&format!("pyramid.lateral{i}.w"));
            let b = ctx.leaves.get(&format!("pyramid.lateral{i}.b"));
            Ok(conv2d(&stage_outputs[i], w, 1, 0)?.add_channel_bias(b))
        };
        let p5 = lateral(n_stages - 1, ctx)?;
        let p4 = lateral(n_stages - 2, ctx)?.add(&p5.upsample_nearest2());
        let p3 = lateral(n_stages - 3, ctx)?.add(&p4.upsample_nearest2());
        for level in &cfg.levels {
            let map = match level {
                LevelId::C5 => c5.clone(),
                LevelId::P5 => p5.clone(),
                LevelId::P4 => p4.clone(),
                LevelId::P3 => p3.clone(),
                LevelId::P6 => p5.avg_pool2(),
            };
            outputs.push((*level, map));
        }
    } else {
        for level in &cfg.levels {
            assert_eq!(*level, LevelId::C5, "pyramid disabled but level {level:?} requested");
            outputs.push((LevelId::C5, c5.clone()));
        }
    }
    Ok(outputs)
}

/// Pixel projection head: per-cell 1x1 transforms, so spatial cells never
/// mix.
pub fn projection_forward(
    feat: &Tensor,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx,
) -> Result<Tensor, PixproError> {
    let h = conv2d(feat, ctx.leaves.get("proj.conv1.w"), 1, 0)?;
    let h = bn_forward(&h, "proj.bn", cfg, ctx)?.relu();
    let out = conv2d(&h, ctx.leaves.get("proj.conv2.w"), 1, 0)?
        .add_channel_bias(ctx.leaves.get("proj.conv2.b"));
    Ok(out)
}

/// Instance projection head on spatially averaged features: `[N,C] -> [N,d]`.
pub fn instance_forward(
    c5: &Tensor,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx,
) -> Result<Tensor, PixproError> {
    let pooled = c5.global_avg_pool(); // [N,C]
    let n = pooled.shape()[0];
    let c = pooled.shape()[1];
    let x = pooled.reshape(&[n, c, 1, 1]);
    let h = conv2d(&x, ctx.leaves.get("inst.fc1.w"), 1, 0)?;
    let h = bn_forward(&h, "inst.bn", cfg, ctx)?.relu();
    let out = conv2d(&h, ctx.leaves.get("inst.fc2.w"), 1, 0)?
        .add_channel_bias(ctx.leaves.get("inst.fc2.b"));
    Ok(out.reshape(&[n, cfg.embed_dim]))
}

/// Clamped-cosine similarity raised to the sharpness exponent:
/// `(max(cos, 0))^gamma`. Gradient is zero through the clamp.
pub fn similarity_matrix(cells_a: &Tensor, cells_b: &Tensor, gamma: f64) -> Tensor {
    assert!(gamma > 0.0, "similarity sharpness must be positive");
    cosine_matrix(cells_a, cells_b, COSINE_EPS)
        .relu()
        .pow_nonneg(gamma)
}

/// Apply the transform `g`: `l` 1x1 conv layers with BN + ReLU strictly
/// between successive layers.
fn transform_g(map: &Tensor, cfg: &EncoderConfig, ctx: &mut ForwardCtx) -> Result<Tensor, PixproError> {
    let n_layers = cfg.ppm_mode.transform_layers();
    let mut x = map.clone();
    for i in 0..n_layers {
        x = conv2d(&x, ctx.leaves.get(&format!("ppm.g{i}.w")), 1, 0)?
            .add_channel_bias(ctx.leaves.get(&format!("ppm.g{i}.b")));
        if i + 1 < n_layers {
            x = bn_forward(&x, &format!("ppm.bn{i}"), cfg, ctx)?.relu();
        }
    }
    Ok(x)
}

/// Pixel propagation: every output cell is the similarity-weighted sum of
/// transformed features over all cells of the same image's map. The
/// weight sum is intentionally not normalized.
pub fn ppm_forward(
    embed: &Tensor,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx,
) -> Result<Tensor, PixproError> {
    let (n, _d, h, w) = (
        embed.shape()[0],
        embed.shape()[1],
        embed.shape()[2],
        embed.shape()[3],
    );
    match cfg.ppm_mode {
        PpmMode::Bare => Ok(embed.clone()),
        PpmMode::LinearOnly => transform_g(embed, cfg, ctx),
        PpmMode::Propagation { .. } => {
            let g_map = transform_g(embed, cfg, ctx)?;
            let mut per_image = Vec::with_capacity(n);
            for ni in 0..n {
                let x_cells = embed.image_cells(ni);
                let g_cells = g_map.image_cells(ni);
                let s = similarity_matrix(&x_cells, &x_cells, cfg.gamma);
                per_image.push(s.matmul(&g_cells));
            }
            Ok(cells_to_map(&per_image, h, w))
        }
    }
}

/// Cosine-ramp momentum schedule from `m_base` at step 0 to 1 at the end.
pub fn momentum_schedule(step: u64, total_steps: u64, m_base: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    let x = step as f64 / total_steps as f64;
    1.0 - (1.0 - m_base) * ((std::f64::consts::PI * x).cos() + 1.0) / 2.0
}
