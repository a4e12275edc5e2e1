//! Run configuration: a plain-text key-value file with full-schema
//! validation, a canonical serialization, and a digest that ties
//! checkpoints and metrics back to the exact settings that produced them.

use crate::encoder::{EncoderConfig, LevelId, PpmMode};
use crate::error::PixproError;
use crate::viewgen::{AugConfig, DiagNorm, PhotometricConfig};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    PixPro,
    PixContrast,
    PixProInstance,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant, PixproError> {
        match s {
            "pixpro" => Ok(Variant::PixPro),
            "pixcontrast" => Ok(Variant::PixContrast),
            "pixpro+instance" => Ok(Variant::PixProInstance),
            other => Err(PixproError::Config(format!(
                "unknown variant '{other}' (expected pixpro, pixcontrast, or pixpro+instance)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::PixPro => "pixpro",
            Variant::PixContrast => "pixcontrast",
            Variant::PixProInstance => "pixpro+instance",
        }
    }

    pub fn uses_instance(&self) -> bool {
        matches!(self, Variant::PixProInstance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub dataset: String,
    pub variant: Variant,
    pub threshold: f64,
    pub tau: f64,
    pub tau_instance: f64,
    pub gamma: f64,
    pub ppm_mode: String,
    pub ppm_layers: usize,
    pub alpha: f64,
    pub feat_levels: Vec<LevelId>,
    pub out_res: usize,
    pub epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub m_base: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub warmup_frac: f64,
    pub diag_norm: DiagNorm,
    pub photometric: bool,
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub stage_channels: Vec<usize>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            dataset: String::new(),
            variant: Variant::PixPro,
            threshold: 0.7,
            tau: 0.3,
            tau_instance: 0.3,
            gamma: 2.0,
            ppm_mode: "propagation".to_string(),
            ppm_layers: 1,
            alpha: 1.0,
            feat_levels: vec![LevelId::C5],
            out_res: 32,
            epochs: 10,
            steps: 0,
            batch_size: 32,
            lr_base: 1.0,
            weight_decay: 1e-5,
            m_base: 0.99,
            seed: 0,
            checkpoint_interval: 100,
            warmup_frac: 0.05,
            diag_norm: DiagNorm::Max,
            photometric: true,
            embed_dim: 32,
            proj_hidden: 64,
            stage_channels: vec![16, 32, 64],
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "variant",
    "threshold",
    "tau",
    "tau_instance",
    "gamma",
    "ppm_mode",
    "ppm_layers",
    "alpha",
    "feat_levels",
    "out_res",
    "epochs",
    "steps",
    "batch_size",
    "lr_base",
    "weight_decay",
    "m_base",
    "seed",
    "checkpoint_interval",
    "warmup_frac",
    "diag_norm",
    "photometric",
    "embed_dim",
    "proj_hidden",
    "stage_channels",
];

fn bad(key: &str, value: &str, why: &str) -> PixproError {
    PixproError::Config(format!("config key '{key}' = '{value}': {why}"))
}

impl TrainRunConfig {
    /// Parses the key-value text form. Unknown keys, duplicate keys, and
    /// malformed values are all rejected; missing keys take defaults.
    pub fn parse(text: &str) -> Result<TrainRunConfig, PixproError> {
        let mut cfg = TrainRunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PixproError::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(PixproError::Config(format!("unknown config key '{key}'")));
            }
            if !seen.insert(key.to_string()) {
                return Err(PixproError::Config(format!("duplicate config key '{key}'")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainRunConfig, PixproError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` override (shared by the file parser and
    /// CLI `--set` flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PixproError> {
        let f = |v: &str| -> Result<f64, PixproError> {
            v.parse().map_err(|_| bad(key, v, "not a number"))
        };
        let u = |v: &str| -> Result<usize, PixproError> {
            v.parse().map_err(|_| bad(key, v, "not a nonnegative integer"))
        };
        match key {
            "dataset" => self.dataset = value.to_string(),
            "variant" => self.variant = Variant::parse(value)?,
            "threshold" => self.threshold = f(value)?,
            "tau" => self.tau = f(value)?,
            "tau_instance" => self.tau_instance = f(value)?,
            "gamma" => self.gamma = f(value)?,
            "ppm_mode" => match value {
                "propagation" | "linear" | "bare" => self.ppm_mode = value.to_string(),
                _ => return Err(bad(key, value, "expected propagation, linear, or bare")),
            },
            "ppm_layers" => self.ppm_layers = u(value)?,
            "alpha" => self.alpha = f(value)?,
            "feat_levels" => {
                let mut levels = Vec::new();
                for part in value.split(',') {
                    levels.push(
                        LevelId::parse(part.trim())
                            .ok_or_else(|| bad(key, value, "unknown level id"))?,
                    );
                }
                self.feat_levels = levels;
            }
            "out_res" => self.out_res = u(value)?,
            "epochs" => self.epochs = u(value)?,
            "steps" => self.steps = u(value)?,
            "batch_size" => self.batch_size = u(value)?,
            "lr_base" => self.lr_base = f(value)?,
            "weight_decay" => self.weight_decay = f(value)?,
            "m_base" => self.m_base = f(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad(key, value, "not a nonnegative integer"))?
            }
            "checkpoint_interval" => self.checkpoint_interval = u(value)?,
            "warmup_frac" => self.warmup_frac = f(value)?,
            "diag_norm" => match value {
                "max" => self.diag_norm = DiagNorm::Max,
                "mean" => self.diag_norm = DiagNorm::Mean,
                _ => return Err(bad(key, value, "expected max or mean")),
            },
            "photometric" => match value {
                "on" => self.photometric = true,
                "off" => self.photometric = false,
                _ => return Err(bad(key, value, "expected on or off")),
            },
            "embed_dim" => self.embed_dim = u(value)?,
            "proj_hidden" => self.proj_hidden = u(value)?,
            "stage_channels" => {
                let mut chans = Vec::new();
                for part in value.split(',') {
                    chans.push(
                        part.trim()
                            .parse()
                            .map_err(|_| bad(key, value, "not an integer list"))?,
                    );
                }
                self.stage_channels = chans;
            }
            other => return Err(PixproError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PixproError> {
        let err = |msg: String| Err(PixproError::Config(msg));
        if self.threshold <= 0.0 {
            return err(format!("threshold must be positive, got {}", self.threshold));
        }
        if self.tau <= 0.0 || self.tau_instance <= 0.0 {
            return err("temperatures must be positive".into());
        }
        if self.gamma < 0.0 {
            return err(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if self.alpha < 0.0 {
            return err(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.variant.uses_instance() && self.batch_size < 2 {
            return err("the instance branch needs batch_size >= 2".into());
        }
        if self.feat_levels.is_empty() {
            return err("feat_levels must name at least one map".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() > 6 {
            return err("stage_channels must list 1..=6 stages".into());
        }
        let stride = 1usize << self.stage_channels.len();
        if self.out_res == 0 || !self.out_res.is_multiple_of(stride) {
            return err(format!(
                "out_res {} must be a positive multiple of the total stride {}",
                self.out_res, stride
            ));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return err(format!("warmup_frac must be in [0, 0.5], got {}", self.warmup_frac));
        }
        if !(0.0..=1.0).contains(&self.m_base) {
            return err(format!("m_base must be in [0, 1], got {}", self.m_base));
        }
        if self.embed_dim == 0 || self.proj_hidden == 0 {
            return err("embed_dim and proj_hidden must be positive".into());
        }
        if self.stage_channels.contains(&0) {
            return err("stage_channels entries must be positive".into());
        }
        let enc = self.to_encoder_config();
        for level in &self.feat_levels {
            if enc.level_res(*level, self.out_res) == 0 {
                return err(format!(
                    "level {} has no cells at out_res {}",
                    level.name(),
                    self.out_res
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, one per line. Parsing
    /// this text reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let levels: Vec<&str> = self.feat_levels.iter().map(|l| l.name()).collect();
        let chans: Vec<String> = self.stage_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "dataset = {}\n\
             variant = {}\n\
             threshold = {}\n\
             tau = {}\n\
             tau_instance = {}\n\
             gamma = {}\n\
             ppm_mode = {}\n\
             ppm_layers = {}\n\
             alpha = {}\n\
             feat_levels = {}\n\
             out_res = {}\n\
             epochs = {}\n\
             steps = {}\n\
             batch_size = {}\n\
             lr_base = {}\n\
             weight_decay = {}\n\
             m_base = {}\n\
             seed = {}\n\
             checkpoint_interval = {}\n\
             warmup_frac = {}\n\
             diag_norm = {}\n\
             photometric = {}\n\
             embed_dim = {}\n\
             proj_hidden = {}\n\
             stage_channels = {}\n",
            self.dataset,
            self.variant.name(),
            self.threshold,
            self.tau,
            self.tau_instance,
            self.gamma,
            self.ppm_mode,
            self.ppm_layers,
            self.alpha,
            levels.join(","),
            self.out_res,
            self.epochs,
            self.steps,
            self.batch_size,
            self.lr_base,
            self.weight_decay,
            self.m_base,
            self.seed,
            self.checkpoint_interval,
            self.warmup_frac,
            match self.diag_norm {
                DiagNorm::Max => "max",
                DiagNorm::Mean => "mean",
            },
            if self.photometric { "on" } else { "off" },
            self.embed_dim,
            self.proj_hidden,
            chans.join(","),
        )
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_text().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_encoder_config(&self) -> EncoderConfig {
        let ppm = match self.ppm_mode.as_str() {
            "linear" => PpmMode::LinearOnly,
            "bare" => PpmMode::Bare,
            _ => PpmMode::Propagation {
                layers: self.ppm_layers,
            },
        };
        EncoderConfig {
            stage_channels: self.stage_channels.clone(),
            proj_hidden: self.proj_hidden,
            embed_dim: self.embed_dim,
            ppm_mode: ppm,
            gamma: self.gamma,
            levels: self.feat_levels.clone(),
            ..EncoderConfig::default()
        }
    }

    pub fn to_aug_config(&self) -> AugConfig {
        AugConfig {
            out_res: self.out_res,
            ..AugConfig::default()
        }
    }

    pub fn photometric_pair(&self) -> (PhotometricConfig, PhotometricConfig) {
        if self.photometric {
            (
                PhotometricConfig::view_a_default(),
                PhotometricConfig::view_b_default(),
            )
        } else {
            (PhotometricConfig::disabled(), PhotometricConfig::disabled())
        }
    }

    pub fn effective_lr(&self) -> f64 {
        super::lars::effective_base_lr(self.lr_base, self.batch_size)
    }

    /// Total optimization steps: the explicit `steps` key when set,
    /// otherwise epochs times the number of batches per epoch.
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            let batches = dataset_len.div_ceil(self.batch_size);
            self.epochs * batches
        }
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (total_steps as f64 * self.warmup_frac).round() as usize
    }
}
