//! Line-oriented `key=value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.
//! `parse(serialize(cfg)) == cfg` holds exactly (floats are emitted with
//! Rust's shortest round-trip formatting).

use std::path::Path;

use pgdudst_core::dst::DSTConfig;

use crate::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Unfolding stage count K.
    pub stages: usize,
    pub bands: usize,
    pub base_channels: usize,
    pub blocks_per_level: [usize; 3],
    pub heads_per_level: [usize; 3],
    pub gdfn_expansion: f64,
    pub global_residual: bool,

    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub dispersion_step: usize,
    pub noise: bool,
    pub noise_bits: u32,
    pub augment: bool,
    pub seed: u64,

    /// Synthetic scene geometry used when `data_dir` is empty.
    pub scene_height: usize,
    pub scene_width: usize,
    pub train_scenes: usize,
    pub holdout_scenes: usize,

    /// Directory of `.hsc` cubes; empty means generate synthetic scenes.
    pub data_dir: String,
    /// Directory receiving `best.pgdw` / `last.pgdw`; empty disables saving.
    pub checkpoint_dir: String,
    /// CSV training log path; empty disables the log file.
    pub log_path: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: a two-stage model on 32x32x8 synthetic scenes,
    /// trainable on one CPU core in minutes.
    pub fn toy() -> Self {
        ExperimentConfig {
            stages: 2,
            bands: 8,
            base_channels: 8,
            blocks_per_level: [1, 1, 1],
            heads_per_level: [1, 1, 1],
            gdfn_expansion: 2.66,
            global_residual: true,
            epochs: 10,
            steps_per_epoch: 30,
            lr_max: 1e-3,
            warmup_epochs: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            patch_size: 32,
            dispersion_step: 1,
            noise: false,
            noise_bits: 11,
            augment: true,
            seed: 0,
            scene_height: 32,
            scene_width: 32,
            train_scenes: 8,
            holdout_scenes: 2,
            data_dir: String::new(),
            checkpoint_dir: String::new(),
            log_path: String::new(),
        }
    }

    pub fn dst_config(&self) -> DSTConfig {
        DSTConfig {
            bands: self.bands,
            base_channels: self.base_channels,
            blocks_per_level: self.blocks_per_level,
            heads_per_level: self.heads_per_level,
            gdfn_expansion: self.gdfn_expansion,
            global_residual: self.global_residual,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> AppResult<()> {
        self.dst_config().validate()?;
        let positive = [
            ("stages", self.stages),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("patch_size", self.patch_size),
            ("scene_height", self.scene_height),
            ("scene_width", self.scene_width),
            ("train_scenes", self.train_scenes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AppError::Data(format!("config: {name} must be positive")));
            }
        }
        if self.batch_size != 1 {
            return Err(AppError::Data(
                "config: only batch_size=1 is supported (the tape is rebuilt per sample)".into(),
            ));
        }
        if self.lr_max < 0.0 || !self.lr_max.is_finite() {
            return Err(AppError::Data("config: lr_max must be finite and >= 0".into()));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(AppError::Data(
                "config: warmup_epochs must satisfy 0 < warmup_epochs < epochs".into(),
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AppError::Data(format!("config: {name} must lie in [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(AppError::Data("config: adam_eps must be positive".into()));
        }
        if self.patch_size > self.scene_height || self.patch_size > self.scene_width {
            return Err(AppError::Data(
                "config: patch_size must not exceed the scene extents".into(),
            ));
        }
        if self.noise && !(1..=16).contains(&self.noise_bits) {
            return Err(AppError::Data("config: noise_bits must lie in 1..=16".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        let triple = |v: &[usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        s.push_str("# model\n");
        kv(&mut s, "stages", self.stages.to_string());
        kv(&mut s, "bands", self.bands.to_string());
        kv(&mut s, "base_channels", self.base_channels.to_string());
        kv(&mut s, "blocks_per_level", triple(&self.blocks_per_level));
        kv(&mut s, "heads_per_level", triple(&self.heads_per_level));
        kv(&mut s, "gdfn_expansion", self.gdfn_expansion.to_string());
        kv(&mut s, "global_residual", self.global_residual.to_string());
        s.push_str("# optimization\n");
        kv(&mut s, "epochs", self.epochs.to_string());
        kv(&mut s, "steps_per_epoch", self.steps_per_epoch.to_string());
        kv(&mut s, "lr_max", self.lr_max.to_string());
        kv(&mut s, "warmup_epochs", self.warmup_epochs.to_string());
        kv(&mut s, "adam_beta1", self.adam_beta1.to_string());
        kv(&mut s, "adam_beta2", self.adam_beta2.to_string());
        kv(&mut s, "adam_eps", self.adam_eps.to_string());
        kv(&mut s, "batch_size", self.batch_size.to_string());
        s.push_str("# data\n");
        kv(&mut s, "patch_size", self.patch_size.to_string());
        kv(&mut s, "dispersion_step", self.dispersion_step.to_string());
        kv(&mut s, "noise", self.noise.to_string());
        kv(&mut s, "noise_bits", self.noise_bits.to_string());
        kv(&mut s, "augment", self.augment.to_string());
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "scene_height", self.scene_height.to_string());
        kv(&mut s, "scene_width", self.scene_width.to_string());
        kv(&mut s, "train_scenes", self.train_scenes.to_string());
        kv(&mut s, "holdout_scenes", self.holdout_scenes.to_string());
        s.push_str("# paths\n");
        kv(&mut s, "data_dir", self.data_dir.clone());
        kv(&mut s, "checkpoint_dir", self.checkpoint_dir.clone());
        kv(&mut s, "log_path", self.log_path.clone());
        s
    }

    /// Parse over `toy()` defaults; every assignment must name a known key.
    pub fn parse(text: &str) -> AppResult<Self> {
        let mut cfg = ExperimentConfig::toy();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AppError::Data(format!("config line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                AppError::Data(format!(
                    "config line {}: {key}: cannot parse {value:?} as {what}",
                    lineno + 1
                ))
            };
            macro_rules! set {
                ($field:ident, $ty:literal) => {
                    cfg.$field = value.parse().map_err(|_| bad($ty))?
                };
            }
            match key {
                "stages" => set!(stages, "integer"),
                "bands" => set!(bands, "integer"),
                "base_channels" => set!(base_channels, "integer"),
                "blocks_per_level" => cfg.blocks_per_level = parse_triple(value).ok_or_else(|| bad("three comma-separated integers"))?,
                "heads_per_level" => cfg.heads_per_level = parse_triple(value).ok_or_else(|| bad("three comma-separated integers"))?,
                "gdfn_expansion" => set!(gdfn_expansion, "number"),
                "global_residual" => set!(global_residual, "bool"),
                "epochs" => set!(epochs, "integer"),
                "steps_per_epoch" => set!(steps_per_epoch, "integer"),
                "lr_max" => set!(lr_max, "number"),
                "warmup_epochs" => set!(warmup_epochs, "integer"),
                "adam_beta1" => set!(adam_beta1, "number"),
                "adam_beta2" => set!(adam_beta2, "number"),
                "adam_eps" => set!(adam_eps, "number"),
                "batch_size" => set!(batch_size, "integer"),
                "patch_size" => set!(patch_size, "integer"),
                "dispersion_step" => set!(dispersion_step, "integer"),
                "noise" => set!(noise, "bool"),
                "noise_bits" => set!(noise_bits, "integer"),
                "augment" => set!(augment, "bool"),
                "seed" => set!(seed, "integer"),
                "scene_height" => set!(scene_height, "integer"),
                "scene_width" => set!(scene_width, "integer"),
                "train_scenes" => set!(train_scenes, "integer"),
                "holdout_scenes" => set!(holdout_scenes, "integer"),
                "data_dir" => cfg.data_dir = value.to_string(),
                "checkpoint_dir" => cfg.checkpoint_dir = value.to_string(),
                "log_path" => cfg.log_path = value.to_string(),
                other => {
                    return Err(AppError::Data(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_triple(v: &str) -> Option<[usize; 3]> {
    let mut it = v.split(',').map(|p| p.trim().parse::<usize>().ok());
    let out = [it.next()??, it.next()??, it.next()??];
    if it.next().is_some() {
        return None;
    }
    Some(out)
}
