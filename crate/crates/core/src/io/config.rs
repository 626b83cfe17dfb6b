//! Flat `key = value` run configuration.
//!
//! One setting per line, full-line `#` comments, blank lines ignored.
//! Keys are namespaced (`train.lr`, `aug.tau`, `pipeline.threshold`).
//! Parsing starts from the desk-scale defaults and overrides whatever
//! the file mentions; unknown and duplicate keys are errors, so typos
//! never silently fall back to a default. [`RunConfig::to_text`] echoes
//! the full sorted key set, and parsing that echo reproduces the config
//! exactly (floats are printed with shortest-round-trip formatting).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};
use crate::net::NetworkConfig;
use crate::objective::LossParams;
use crate::pipeline::{PipelineConfig, RoiMode};
use crate::trainer::{Arm, LrMode, TrainConfig};

/// Every knob of the toolchain in one flat structure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub phantom_dims: Dims,
    pub phantom_spacing_mm: f64,
    pub phantom_count_a: usize,
    pub phantom_count_b: usize,
    pub phantom_count_c: usize,

    pub sdt_cap_mm: f64,
    pub sdt_steepness: f64,

    pub aug_tau: f64,
    pub aug_samples_per_class: usize,

    pub net_levels: usize,
    pub net_base_channels: usize,
    pub net_blocks_per_level: usize,
    pub net_head_width: usize,
    pub net_proj_dim: usize,
    pub net_dropout: f64,

    pub train_lr: f64,
    pub train_max_iter: usize,
    /// `0` means "not set": `train_max_iter` governs. Nonzero overrides
    /// the iteration budget with `epochs * cases`.
    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_adam_eps: f64,
    pub train_lr_mode: LrMode,
    pub train_fg_bias: f64,
    pub train_patch: Dims,
    /// Comma-separated domains to train on, e.g. `A,B`.
    pub train_domains: String,

    pub pipeline_threshold: f64,
    pub pipeline_overlap: f64,
    pub pipeline_downsample: f64,
    pub pipeline_margin: usize,
    pub pipeline_patch: Dims,
    pub pipeline_roi: RoiMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            phantom_dims: Dims::new(32, 64, 64),
            phantom_spacing_mm: 1.0,
            phantom_count_a: 20,
            phantom_count_b: 20,
            phantom_count_c: 20,
            sdt_cap_mm: 30.0,
            sdt_steepness: 4.0,
            aug_tau: 0.1,
            aug_samples_per_class: 4,
            net_levels: 2,
            net_base_channels: 8,
            net_blocks_per_level: 1,
            net_head_width: 8,
            net_proj_dim: 16,
            net_dropout: 0.1,
            train_lr: 1e-4,
            train_max_iter: 300,
            train_epochs: 0,
            train_batch: 4,
            train_beta1: 0.9,
            train_beta2: 0.999,
            train_adam_eps: 1e-8,
            train_lr_mode: LrMode::Compound,
            train_fg_bias: 0.7,
            train_patch: Dims::new(8, 24, 24),
            train_domains: "A,B".into(),
            pipeline_threshold: 0.5,
            pipeline_overlap: 0.25,
            pipeline_downsample: 2.0,
            pipeline_margin: 8,
            pipeline_patch: Dims::new(8, 24, 24),
            pipeline_roi: RoiMode::Seg,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::ConfigError(format!("key {key}: cannot parse {value:?} as {want}"))
}

impl RunConfig {
    /// Parse a config file body. Settings not mentioned keep their
    /// defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::ConfigError(format!(
                    "line {}: empty key or value in {raw:?}",
                    lineno + 1
                )));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigError(format!("duplicate key {key}")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let us = |v: &str| v.parse::<usize>().map_err(|_| bad(key, v, "an unsigned integer"));
        let u64v = |v: &str| v.parse::<u64>().map_err(|_| bad(key, v, "an unsigned integer"));
        let f = |v: &str| v.parse::<f64>().map_err(|_| bad(key, v, "a number"));
        match key {
            "seed" => self.seed = u64v(v)?,
            "phantom.dim_z" => self.phantom_dims.z = us(v)?,
            "phantom.dim_y" => self.phantom_dims.y = us(v)?,
            "phantom.dim_x" => self.phantom_dims.x = us(v)?,
            "phantom.spacing_mm" => self.phantom_spacing_mm = f(v)?,
            "phantom.count_a" => self.phantom_count_a = us(v)?,
            "phantom.count_b" => self.phantom_count_b = us(v)?,
            "phantom.count_c" => self.phantom_count_c = us(v)?,
            "sdt.cap_mm" => self.sdt_cap_mm = f(v)?,
            "sdt.steepness" => self.sdt_steepness = f(v)?,
            "aug.tau" => self.aug_tau = f(v)?,
            "aug.samples_per_class" => self.aug_samples_per_class = us(v)?,
            "net.levels" => self.net_levels = us(v)?,
            "net.base_channels" => self.net_base_channels = us(v)?,
            "net.blocks_per_level" => self.net_blocks_per_level = us(v)?,
            "net.head_width" => self.net_head_width = us(v)?,
            "net.proj_dim" => self.net_proj_dim = us(v)?,
            "net.dropout" => self.net_dropout = f(v)?,
            "train.lr" => self.train_lr = f(v)?,
            "train.max_iter" => self.train_max_iter = us(v)?,
            "train.epochs" => self.train_epochs = us(v)?,
            "train.batch" => self.train_batch = us(v)?,
            "train.beta1" => self.train_beta1 = f(v)?,
            "train.beta2" => self.train_beta2 = f(v)?,
            "train.adam_eps" => self.train_adam_eps = f(v)?,
            "train.lr_mode" => self.train_lr_mode = LrMode::from_str(v)?,
            "train.fg_bias" => self.train_fg_bias = f(v)?,
            "train.patch_z" => self.train_patch.z = us(v)?,
            "train.patch_y" => self.train_patch.y = us(v)?,
            "train.patch_x" => self.train_patch.x = us(v)?,
            "train.domains" => self.train_domains = v.to_string(),
            "pipeline.threshold" => self.pipeline_threshold = f(v)?,
            "pipeline.overlap" => self.pipeline_overlap = f(v)?,
            "pipeline.downsample" => self.pipeline_downsample = f(v)?,
            "pipeline.margin" => self.pipeline_margin = us(v)?,
            "pipeline.patch_z" => self.pipeline_patch.z = us(v)?,
            "pipeline.patch_y" => self.pipeline_patch.y = us(v)?,
            "pipeline.patch_x" => self.pipeline_patch.x = us(v)?,
            "pipeline.roi" => self.pipeline_roi = RoiMode::from_str(v)?,
            other => {
                return Err(Error::ConfigError(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Echo every setting, sorted by key, ready to be parsed back.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("phantom.dim_z", self.phantom_dims.z.to_string()),
            ("phantom.dim_y", self.phantom_dims.y.to_string()),
            ("phantom.dim_x", self.phantom_dims.x.to_string()),
            ("phantom.spacing_mm", format!("{:?}", self.phantom_spacing_mm)),
            ("phantom.count_a", self.phantom_count_a.to_string()),
            ("phantom.count_b", self.phantom_count_b.to_string()),
            ("phantom.count_c", self.phantom_count_c.to_string()),
            ("sdt.cap_mm", format!("{:?}", self.sdt_cap_mm)),
            ("sdt.steepness", format!("{:?}", self.sdt_steepness)),
            ("aug.tau", format!("{:?}", self.aug_tau)),
            ("aug.samples_per_class", self.aug_samples_per_class.to_string()),
            ("net.levels", self.net_levels.to_string()),
            ("net.base_channels", self.net_base_channels.to_string()),
            ("net.blocks_per_level", self.net_blocks_per_level.to_string()),
            ("net.head_width", self.net_head_width.to_string()),
            ("net.proj_dim", self.net_proj_dim.to_string()),
            ("net.dropout", format!("{:?}", self.net_dropout)),
            ("train.lr", format!("{:?}", self.train_lr)),
            ("train.max_iter", self.train_max_iter.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.batch", self.train_batch.to_string()),
            ("train.beta1", format!("{:?}", self.train_beta1)),
            ("train.beta2", format!("{:?}", self.train_beta2)),
            ("train.adam_eps", format!("{:?}", self.train_adam_eps)),
            ("train.lr_mode", self.train_lr_mode.as_str().to_string()),
            ("train.fg_bias", format!("{:?}", self.train_fg_bias)),
            ("train.patch_z", self.train_patch.z.to_string()),
            ("train.patch_y", self.train_patch.y.to_string()),
            ("train.patch_x", self.train_patch.x.to_string()),
            ("train.domains", self.train_domains.clone()),
            ("pipeline.threshold", format!("{:?}", self.pipeline_threshold)),
            ("pipeline.overlap", format!("{:?}", self.pipeline_overlap)),
            ("pipeline.downsample", format!("{:?}", self.pipeline_downsample)),
            ("pipeline.margin", self.pipeline_margin.to_string()),
            ("pipeline.patch_z", self.pipeline_patch.z.to_string()),
            ("pipeline.patch_y", self.pipeline_patch.y.to_string()),
            ("pipeline.patch_x", self.pipeline_patch.x.to_string()),
            ("pipeline.roi", self.pipeline_roi.as_str().to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// Cross-field checks beyond what the typed sub-configs validate.
    pub fn validate(&self) -> Result<()> {
        if !(self.phantom_spacing_mm.is_finite() && self.phantom_spacing_mm > 0.0) {
            return Err(Error::ConfigError(format!(
                "phantom.spacing_mm = {} must be finite and > 0",
                self.phantom_spacing_mm
            )));
        }
        if !(self.sdt_cap_mm.is_finite() && self.sdt_cap_mm > 0.0) {
            return Err(Error::ConfigError(format!(
                "sdt.cap_mm = {} must be finite and > 0",
                self.sdt_cap_mm
            )));
        }
        self.domains()?;
        self.net_config().validate()?;
        self.train_config(Arm::Full)?.validate()?;
        self.pipeline_config().validate()?;
        Ok(())
    }

    /// Parsed, validated training domains in file order.
    pub fn domains(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for part in self.train_domains.split(',') {
            let name = part.trim();
            if !matches!(name, "A" | "B" | "C") {
                return Err(Error::ConfigError(format!(
                    "train.domains: unknown domain {name:?} (expected A, B, or C)"
                )));
            }
            if out.contains(&name.to_string()) {
                return Err(Error::ConfigError(format!(
                    "train.domains: domain {name} listed twice"
                )));
            }
            out.push(name.to_string());
        }
        Ok(out)
    }

    pub fn spacing(&self) -> Result<Spacing> {
        Spacing::isotropic(self.phantom_spacing_mm)
    }

    pub fn net_config(&self) -> NetworkConfig {
        NetworkConfig {
            levels: self.net_levels,
            base_channels: self.net_base_channels,
            blocks_per_level: self.net_blocks_per_level,
            head_width: self.net_head_width,
            proj_dim: self.net_proj_dim,
            dropout: self.net_dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, arm: Arm) -> Result<TrainConfig> {
        Ok(TrainConfig {
            arm,
            lr: self.train_lr,
            max_iter: self.train_max_iter,
            epochs: (self.train_epochs > 0).then_some(self.train_epochs),
            batch: self.train_batch,
            beta1: self.train_beta1,
            beta2: self.train_beta2,
            adam_eps: self.train_adam_eps,
            lr_mode: self.train_lr_mode,
            patch: self.train_patch,
            fg_bias: self.train_fg_bias,
            samples_per_class: self.aug_samples_per_class,
            cap_mm: self.sdt_cap_mm,
            loss: LossParams {
                eps: 1e-7,
                steepness: self.sdt_steepness,
                tau: self.aug_tau,
            },
            seed: self.seed,
        })
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            patch: self.pipeline_patch,
            overlap: self.pipeline_overlap,
            threshold: self.pipeline_threshold,
            downsample: self.pipeline_downsample,
            margin: self.pipeline_margin,
            roi: self.pipeline_roi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trip_is_identity() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text, "echo must be idempotent");
    }

    #[test]
    fn echo_survives_non_default_floats() {
        let mut cfg = RunConfig::default();
        cfg.train_lr = 3.0e-4;
        cfg.aug_tau = 0.07;
        cfg.sdt_cap_mm = 12.5;
        cfg.train_lr_mode = LrMode::Poly;
        cfg.pipeline_roi = RoiMode::Mask;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_with_comments_overrides_only_what_it_names() {
        let text = "\
# experiment overrides
seed = 99

train.lr = 0.001
  # indented comment
train.domains = A,C
";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.train_lr, 0.001);
        assert_eq!(cfg.domains().unwrap(), vec!["A", "C"]);
        assert_eq!(cfg.train_max_iter, RunConfig::default().train_max_iter);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected() {
        for text in [
            "train.learning_rate = 1.0",
            "seed = 1\nseed = 2",
            "just a line without equals",
            "train.lr = ",
            "train.lr = fast",
            "train.lr_mode = sometimes",
            "pipeline.roi = both",
            "train.domains = A,D",
            "train.domains = A,A",
        ] {
            let r = RunConfig::from_text(text);
            assert!(matches!(r, Err(Error::ConfigError(_))), "accepted {text:?}");
        }
    }

    #[test]
    fn invalid_cross_field_values_fail_validation() {
        for text in [
            "phantom.spacing_mm = 0",
            "sdt.cap_mm = -3",
            "net.levels = 0",
            "pipeline.overlap = 0.95",
            "train.fg_bias = 1.5",
        ] {
            let r = RunConfig::from_text(text);
            assert!(r.is_err(), "accepted {text:?}");
        }
    }

    #[test]
    fn epochs_zero_means_unset() {
        let cfg = RunConfig::from_text("train.epochs = 0").unwrap();
        assert_eq!(cfg.train_config(Arm::Bl).unwrap().epochs, None);
        let cfg = RunConfig::from_text("train.epochs = 3").unwrap();
        assert_eq!(cfg.train_config(Arm::Bl).unwrap().epochs, Some(3));
    }

    #[test]
    fn typed_sub_configs_carry_the_right_fields() {
        let cfg = RunConfig::from_text("net.proj_dim = 24\naug.tau = 0.2\nsdt.steepness = 8")
            .unwrap();
        assert_eq!(cfg.net_config().proj_dim, 24);
        let t = cfg.train_config(Arm::Dsl).unwrap();
        assert_eq!(t.loss.tau, 0.2);
        assert_eq!(t.loss.steepness, 8.0);
        assert_eq!(t.arm, Arm::Dsl);
    }
}
