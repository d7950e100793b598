use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::{AnnotationPolicy, BackgroundKind, DatasetConfig, SceneConfig};
use crate::model::{IppeSchedule, KernelKind};
use crate::training::{PointIterations, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Where the training and validation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub seed: u64,
    pub size: usize,
    pub val_seed: u64,
    pub val_size: usize,
    pub difficulty: BackgroundKind,
    pub scene: SceneConfig,
    /// Saved dataset to train on instead of generating one.
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 5000,
            val_seed: 1,
            val_size: 1000,
            difficulty: BackgroundKind::Stripes,
            scene: SceneConfig::default(),
            path: None,
            val_path: None,
        }
    }
}

/// Every knob of an experiment. Image size comes from the model section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataSection,
    pub annotation: AnnotationPolicy,
    pub dtype: Dtype,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataSection::default(),
            annotation: AnnotationPolicy::default(),
            dtype: Dtype::F32,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn dataset_config(&self, seed: u64, size: usize) -> DatasetConfig {
        DatasetConfig {
            seed,
            size,
            height: self.train.model.height,
            width: self.train.model.width,
            difficulty: self.data.difficulty,
            scene: self.data.scene.clone(),
        }
    }
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                <$t as FromStr>::from_str(s).map_err(|e| format!("`{s}`: {e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool);

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value `{s}`"))
}

fn show_serde<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("enum serializes to a string"),
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                parse_serde(s)
            }
            fn show(&self) -> String {
                show_serde(self)
            }
        }
    )*};
}
enum_value!(KernelKind, BackgroundKind, IppeSchedule, PointIterations, Dtype);

impl Value for Option<PathBuf> {
    fn parse(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn show(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

macro_rules! fields {
    ($($sec:literal . $key:literal => $($path:ident).+ : $t:ty;)*) => {
        fn set_field(cfg: &mut ExperimentConfig, sec: &str, key: &str, value: &str) -> Result<bool, String> {
            match (sec, key) {
                $(($sec, $key) => cfg.$($path).+ = <$t as Value>::parse(value)?,)*
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn entries(cfg: &ExperimentConfig) -> Vec<(&'static str, &'static str, String)> {
            vec![$(($sec, $key, <$t as Value>::show(&cfg.$($path).+)),)*]
        }
    };
}

fields! {
    "model"."height" => train.model.height: usize;
    "model"."width" => train.model.width: usize;
    "model"."slots" => train.model.slots: usize;
    "model"."slot_dim" => train.model.slot_dim: usize;
    "model"."enc_dim" => train.model.enc_dim: usize;
    "model"."attn_dim" => train.model.attn_dim: usize;
    "model"."iterations" => train.model.iterations: usize;
    "model"."conv_channels" => train.model.conv_channels: usize;
    "model"."conv_kernel" => train.model.conv_kernel: usize;
    "model"."mlp_hidden" => train.model.mlp_hidden: usize;
    "model"."ippe" => train.model.ippe_enabled: bool;
    "model"."ippe_schedule" => train.model.ippe_schedule: IppeSchedule;
    "model"."ws_init" => train.model.ws_init_enabled: bool;
    "kernel"."kind" => train.model.kernel.kind: KernelKind;
    "kernel"."size" => train.model.kernel.size: usize;
    "kernel"."tau" => train.model.kernel.tau: f64;
    "kernel"."gaussian_sigma" => train.model.kernel.gaussian_sigma: f64;
    "loss"."recon_weight" => train.loss.recon_weight: f64;
    "loss"."point_weight" => train.loss.point_weight: f64;
    "loss"."point_loss_iterations" => train.loss.point_loss_iterations: PointIterations;
    "schedule"."base_lr" => train.schedule.base_lr: f64;
    "schedule"."warmup_steps" => train.schedule.warmup_steps: u64;
    "schedule"."decay_half_life" => train.schedule.decay_half_life: u64;
    "train"."steps" => train.steps: u64;
    "train"."batch_size" => train.batch_size: usize;
    "train"."eval_every" => train.eval_every: u64;
    "train"."checkpoint_every" => train.checkpoint_every: u64;
    "train"."log_every" => train.log_every: u64;
    "train"."eval_samples" => train.eval_samples: usize;
    "train"."dtype" => dtype: Dtype;
    "train"."threads" => threads: usize;
    "data"."seed" => data.seed: u64;
    "data"."size" => data.size: usize;
    "data"."val_seed" => data.val_seed: u64;
    "data"."val_size" => data.val_size: usize;
    "data"."difficulty" => data.difficulty: BackgroundKind;
    "data"."path" => data.path: Option<PathBuf>;
    "data"."val_path" => data.val_path: Option<PathBuf>;
    "data"."min_objects" => data.scene.min_objects: usize;
    "data"."max_objects" => data.scene.max_objects: usize;
    "data"."min_spacing" => data.scene.min_spacing: f64;
    "data"."min_size" => data.scene.min_size: f64;
    "data"."max_size" => data.scene.max_size: f64;
    "annotation"."image_fraction" => annotation.image_fraction: f64;
    "annotation"."object_fraction" => annotation.object_fraction: f64;
    "annotation"."seed" => annotation.seed: u64;
}

impl ExperimentConfig {
    /// Sets `section.key` from its textual value.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        if set_field(self, section, key, value).map_err(|e| format!("{section}.{key}: {e}"))? {
            Ok(())
        } else {
            Err(format!("unknown key `{section}.{key}`"))
        }
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), String> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| format!("override `{spec}` is not section.key=value"))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| format!("override `{spec}` is not section.key=value"))?;
        self.set(section, key, value.trim())
    }

    /// Reads `[section]` headers and `key = value` lines over `self`.
    /// `#` and `;` start comments.
    pub fn merge_text(&mut self, text: &str) -> Result<(), String> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = |e: String| format!("line {}: {e}", n + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            let sec = section.as_deref().ok_or_else(|| at("key outside any [section]".into()))?;
            self.set(sec, key.trim(), value.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Every key with its current value, in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (sec, key, value) in entries(self) {
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Cross-field checks on top of each module's own validation.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.annotation.validate().map_err(|e| e.to_string())?;
        if self.data.size == 0 || self.data.val_size == 0 {
            return Err("data.size and data.val_size must be positive".into());
        }
        if self.threads == 0 {
            return Err("train.threads must be positive".into());
        }
        let most = self.annotation.annotated_objects(self.data.scene.max_objects);
        if most > self.train.model.slots {
            return Err(format!(
                "up to {most} annotated points per image cannot be matched to {} slots",
                self.train.model.slots
            ));
        }
        Ok(())
    }
}

/// Named presets for the compared methods.
pub const VARIANTS: [&str; 7] = ["sa", "tau2", "gaussian", "conv", "wnconv", "slash", "ws-sa"];

/// Switches the kernel, point branch and weak-supervision init to a named
/// method; other settings are left alone.
pub fn apply_variant(cfg: &mut ExperimentConfig, name: &str) -> Result<(), String> {
    let m = &mut cfg.train.model;
    let (kind, ippe, ws) = match name {
        "sa" => (KernelKind::Identity, false, false),
        "tau2" => (KernelKind::Temperature, false, false),
        "gaussian" => (KernelKind::Gaussian, false, false),
        "conv" => (KernelKind::Conv, false, false),
        "wnconv" => (KernelKind::Wnconv, false, false),
        "slash" => (KernelKind::Wnconv, true, false),
        "ws-sa" => (KernelKind::Identity, false, true),
        _ => return Err(format!("unknown variant `{name}`; expected one of {}", VARIANTS.join(", "))),
    };
    m.kernel.kind = kind;
    m.kernel.tau = if name == "tau2" { 2.0 } else { 1.0 };
    m.ippe_enabled = ippe;
    m.ws_init_enabled = ws;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_config_reads_back_identically() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("kernel.kind=gaussian").unwrap();
        cfg.apply_override("data.path=/tmp/x").unwrap();
        cfg.apply_override("loss.point_loss_iterations = all").unwrap();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let err = ExperimentConfig::from_text("[model]\nslotz = 3\n").unwrap_err();
        assert!(err.contains("line 2") && err.contains("model.slotz"), "{err}");
        assert!(ExperimentConfig::from_text("[nope]\nx = 1\n").is_err());
        assert!(ExperimentConfig::from_text("steps = 3\n").is_err());
        assert!(ExperimentConfig::from_text("[kernel]\nkind = fancy\n").is_err());
    }

    #[test]
    fn file_values_and_overrides_compose() {
        let mut cfg = ExperimentConfig::from_text("# c\n[train]\nsteps = 7 \n; c\n[model]\nslots=4\n").unwrap();
        cfg.apply_override("train.steps=9").unwrap();
        assert_eq!((cfg.train.steps, cfg.train.model.slots), (9, 4));
    }

    #[test]
    fn variants_set_the_method_switches() {
        let mut cfg = ExperimentConfig::default();
        apply_variant(&mut cfg, "tau2").unwrap();
        assert_eq!(cfg.train.model.kernel.kind, KernelKind::Temperature);
        assert_eq!(cfg.train.model.kernel.tau, 2.0);
        apply_variant(&mut cfg, "slash").unwrap();
        let m = &cfg.train.model;
        assert!(m.ippe_enabled && !m.ws_init_enabled && m.kernel.kind == KernelKind::Wnconv && m.kernel.tau == 1.0);
        assert!(apply_variant(&mut cfg, "bogus").is_err());
        for v in VARIANTS {
            apply_variant(&mut cfg, v).unwrap();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn annotations_beyond_the_slot_count_are_refused() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("model.slots=3").unwrap();
        assert!(cfg.validate().unwrap_err().contains("3 slots"));
    }
}
