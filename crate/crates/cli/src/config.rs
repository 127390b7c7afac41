//! Flat `key = value` run configuration with defaults, overrides and a
//! digest of the resolved document.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use patchframe_core::artifact::sha256_hex;
use patchframe_core::attack::{AttackConfig, AttackVariant, LossWeights};
use patchframe_core::defense::DefenseConfig;
use patchframe_core::detector::ToyTrainConfig;
use patchframe_core::eval::{EvalCondition, EvalConfig};
use patchframe_core::seed::derive_seed;

/// Every accepted key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "out"),
    ("detector", ""),
    ("dataset", ""),
    ("train_dataset", ""),
    ("patch", ""),
    ("frame", ""),
    ("image", ""),
    ("synth.n", "500"),
    ("train.epochs", "40"),
    ("train.batch_size", "16"),
    ("train.lr", "0.003"),
    ("train.holdout_fraction", "0.1"),
    ("train.min_ap", "0.85"),
    ("attack.variant", "adv-patch"),
    ("attack.steps", "200"),
    ("attack.lr", "0.03"),
    ("attack.w_obj", "1"),
    ("attack.w_tv", "2.5"),
    ("attack.w_nps", "0.01"),
    ("attack.patch_scale", "0.3"),
    ("attack.patch_side", "24"),
    ("attack.batch_size", "8"),
    ("defense.mode", "uwf"),
    ("defense.thickness", "80"),
    ("defense.epochs", "10"),
    ("defense.patch_steps", "30"),
    ("defense.frame_steps", "30"),
    ("defense.delta", "0.5"),
    ("defense.lr_frame", "0.03"),
    ("defense.norm_k", "2"),
    ("defense.subset_m", "32"),
    ("defense.max_sweeps", "50"),
    ("eval.conditions", "none+none,none+uwf,shared-patch+none,shared-patch+uwf"),
    ("eval.iou_thresh", "0.5"),
    ("eval.detection_threshold", "0.5"),
    ("eval.adaptive", "false"),
    ("eval.per_image", "false"),
    ("eval.per_image_steps", "150"),
    ("eval.per_image_count", "25"),
    ("eval.thicknesses", ""),
    ("eval.maps", "0"),
];

/// Name of the resolved config written next to every artifact set.
pub const RESOLVED_FILE: &str = "config.resolved.txt";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("config key `{key}`: cannot parse `{value}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

/// Resolved key/value document. Keys are always those of [`DEFAULTS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        self.merge_text(&text)
    }

    /// Applies one `key=value` override.
    pub fn merge_assignment(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.to_string(),
            value: v.to_string(),
            reason: e.to_string(),
        })
    }

    /// `None` for an empty path value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.to_string(),
                    value: s.to_string(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    /// The resolved document, one sorted `key = value` line per key.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.resolved().as_bytes())
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.get("seed")
    }

    /// Seed of one pipeline component, split from the global seed.
    pub fn component_seed(&self, component: &str) -> Result<u64, ConfigError> {
        Ok(derive_seed(self.seed()?, component))
    }

    pub fn train(&self) -> Result<ToyTrainConfig, ConfigError> {
        Ok(ToyTrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            holdout_fraction: self.get("train.holdout_fraction")?,
            min_ap: self.get("train.min_ap")?,
            seed: self.component_seed("train")?,
            ..ToyTrainConfig::default()
        })
    }

    pub fn attack(&self) -> Result<AttackConfig, ConfigError> {
        Ok(AttackConfig {
            variant: self.get::<AttackVariant>("attack.variant")?,
            steps: self.get("attack.steps")?,
            lr: self.get("attack.lr")?,
            loss_weights: LossWeights {
                obj: self.get("attack.w_obj")?,
                tv: self.get("attack.w_tv")?,
                nps: self.get("attack.w_nps")?,
            },
            patch_scale_factor: self.get("attack.patch_scale")?,
            patch_side: self.get("attack.patch_side")?,
            batch_size: self.get("attack.batch_size")?,
            seed: self.component_seed("attack")?,
            ..AttackConfig::default()
        })
    }

    pub fn defense(&self) -> Result<DefenseConfig, ConfigError> {
        Ok(DefenseConfig {
            thickness: self.get("defense.thickness")?,
            epochs: self.get("defense.epochs")?,
            patch_steps: self.get("defense.patch_steps")?,
            frame_steps: self.get("defense.frame_steps")?,
            delta: self.get("defense.delta")?,
            lr_frame: self.get("defense.lr_frame")?,
            norm_k: self.get("defense.norm_k")?,
            subset_m: self.get("defense.subset_m")?,
            max_sweeps: self.get("defense.max_sweeps")?,
            seed: self.component_seed("defense")?,
            attack: self.attack()?,
            ..DefenseConfig::default()
        })
    }

    pub fn eval(&self) -> Result<EvalConfig, ConfigError> {
        Ok(EvalConfig {
            iou_thresh: self.get("eval.iou_thresh")?,
            ..EvalConfig::from_attack(&self.attack()?, self.component_seed("eval")?)
        })
    }

    pub fn conditions(&self) -> Result<Vec<EvalCondition>, ConfigError> {
        self.list("eval.conditions")
    }

    pub fn thicknesses(&self) -> Result<Vec<usize>, ConfigError> {
        self.list("eval.thicknesses")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_valid_configs() {
        let c = RunConfig::default();
        c.attack().unwrap().validate().unwrap();
        c.defense().unwrap().validate().unwrap();
        assert_eq!(c.conditions().unwrap().len(), 4);
        assert!(c.thicknesses().unwrap().is_empty());
        assert_eq!(c.attack().unwrap(), AttackConfig {
            seed: derive_seed(0, "attack"),
            ..AttackConfig::default()
        });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert_eq!(c.merge_text("attack.stepz = 3"), Err(ConfigError::UnknownKey("attack.stepz".into())));
        assert!(c.merge_assignment("nope=1").is_err());
        assert!(matches!(c.merge_text("just words"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.merge_text("# budget\nattack.steps = 50  # short\n\nseed=7\n").unwrap();
        c.merge_assignment("attack.steps=60").unwrap();
        assert_eq!(c.attack().unwrap().steps, 60);
        assert_eq!(c.seed().unwrap(), 7);
    }

    #[test]
    fn digest_tracks_every_value() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.set("defense.delta", "0.4").unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.resolved().lines().count(), DEFAULTS.len());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = RunConfig::default();
        c.set("attack.steps", "many").unwrap();
        let e = c.attack().unwrap_err().to_string();
        assert!(e.contains("attack.steps"), "{e}");
        c.set("eval.conditions", "none+none,blob+uwf").unwrap();
        assert!(c.conditions().is_err());
    }

    #[test]
    fn component_seeds_differ() {
        let c = RunConfig::default();
        assert_ne!(c.component_seed("attack").unwrap(), c.component_seed("defense").unwrap());
    }
}
