//! Declarative run configuration.
//!
//! One TOML file describes an experiment; command-line overrides use
//! `--section.key=value` syntax and go through the same deserializer, so
//! unknown keys are rejected and every field keeps its documented default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{DgError, Result};
use crate::graph::WiringKind;
use crate::model::{ArchConfig, ConnectivityMode, RouterInit};
use crate::routing::ThresholdPolicy;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub architecture: ArchSection,
    pub routing: RoutingSection,
    pub training: TrainSection,
    pub dataset: DataSection,
    /// Where commands place checkpoints, metrics and exports.
    pub output_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub stages: usize,
    pub nodes_per_stage: usize,
    /// Channel count per stage; a single entry applies to every stage.
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub in_channels: usize,
    pub pattern: String,
    pub er_p: f64,
    pub ba_m: usize,
    pub ws_k: usize,
    pub ws_p: f64,
    pub graph_seed: u64,
    pub stage_stride: usize,
    pub kernel_size: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            stages: 2,
            nodes_per_stage: 5,
            channels: vec![8, 16],
            image_size: 16,
            in_channels: 3,
            pattern: "complete".into(),
            er_p: 0.2,
            ba_m: 5,
            ws_k: 4,
            ws_p: 0.75,
            graph_seed: 0,
            stage_stride: 2,
            kernel_size: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingSection {
    /// Threshold mode at inference: "off" or "fixed".
    pub threshold_mode: String,
    pub tau: f64,
    pub init_std: f64,
    pub init_bias: f64,
}

impl Default for RoutingSection {
    fn default() -> Self {
        Self {
            threshold_mode: "off".into(),
            tau: 0.05,
            init_std: 0.01,
            init_bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Connectivity mechanism: baseline | static_alpha | dynamic.
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: "dynamic".into(),
            epochs: 8,
            batch_size: 32,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "synthetic" or "cifar10".
    pub source: String,
    /// CIFAR-10 binary file or directory (cifar10 source only).
    pub path: String,
    pub classes: usize,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    /// Optional split caps for cifar10 (0 = keep everything).
    pub train_cap: usize,
    pub eval_cap: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            path: String::new(),
            classes: 4,
            per_class: 150,
            eval_per_class: 40,
            noise: 0.5,
            seed: 0,
            train_cap: 0,
            eval_cap: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DgError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Loads a config (defaults when `path` is `None`) and applies
    /// `section.key=value` overrides through the TOML value tree, so the
    /// usual unknown-key and type checking also covers overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut tree: toml::Value =
            toml::from_str(&text).map_err(|e| DgError::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut tree, key, value)?;
        }
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| DgError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn classes(&self) -> usize {
        if self.dataset.source == "cifar10" {
            10
        } else {
            self.dataset.classes
        }
    }

    pub fn wiring_kind(&self) -> Result<WiringKind> {
        Ok(match self.architecture.pattern.as_str() {
            "vgg" => WiringKind::Vgg,
            "res" => WiringKind::Res,
            "dense" => WiringKind::Dense,
            "complete" => WiringKind::Complete,
            "er" => WiringKind::Er {
                p: self.architecture.er_p,
            },
            "ba" => WiringKind::Ba {
                m: self.architecture.ba_m,
            },
            "ws" => WiringKind::Ws {
                k: self.architecture.ws_k,
                p: self.architecture.ws_p,
            },
            other => {
                return Err(DgError::Config(format!(
                    "unknown wiring pattern {other:?}"
                )))
            }
        })
    }

    pub fn mode(&self) -> Result<ConnectivityMode> {
        Ok(match self.training.mode.as_str() {
            "baseline" => ConnectivityMode::Baseline,
            "static_alpha" => ConnectivityMode::StaticAlpha,
            "dynamic" => ConnectivityMode::Dynamic,
            other => {
                return Err(DgError::Config(format!(
                    "unknown connectivity mode {other:?}"
                )))
            }
        })
    }

    pub fn image_size(&self) -> usize {
        if self.dataset.source == "cifar10" {
            32
        } else {
            self.architecture.image_size
        }
    }

    pub fn arch_config(&self) -> Result<ArchConfig> {
        let a = &self.architecture;
        let channels = if a.channels.len() == 1 {
            vec![a.channels[0]; a.stages]
        } else {
            a.channels.clone()
        };
        let arch = ArchConfig {
            stages: a.stages,
            nodes_per_stage: a.nodes_per_stage,
            channels,
            in_channels: a.in_channels,
            image_size: self.image_size(),
            classes: self.classes(),
            pattern: self.wiring_kind()?,
            graph_seed: a.graph_seed,
            stage_stride: a.stage_stride,
            kernel_size: a.kernel_size,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn router_init(&self) -> RouterInit {
        RouterInit {
            std: self.routing.init_std,
            bias: self.routing.init_bias,
        }
    }

    pub fn threshold_policy(&self) -> Result<ThresholdPolicy> {
        match self.routing.threshold_mode.as_str() {
            "off" => Ok(ThresholdPolicy::off()),
            "fixed" => ThresholdPolicy::fixed(self.routing.tau),
            other => Err(DgError::Config(format!(
                "unknown threshold mode {other:?}"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            label_smoothing: t.label_smoothing as f32,
            warmup_epochs: t.warmup_epochs,
            seed: t.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.dataset.classes,
            per_class: self.dataset.per_class,
            eval_per_class: self.dataset.eval_per_class,
            image_size: self.architecture.image_size,
            noise: self.dataset.noise,
            seed: self.dataset.seed,
        }
    }
}

/// Sets `a.b = value` inside a TOML value tree, parsing the value as bool,
/// integer, float, array or string (in that order).
fn apply_override(tree: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DgError::Config(format!("bad override key {key:?}")));
    }
    let mut cursor = tree;
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_table() {
            return Err(DgError::Config(format!(
                "override {key:?}: {part} is not a section"
            )));
        }
        cursor = cursor
            .as_table_mut()
            .expect("checked")
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| {
        DgError::Config(format!("override {key:?} does not name a table entry"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(value));
    Ok(())
}

fn parse_literal(value: &str) -> toml::Value {
    if let Ok(b) = value.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = value.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = value.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if value.starts_with('[') {
        if let Ok(v) = toml::from_str::<toml::Value>(&format!("x = {value}")) {
            if let Some(x) = v.get("x") {
                return x.clone();
            }
        }
    }
    toml::Value::String(value.to_string())
}

/// Splits raw command-line arguments into `--section.key=value` overrides
/// and everything else.
pub fn extract_overrides(args: &[String]) -> (Vec<(String, String)>, Vec<String>) {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    for arg in args {
        let stripped = arg.strip_prefix("--");
        match stripped.and_then(|s| s.split_once('=')) {
            Some((key, value)) if key.contains('.') => {
                overrides.push((key.to_string(), value.to_string()));
            }
            _ => rest.push(arg.clone()),
        }
    }
    (overrides, rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[training]\nbogus_field = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_field"), "{msg}");
    }

    #[test]
    fn overrides_apply_with_types() {
        let overrides = vec![
            ("training.epochs".to_string(), "3".to_string()),
            ("training.base_lr".to_string(), "0.05".to_string()),
            ("training.mode".to_string(), "baseline".to_string()),
            ("architecture.channels".to_string(), "[4, 8]".to_string()),
        ];
        let cfg = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.training.base_lr, 0.05);
        assert_eq!(cfg.training.mode, "baseline");
        assert_eq!(cfg.architecture.channels, vec![4, 8]);
    }

    #[test]
    fn override_with_unknown_key_fails() {
        let overrides = vec![("training.nope".to_string(), "1".to_string())];
        assert!(RunConfig::load(None, &overrides).is_err());
    }

    #[test]
    fn extract_overrides_splits_args() {
        let args: Vec<String> = [
            "train",
            "--config",
            "run.toml",
            "--training.epochs=9",
            "--dataset.noise=0.3",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (ovr, rest) = extract_overrides(&args);
        assert_eq!(
            ovr,
            vec![
                ("training.epochs".to_string(), "9".to_string()),
                ("dataset.noise".to_string(), "0.3".to_string())
            ]
        );
        assert_eq!(rest, vec!["train", "--config", "run.toml"]);
    }

    #[test]
    fn single_channel_entry_broadcasts() {
        let cfg = RunConfig::load(
            None,
            &[
                ("architecture.stages".to_string(), "3".to_string()),
                ("architecture.channels".to_string(), "[8]".to_string()),
                ("architecture.image_size".to_string(), "32".to_string()),
            ],
        )
        .unwrap();
        let arch = cfg.arch_config().unwrap();
        assert_eq!(arch.channels, vec![8, 8, 8]);
    }

    #[test]
    fn wiring_kind_uses_generator_params() {
        let cfg = RunConfig::load(
            None,
            &[
                ("architecture.pattern".to_string(), "ws".to_string()),
                ("architecture.ws_k".to_string(), "2".to_string()),
                ("architecture.ws_p".to_string(), "0.25".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(
            cfg.wiring_kind().unwrap(),
            WiringKind::Ws { k: 2, p: 0.25 }
        );
    }

    #[test]
    fn cifar_source_pins_classes_and_size() {
        let cfg = RunConfig::load(
            None,
            &[("dataset.source".to_string(), "cifar10".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.classes(), 10);
        assert_eq!(cfg.image_size(), 32);
    }
}
