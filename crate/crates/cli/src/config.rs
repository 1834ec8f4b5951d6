//! Run configurations: TOML files layered under command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use cad_core::density::FlowConfig;
use cad_core::pipeline::InitKind;
use cad_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Usage;

/// File every configurable command writes next to its outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Clr,
    Gaussian,
    Flow,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Clr => "clr",
            ModelKind::Gaussian => "gaussian",
            ModelKind::Flow => "flow",
        }
    }
}

/// Everything that determines a training run apart from the benchmark.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub model: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m0: Option<usize>,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
}

impl TrainRun {
    /// Fills defaults and rejects combinations that cannot run. After this
    /// the configuration is explicit: re-reading its TOML yields itself.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.validate()?;
        match self.model {
            ModelKind::Flow => {
                if self.init.is_some() || self.m0.is_some() {
                    return Err(Usage("the flow learns its own task conditioning; --init and --m0 do not apply".into()).into());
                }
                self.flow.get_or_insert_with(FlowConfig::default);
            }
            ModelKind::Clr | ModelKind::Gaussian => {
                if self.flow.is_some() {
                    return Err(Usage("[flow] settings only apply to --model flow".into()).into());
                }
                let init = self.init.get_or_insert_with(|| "random".into());
                let kind = InitKind::parse(init, self.m0)?;
                if !matches!(kind, InitKind::Learned { .. }) && self.m0.is_some() {
                    return Err(Usage(format!("--m0 only applies to learned initialization, not {init}")).into());
                }
            }
        }
        Ok(self)
    }

    pub fn init_kind(&self) -> Result<Option<InitKind>> {
        self.init
            .as_deref()
            .map(|name| InitKind::parse(name, self.m0))
            .transpose()
            .map_err(Into::into)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Short label such as `clr_learned` used to name reports.
    pub fn label(&self) -> String {
        match &self.init {
            Some(init) => format!("{}_{init}", self.model.name()),
            None => self.model.name().to_owned(),
        }
    }

    /// Dotted `key = value` pairs for report metadata.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("run configuration serializes");
        let mut out = BTreeMap::new();
        flatten_into("", &value, &mut out);
        out
    }
}

fn flatten_into(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        serde_json::Value::Null => {}
        serde_json::Value::String(s) => {
            out.insert(prefix.to_owned(), s.clone());
        }
        other => {
            out.insert(prefix.to_owned(), other.to_string());
        }
    }
}

/// Parses a TOML file into `T`, with the file named in errors.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let run = TrainRun {
            init: Some("learned".into()),
            m0: Some(10),
            ..TrainRun::default()
        }
        .resolve()
        .unwrap();
        let back: TrainRun = toml::from_str(&run.to_toml()).unwrap();
        assert_eq!(back, run);
        assert_eq!(back.clone().resolve().unwrap(), run);
        assert_eq!(run.label(), "clr_learned");
    }

    #[test]
    fn defaults_fill_in() {
        let run = TrainRun::default().resolve().unwrap();
        assert_eq!(run.init.as_deref(), Some("random"));
        let flow = TrainRun {
            model: ModelKind::Flow,
            ..TrainRun::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(flow.flow, Some(FlowConfig::default()));
        assert_eq!(flow.label(), "flow");
    }

    #[test]
    fn incompatible_combinations_rejected() {
        let bad = [
            TrainRun {
                model: ModelKind::Flow,
                init: Some("label".into()),
                ..TrainRun::default()
            },
            TrainRun {
                init: Some("learned".into()),
                ..TrainRun::default()
            },
            TrainRun {
                init: Some("random".into()),
                m0: Some(3),
                ..TrainRun::default()
            },
            TrainRun {
                flow: Some(FlowConfig::default()),
                ..TrainRun::default()
            },
        ];
        for run in bad {
            assert!(run.clone().resolve().is_err(), "{run:?}");
        }
    }

    #[test]
    fn flatten_uses_dotted_keys() {
        let flat = TrainRun::default().resolve().unwrap().flatten();
        assert_eq!(flat["model"], "clr");
        assert_eq!(flat["train.epochs"], "50");
        assert_eq!(flat["train.hidden"], "[32,32,16]");
        assert!(!flat.contains_key("m0"));
    }

    #[test]
    fn shipped_recipes_match_the_library() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let clr: TrainRun = load_toml(&dir.join("clr_learned.toml")).unwrap();
        assert_eq!(clr.train, cad_core::pipeline::blob_clr_recipe());
        assert_eq!(clr.clone().resolve().unwrap(), clr);
        let gauss: TrainRun = load_toml(&dir.join("gaussian.toml")).unwrap();
        assert_eq!(gauss.train, cad_core::pipeline::blob_gaussian_recipe());
        assert_eq!(gauss.model, ModelKind::Gaussian);
    }
}
