use rmbil::evalkit::{DisturbanceSet, RolloutCfg};
use rmbil::plants::{ExpertConfig, PlantKind};
use rmbil::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// The effective configuration of one command, echoed into its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub plant: String,
    pub preset: String,
    pub seed: u64,
    pub subset: Option<usize>,
    pub train: TrainConfig,
    pub rollout: RolloutCfg,
    pub expert: ExpertConfig,
    pub disturbances: DisturbanceSet,
}

impl RunConfig {
    pub fn new(
        command: &str,
        kind: PlantKind,
        preset: &str,
        seed: u64,
        expert: ExpertConfig,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut train = TrainConfig::preset(preset).map_err(|e| CliError::usage(e.to_string()))?;
        train.seed = seed;
        let rollout = RolloutCfg {
            seed,
            ..RolloutCfg::default()
        };
        let mut cfg = Self {
            command: command.to_string(),
            plant: kind.name().to_string(),
            preset: preset.to_string(),
            seed,
            subset: None,
            train,
            rollout,
            expert,
            disturbances: DisturbanceSet::for_plant(kind),
        };
        cfg.apply(overrides)?;
        cfg.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
        cfg.rollout.validate().map_err(|e| CliError::usage(e.to_string()))?;
        cfg.expert.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides. Bare keys address the training
    /// config; `rollout.`, `expert.` and `disturbance.` select the others.
    /// Values are read as JSON, falling back to a plain string.
    pub fn apply(&mut self, overrides: &[String]) -> Result<(), CliError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut v = serde_json::to_value(&*self).map_err(|e| CliError::io(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("override {o:?} is not key=value")))?;
            let (section, field) = match key.split_once('.') {
                Some(("rollout", f)) => ("rollout", f),
                Some(("expert", f)) => ("expert", f),
                Some(("disturbance", f)) => ("disturbances", f),
                Some(("train", f)) => ("train", f),
                Some(_) => return Err(CliError::usage(format!("unknown config key {key:?}"))),
                None => ("train", key),
            };
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let obj = v[section].as_object_mut().expect("sections are objects");
            if !obj.contains_key(field) {
                return Err(CliError::usage(format!("unknown config key {key:?}")));
            }
            obj.insert(field.to_string(), value);
        }
        *self = serde_json::from_value(v).map_err(|e| CliError::usage(format!("bad override: {e}")))?;
        Ok(())
    }

    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
