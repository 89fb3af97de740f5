//! Run configuration: a TOML file plus `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tmsp_core::features::FeatureConfig;
use tmsp_core::model::ModelConfig;
use tmsp_core::training::TrainConfig;
use tmsp_core::world::GenConfig;

use crate::CliError;

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for dataset generation and gradient checks.
    pub seed: u64,
    pub gen: GenConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("run config serializes to a table"),
        };
        if let Some(p) = path {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.gen.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(SNAPSHOT_NAME);
        fs::write(&path, self.to_toml())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Deep-merges `over` into `base`. A table whose `kind` tag changes replaces
/// the base table instead of merging with it.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if b.get("kind") == o.get("kind") || o.get("kind").is_none() =>
            {
                merge(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Sets a dotted key such as `model.d_model=64`. The value is parsed as a TOML
/// value and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override `{item}` has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().unwrap();
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override `{item}`: `{part}` is not a table"))
        })?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::load(
            None,
            &[
                "model.d_model=64".into(),
                "model.trajectory.mode=linear_baseline".into(),
                "train.seeds=[3, 4]".into(),
                "features.text.dim=64".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.train.seeds, vec![3, 4]);
        assert_eq!(
            c.model.trajectory.mode,
            tmsp_core::trajectory::TrajectoryMode::LinearBaseline
        );
    }

    #[test]
    fn file_values_layer_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "seed = 4\n[model]\nlayers = 1\n[features.scene]\nkind = \"precomputed_file\"\npath = \"x.feat\"\n",
        )
        .unwrap();
        let c = RunConfig::load(Some(&path), &["model.layers=3".into()]).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.model.d_model, ModelConfig::default().d_model);
        assert_eq!(
            c.features.scene,
            tmsp_core::features::ProviderSpec::PrecomputedFile {
                path: "x.feat".into()
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["model.width=3".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
        let err = RunConfig::load(None, &["nonsense=1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::load(None, &["seed=9".into(), "train.epochs=2".into()]).unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
