//! Experiment configuration files.
//!
//! Configs are TOML documents resolved in three layers: built-in defaults,
//! then the file, then `dotted.key=value` overrides from the command line.
//! Paths may come from `CYCADA_DATA_ROOT` / `CYCADA_OUT_ROOT`; nothing else
//! is read from the environment.
//!
//! ```toml
//! schema_version = 1
//!
//! [experiment]
//! id = "toy-inversion-pixel"
//! shift = "toy inversion"
//! method = "CyCADA pixel only"
//! stages = ["source-pretrain", "pixel-adapt", "task-on-translated"]
//! seeds = [0, 1, 2]
//!
//! [data]
//! kind = "toy"
//! [data.toy]
//! kind = "intensity-inversion"
//! num_classes = 2
//! samples_per_class = 200
//! seed = 0
//!
//! [models.generator]
//! base_filters = 8
//!
//! [stages.pixel-adapt]
//! max_epochs = 20
//! ablation = { disable_cycle = true }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DigitShift, ToyDomainSpec};
use crate::error::{Error, Result};
use crate::models::{FeatureDiscriminatorOptions, GeneratorOptions, ImageDiscriminatorOptions, SegNetOptions, TaskNetOptions};
use crate::trainer::{Stage, StageConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_ROOT_VAR: &str = "CYCADA_DATA_ROOT";
pub const OUT_ROOT_VAR: &str = "CYCADA_OUT_ROOT";

const TOP_LEVEL: [&str; 5] = ["schema_version", "experiment", "data", "models", "stages"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
    /// Row label of the domain shift in reports.
    pub shift: String,
    /// Row label of the method in reports.
    pub method: String,
    pub stages: Vec<Stage>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Toy,
    Digits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitsSection {
    pub shift: DigitShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Prepared-data directory; falls back to `$CYCADA_DATA_ROOT`, then `data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Keep only the first N training samples of each domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    pub toy: ToyDomainSpec,
    pub digits: DigitsSection,
}

impl DataSection {
    pub fn resolved_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub task_net: TaskNetOptions,
    pub generator: GeneratorOptions,
    pub image_discriminator: ImageDiscriminatorOptions,
    pub feature_discriminator: FeatureDiscriminatorOptions,
    pub seg_net: SegNetOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub models: ModelsSection,
    /// Keyed by stage name.
    pub stages: BTreeMap<String, StageConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: ExperimentSection {
                id: "experiment".into(),
                shift: "unnamed shift".into(),
                method: "CyCADA pixel+feat".into(),
                stages: Stage::ALL.to_vec(),
                seeds: vec![0, 1, 2, 3],
            },
            data: DataSection {
                kind: DataKind::Toy,
                root: None,
                max_train: None,
                toy: ToyDomainSpec::default(),
                digits: DigitsSection { shift: DigitShift::UspsMnist },
            },
            models: ModelsSection::default(),
            stages: Stage::ALL.iter().map(|&s| (s.name().to_string(), StageConfig::digits(s))).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn stage(&self, stage: Stage) -> Result<&StageConfig> {
        self.stages
            .get(stage.name())
            .ok_or_else(|| Error::Config(format!("no configuration for stage `{}`", stage.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let e = &self.experiment;
        if e.id.is_empty() || e.id.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment id `{}` must be a plain non-empty name", e.id)));
        }
        if e.stages.is_empty() || e.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one stage and one seed".into()));
        }
        for (key, cfg) in &self.stages {
            let stage: Stage = key.parse()?;
            if cfg.stage != stage {
                return Err(Error::Config(format!("stages.{key} declares stage `{}`", cfg.stage.name())));
            }
            cfg.validate()?;
        }
        let mut seen = Vec::new();
        for &stage in &e.stages {
            self.stage(stage)?;
            if seen.contains(&stage) {
                return Err(Error::Config(format!("stage `{}` listed twice", stage.name())));
            }
            let needs: &[Stage] = match stage {
                Stage::SourcePretrain => &[],
                Stage::PixelAdapt => &[Stage::SourcePretrain],
                Stage::TaskOnTranslated => &[Stage::PixelAdapt],
                Stage::FeatureAdapt => &[Stage::SourcePretrain],
            };
            if let Some(missing) = needs.iter().find(|n| !seen.contains(n)) {
                return Err(Error::Config(format!("stage `{}` must follow `{}`", stage.name(), missing.name())));
            }
            seen.push(stage);
        }
        if self.data.kind == DataKind::Toy {
            self.data.toy.validate()?;
        }
        Ok(())
    }

    /// Canonical TOML of the fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        resolve(Some(text), &[])
    }
}

fn defaults_value() -> Result<toml::Table> {
    toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))
}

/// Recursively merges `over` into `base`; tables merge, everything else replaces.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Splits `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key `{p}`")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Rewrites overrides aimed at a single stage (`ablation.disable_cycle=true`)
/// into full paths (`stages.pixel-adapt.ablation.disable_cycle=true`).
pub fn scope_overrides(overrides: &[String], stage: Stage) -> Vec<String> {
    overrides
        .iter()
        .map(|o| {
            let head = o.split(['.', '=']).next().unwrap_or("").trim();
            if TOP_LEVEL.contains(&head) {
                o.clone()
            } else {
                format!("stages.{}.{o}", stage.name())
            }
        })
        .collect()
}

/// Defaults, then `file_text`, then `overrides`, then schema validation.
pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = defaults_value()?;
    if let Some(text) = file_text {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, file);
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut table, &path, value)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}

/// Output root: explicit flag, then `$CYCADA_OUT_ROOT`, then `runs`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn three_layer_precedence() {
        let file = "[stages.pixel-adapt]\nbatch_size = 7\nmax_epochs = 3\n";
        let cfg = resolve(Some(file), &["stages.pixel-adapt.batch_size=9".into()]).unwrap();
        let p = cfg.stage(Stage::PixelAdapt).unwrap();
        assert_eq!(p.batch_size, 9);
        assert_eq!(p.max_epochs, 3);
        assert_eq!(p.optimizer.lr(), 2e-4);
    }

    #[test]
    fn stage_scoped_overrides() {
        let scoped = scope_overrides(&["ablation.disable_semantic=true".into(), "data.kind=toy".into()], Stage::PixelAdapt);
        assert_eq!(scoped[0], "stages.pixel-adapt.ablation.disable_semantic=true");
        assert_eq!(scoped[1], "data.kind=toy");
        let cfg = resolve(None, &scoped).unwrap();
        assert!(cfg.stage(Stage::PixelAdapt).unwrap().ablation.disable_semantic);
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for bad in [
            "schema_version = 2",
            "[stages.source-pretrain]\nbatch_size = 0",
            "[stages.feature-adapt.ablation]\ndisable_cycle = true",
            "[experiment]\nstages = [\"task-on-translated\"]",
            "[experiment]\nunknown = 1",
        ] {
            let err = resolve(Some(bad), &[]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
    }

    #[test]
    fn override_values_parse_as_toml() {
        assert_eq!(parse_override("a.b=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("a=true").unwrap().1, toml::Value::Boolean(true));
        assert_eq!(parse_override("a=intensity-inversion").unwrap().1, toml::Value::String("intensity-inversion".into()));
        assert!(parse_override("novalue").is_err());
    }
}
