//! Run configuration: one TOML file naming the data source, model, training
//! loop, methods and seeds. Defaults are the desk-scale presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, CycleDataset, FormatDescriptor, ItemRegistry, PreprocessConfig, SplitConfig, SyntheticStreamConfig,
};
use crate::harness::{MethodKind, MethodSpec, TrainLoopConfig};
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A generated drifting stream.
    Synthetic {
        #[serde(default)]
        synthetic: SyntheticStreamConfig,
    },
    /// A raw delimited event log, preprocessed and split on load.
    Events {
        path: PathBuf,
        #[serde(default)]
        format: FormatDescriptor,
        #[serde(default)]
        preprocess: PreprocessConfig,
        #[serde(default)]
        split: SplitConfig,
    },
    /// A directory written by `preprocess`.
    Datasets { dir: PathBuf },
}

/// Loaded cycles, plus the registry when the source provides one.
pub struct LoadedData {
    pub datasets: Vec<CycleDataset>,
    pub registry: Option<ItemRegistry>,
}

impl DataSource {
    pub fn load(&self) -> Result<LoadedData> {
        match self {
            DataSource::Synthetic { synthetic } => {
                let (datasets, registry) = data::generate_synthetic_stream(synthetic)?;
                Ok(LoadedData {
                    datasets,
                    registry: Some(registry),
                })
            }
            DataSource::Events {
                path,
                format,
                preprocess,
                split,
            } => {
                let ingested = data::ingest(path, format)?;
                if ingested.skipped > 0 {
                    log::warn!("{}: skipped {} malformed rows", path.display(), ingested.skipped);
                }
                let mut pre = data::preprocess(&ingested.events, preprocess)?;
                let datasets = data::split_cycles(&pre.sessions, &mut pre.registry, split)?;
                Ok(LoadedData {
                    datasets,
                    registry: Some(pre.registry),
                })
            }
            DataSource::Datasets { dir } => {
                let datasets = data::read_datasets(dir)?;
                let items = dir.join("items.tsv");
                let registry = if items.exists() { Some(data::read_registry(&items)?) } else { None };
                Ok(LoadedData { datasets, registry })
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("data source is always representable")
    }

    /// Replaces the seed that drives generation or the validation split.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            DataSource::Synthetic { synthetic } => synthetic.seed = seed,
            DataSource::Events { split, .. } => split.seed = seed,
            DataSource::Datasets { .. } => {}
        }
    }
}

/// Settings shared by every method unless a method entry overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodDefaults {
    pub lambda_base: f64,
    /// Defaults to `lambda_base`.
    pub fixed_lambda: Option<f64>,
    pub exemplar_capacity: usize,
    pub ewc_strength: f64,
    pub exemplar_ce_weight: f64,
    pub normalize_features: bool,
}

impl Default for MethodDefaults {
    fn default() -> Self {
        let spec = MethodSpec::new(MethodKind::Ader);
        Self {
            lambda_base: spec.lambda_base,
            fixed_lambda: None,
            exemplar_capacity: spec.exemplar_capacity,
            ewc_strength: spec.ewc_strength,
            exemplar_ce_weight: spec.exemplar_ce_weight,
            normalize_features: spec.normalize_features,
        }
    }
}

impl MethodDefaults {
    pub fn full_scale() -> Self {
        Self {
            exemplar_capacity: 30_000,
            ..Self::default()
        }
    }

    pub fn spec(&self, kind: MethodKind) -> MethodSpec {
        MethodSpec {
            lambda_base: self.lambda_base,
            fixed_lambda: self.fixed_lambda.unwrap_or(self.lambda_base),
            exemplar_capacity: self.exemplar_capacity,
            ewc_strength: self.ewc_strength,
            exemplar_ce_weight: self.exemplar_ce_weight,
            normalize_features: self.normalize_features,
            ..MethodSpec::new(kind)
        }
    }
}

/// A method given either by name or as a table of overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Name(MethodKind),
    Table(MethodOverrides),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOverrides {
    pub kind: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewc_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_ce_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_features: Option<bool>,
}

impl MethodEntry {
    pub fn resolve(&self, defaults: &MethodDefaults) -> MethodSpec {
        let o = match self {
            MethodEntry::Name(kind) => return defaults.spec(*kind),
            MethodEntry::Table(o) => o,
        };
        let base = defaults.spec(o.kind);
        let lambda_base = o.lambda_base.unwrap_or(base.lambda_base);
        MethodSpec {
            kind: o.kind,
            label: o.label.clone().unwrap_or(base.label),
            lambda_base,
            fixed_lambda: o.fixed_lambda.or(defaults.fixed_lambda).unwrap_or(lambda_base),
            exemplar_capacity: o.exemplar_capacity.unwrap_or(base.exemplar_capacity),
            dropout_rate: o.dropout_rate.unwrap_or(base.dropout_rate),
            ewc_strength: o.ewc_strength.unwrap_or(base.ewc_strength),
            exemplar_ce_weight: o.exemplar_ce_weight.unwrap_or(base.exemplar_ce_weight),
            normalize_features: o.normalize_features.unwrap_or(base.normalize_features),
        }
    }
}

/// Capacity sweep for `ablate`: explicit capacities, or fractions of the
/// mean per-cycle training set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<usize>>,
    pub capacity_fractions: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            capacities: None,
            capacity_fractions: vec![0.2, 0.4, 0.6],
        }
    }
}

impl AblationConfig {
    pub fn resolve(&self, datasets: &[CycleDataset]) -> Vec<usize> {
        if let Some(c) = &self.capacities {
            return c.clone();
        }
        // the last cycle is test-only
        let trained = &datasets[..datasets.len().saturating_sub(1)];
        let mean = trained.iter().map(|d| d.train.len()).sum::<usize>() as f64 / trained.len().max(1) as f64;
        self.capacity_fractions
            .iter()
            .map(|f| ((f * mean).round() as usize).max(1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainLoopConfig,
    #[serde(default)]
    pub method_defaults: MethodDefaults,
    pub methods: Vec<MethodEntry>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn field_of(message: &str) -> String {
    let after = |marker: &str| {
        message
            .find(marker)
            .and_then(|i| message[i + marker.len()..].split('`').nth(1))
            .map(str::to_owned)
    };
    after("missing field").or_else(|| after("unknown field")).unwrap_or_else(|| "(document)".to_owned())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_owned();
            Error::Config {
                field: field_of(&message),
                reason: e.to_string().trim().to_owned(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            field: "(file)".into(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn method_specs(&self) -> Vec<MethodSpec> {
        self.methods.iter().map(|m| m.resolve(&self.method_defaults)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.to_owned(),
                reason: reason.to_owned(),
            })
        };
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct");
        }
        let specs = self.method_specs();
        for (i, spec) in specs.iter().enumerate() {
            if specs[..i].iter().any(|s| s.label == spec.label) {
                return bad("methods", &format!("duplicate method label `{}`", spec.label));
            }
            spec.validate()?;
        }
        self.train.validate()?;
        self.model.validate().map_err(|e| Error::Config {
            field: "model".into(),
            reason: e.to_string(),
        })?;
        if let DataSource::Synthetic { synthetic } = &self.data {
            synthetic.validate().map_err(|e| Error::Config {
                field: "data.synthetic".into(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
methods = ["ADER", "FINETUNE"]
seeds = [1, 2, 3]

[data]
source = "synthetic"
"#;

    #[test]
    fn minimal_config_takes_desk_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let specs = cfg.method_specs();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].dropout_rate, 0.3);
        assert_eq!(specs[1].dropout_rate, 0.0);
        assert_eq!(cfg.train, TrainLoopConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.data, DataSource::Synthetic { synthetic: SyntheticStreamConfig::default() });
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("seeds = [1, 2, 3]", "");
        match RunConfig::parse(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "seeds"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("seeds = [1]\nmethods = [\"ADER\"]\n[data]\nsource = \"events\"\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "path"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected_with_field() {
        let cases = [
            (MINIMAL.replace("[1, 2, 3]", "[]"), "seeds"),
            (MINIMAL.replace("[1, 2, 3]", "[1, 1]"), "seeds"),
            (format!("{MINIMAL}\n[train]\npatience = 40\n"), "patience"),
            (format!("{MINIMAL}\n[train]\nbogus = 1\n"), "bogus"),
            (MINIMAL.replace("\"FINETUNE\"", "{ kind = \"FINETUNE\", dropout_rate = 0.3 }"), "FINETUNE.dropout_rate"),
        ];
        for (text, expected) in cases {
            match RunConfig::parse(&text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, expected, "{text}"),
                other => panic!("{expected}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_and_round_trip() {
        let text = r#"
seeds = [7]
methods = ["ADER_FIX", { kind = "ADER", label = "ADER-small", exemplar_capacity = 50 }]

[method_defaults]
lambda_base = 1.0

[data]
source = "datasets"
dir = "some/dir"
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let specs = cfg.method_specs();
        assert_eq!(specs[0].fixed_lambda, 1.0);
        assert_eq!(specs[1].label, "ADER-small");
        assert_eq!(specs[1].exemplar_capacity, 50);
        assert_eq!(specs[1].lambda_base, 1.0);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn capacity_fractions_use_trained_cycles() {
        let mk = |n: usize| CycleDataset {
            cycle_id: 0,
            train: vec![crate::data::TrainingExample::new(vec![0], 0); n],
            validation: Vec::new(),
            item_count_after: 1,
            stats: Default::default(),
        };
        let data = vec![mk(100), mk(300), mk(5000)];
        assert_eq!(AblationConfig::default().resolve(&data), vec![40, 80, 120]);
    }
}
