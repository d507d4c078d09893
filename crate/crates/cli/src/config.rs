//! Run configuration: a TOML document merged over model presets and
//! generator defaults, with `--set key=value` overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pdefm::model::ModelConfig;
use pdefm::pdegen::{GenSpec, Pde};
use pdefm::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "PDEFM_DATA_DIR";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    #[serde(default)]
    model: Table,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    datasets: Vec<RawDataset>,
    finetune: Option<FinetuneSection>,
    #[serde(default)]
    eval: EvalSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    name: String,
    path: Option<PathBuf>,
    generate: Option<Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub level: u8,
    #[serde(default = "default_r_attn")]
    pub r_attn: usize,
    #[serde(default = "default_r_mlp")]
    pub r_mlp: usize,
    pub checkpoint: Option<PathBuf>,
}

fn default_r_attn() -> usize {
    16
}

fn default_r_mlp() -> usize {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub rollout_steps: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "test".into(), rollout_steps: 10, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetEntry {
    pub name: String,
    pub dir: PathBuf,
    /// How to create the container when `dir` does not hold one.
    pub generate: Option<GenSpec>,
}

/// Fully merged and validated configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub datasets: Vec<DatasetEntry>,
    pub finetune: Option<FinetuneSection>,
    pub eval: EvalSection,
    /// Whether `train.lr` / `train.weight_decay` were given explicitly.
    #[serde(skip)]
    pub explicit_lr: bool,
    #[serde(skip)]
    pub explicit_wd: bool,
}

/// Default data directory: `$PDEFM_DATA_DIR`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Writes `value` at dotted `path` inside `table`, creating tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key '{path}'");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = next.as_table_mut().ok_or_else(|| anyhow!("override '{path}': '{p}' is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as TOML and falls back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override '{s}' is not key=value"))?;
    let value = match format!("v = {v}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(v.to_string()),
    };
    Ok((k.trim().to_string(), value))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_model(mut t: Table) -> Result<ModelConfig> {
    let preset = match t.remove("preset") {
        Some(Value::String(s)) => s,
        Some(v) => bail!("model.preset must be a string, got {v}"),
        None => "nano".to_string(),
    };
    let base = ModelConfig::preset(&preset)?;
    let mut table = Table::try_from(&base).context("serializing model preset")?;
    merge(&mut table, t);
    let cfg: ModelConfig = table.try_into().context("in [model]")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Generator settings from a table holding `pde` plus overrides of its
/// desk defaults.
pub fn resolve_gen(mut t: Table, seed: Option<u64>) -> Result<GenSpec> {
    let pde: Pde = match t.get("pde") {
        Some(Value::String(s)) => s.parse()?,
        _ => bail!("generate table needs a 'pde' string"),
    };
    let mut base = GenSpec::desk(pde);
    if let Some(s) = seed {
        base.seed = s;
    }
    let mut table = Table::try_from(&base).context("serializing generator defaults")?;
    t.remove("pde");
    merge(&mut table, t);
    let spec: GenSpec = table.try_into().context("in generate table")?;
    spec.validate()?;
    Ok(spec)
}

impl RunConfig {
    /// Loads `path` (or an empty document), applies overrides and
    /// validates everything.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let train_table = table.get("train").and_then(Value::as_table);
        let explicit_lr = train_table.is_some_and(|t| t.contains_key("lr"));
        let explicit_wd = train_table.is_some_and(|t| t.contains_key("weight_decay"));
        let raw: RawConfig = table.try_into().context("invalid configuration")?;
        let mut train = raw.train;
        if let Some(s) = raw.seed {
            train.seed = s;
        }
        train.validate()?;
        let model = resolve_model(raw.model)?;
        let data_dir = raw.data_dir.unwrap_or_else(default_data_dir);
        let mut names = BTreeSet::new();
        let mut datasets = Vec::new();
        for d in raw.datasets {
            if !names.insert(d.name.clone()) {
                bail!("dataset '{}' listed twice", d.name);
            }
            let dir = data_dir.join(d.path.unwrap_or_else(|| PathBuf::from(&d.name)));
            let generate = d.generate.map(|t| resolve_gen(t, None)).transpose().with_context(|| format!("dataset '{}'", d.name))?;
            datasets.push(DatasetEntry { name: d.name, dir, generate });
        }
        if let Some(f) = &raw.finetune {
            pdefm::train::FinetuneLevel::new(f.level)?;
        }
        raw.eval.split.parse::<pdefm::datapipe::Split>()?;
        if raw.eval.rollout_steps == 0 || raw.eval.batch_size == 0 {
            bail!("eval.rollout_steps and eval.batch_size must be positive");
        }
        Ok(Self {
            seed: train.seed,
            out: raw.out,
            data_dir,
            model,
            train,
            datasets,
            finetune: raw.finetune,
            eval: raw.eval,
            explicit_lr,
            explicit_wd,
        })
    }

    /// The resolved configuration as TOML text.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml() {
        assert_eq!(parse_override("train.lr=0.5").unwrap(), ("train.lr".into(), Value::Float(0.5)));
        assert_eq!(parse_override("model.preset=ti").unwrap().1, Value::String("ti".into()));
        assert_eq!(parse_override("model.preset=\"ti\"").unwrap().1, Value::String("ti".into()));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn presets_merge_with_overrides() {
        let cfg = RunConfig::load(None, &["model.preset=ti".into(), "model.patch=4".into(), "seed=7".into()]).unwrap();
        assert_eq!(cfg.model, ModelConfig { patch: 4, ..ModelConfig::ti() });
        assert_eq!((cfg.seed, cfg.train.seed), (7, 7));
        assert!(!cfg.explicit_lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for o in ["bogus=1", "model.bogus=1", "train.bogus=1", "eval.bogus=1"] {
            assert!(RunConfig::load(None, &[o.into()]).is_err(), "{o}");
        }
        assert!(RunConfig::load(None, &["model.heads=3".into()]).is_err());
    }

    #[test]
    fn generate_tables_merge_over_desk_defaults() {
        let t: Table = "[[datasets]]\nname = \"b\"\ngenerate = { pde = \"burgers1d\", n = 5 }\n".parse().unwrap();
        let cfg = RunConfig::from_table(t).unwrap();
        let g = cfg.datasets[0].generate.as_ref().unwrap();
        assert_eq!(g, &GenSpec { n: 5, ..GenSpec::desk(Pde::Burgers1d) });
        let t: Table = "[[datasets]]\nname = \"b\"\ngenerate = { pde = \"burgers1d\", wat = 5 }\n".parse().unwrap();
        assert!(RunConfig::from_table(t).is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = RunConfig::load(None, &["train.epochs=3".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        let again: Table = text.parse().unwrap();
        assert_eq!(again["train"]["epochs"].as_integer(), Some(3));
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                RunConfig::load(Some(&path), &[]).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 3);
    }
}
