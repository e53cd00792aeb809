//! `RunConfig`: one TOML file covering every subcommand, with dotted
//! `--section.field=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use rimatte::datagen::AugmentConfig;
use rimatte::pipeline::TileConfig;
use rimatte::rim::IterationConfig;
use rimatte::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; the datagen, init and training streams derive from it
    /// unless their section sets a seed explicitly.
    pub seed: u64,
    pub paths: Paths,
    pub iteration: IterationConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub tile: TileConfig,
}

/// Seed of the named sub-stream of `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Split `--section.field=value` overrides out of the raw arguments.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((key, value)) = body.split_once('=') {
                if key.contains('.') {
                    overrides.push((key.to_owned(), value.to_owned()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_owned()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_owned())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override {key}: {p} is not a section"),
        };
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

impl RunConfig {
    /// Parse a config document, apply overrides, derive unset seeds.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        let explicit = |section: &str| {
            table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key("seed"))
        };
        let (augment_seed, train_seed) = (explicit("augment"), explicit("train"));
        let mut cfg: RunConfig = Value::Table(table.clone())
            .try_into()
            .context("invalid configuration")?;
        if !augment_seed {
            cfg.augment.seed = substream(cfg.seed, "datagen");
        }
        if !train_seed {
            cfg.train.seed = substream(cfg.seed, "training");
        }
        let iteration_set = table.contains_key("iteration");
        let train_iteration_set = table
            .get("train")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("iteration"));
        if iteration_set && train_iteration_set && cfg.iteration != cfg.train.iteration {
            bail!("[iteration] and [train.iteration] disagree; set only one");
        }
        if iteration_set {
            cfg.train.iteration = cfg.iteration.clone();
        } else {
            cfg.iteration = cfg.train.iteration.clone();
        }
        cfg.iteration.validate()?;
        cfg.train.validate()?;
        cfg.augment.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn init_seed(&self) -> u64 {
        substream(self.seed, "init")
    }

    /// Seeds that match their derived value are left out, so they derive
    /// again on load (derived seeds may exceed the TOML integer range).
    pub fn to_toml(&self) -> String {
        let mut copy = self.clone();
        let mut derived = Vec::new();
        if copy.augment.seed == substream(self.seed, "datagen") {
            copy.augment.seed = 0;
            derived.push("augment");
        }
        if copy.train.seed == substream(self.seed, "training") {
            copy.train.seed = 0;
            derived.push("train");
        }
        let mut table = toml::Table::try_from(&copy).expect("serializable config");
        for section in derived {
            if let Some(Value::Table(t)) = table.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&table).expect("serializable config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.augment.seed, substream(0, "datagen"));
        let (rest, ov) = extract_overrides(
            ["rimatte", "train", "--train.lr=0.5", "--config=x.toml", "--iteration.iterations=3"]
                .map(String::from)
                .to_vec(),
        );
        assert_eq!(rest, ["rimatte", "train", "--config=x.toml"]);
        let cfg = RunConfig::from_toml("seed = 4\n[train]\nsteps = 7\n", &ov).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.iteration.iterations, 3);
        assert_eq!(cfg.iteration.iterations, 3);
        assert_eq!(cfg.train.seed, substream(4, "training"));
    }

    #[test]
    fn explicit_seed_wins() {
        let cfg = RunConfig::from_toml("[augment]\nseed = 9\n", &[]).unwrap();
        assert_eq!(cfg.augment.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &[("train.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml("[paths]\ndataset = \"d\"\n", &[]).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn string_override_falls_back_to_string() {
        let ov = [("paths.checkpoint".to_owned(), "runs/a.rimw".to_owned())];
        let cfg = RunConfig::from_toml("", &ov).unwrap();
        assert_eq!(cfg.paths.checkpoint.unwrap(), PathBuf::from("runs/a.rimw"));
    }
}
