use std::path::Path;

use mest_core::scene::GeneratorConfig;
use mest_core::train::TrainConfig;
use mest_core::{Error, Result};

pub const SEED_ENV: &str = "MEST_SEED";

/// A TOML run configuration: the training configuration at the top level
/// plus a `[generator]` table. Keys given in the file override the defaults,
/// so `[stage2] steps = 10` keeps the other stage-2 defaults. Unknown keys are
/// errors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seed written in the file, if any.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn overlay(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn merged<T: serde::Serialize + serde::de::DeserializeOwned>(default: &T, over: toml::Table, path: &Path) -> Result<T> {
    let mut base = toml::Value::try_from(default).map_err(|e| config_err(path, e))?;
    overlay(&mut base, toml::Value::Table(over));
    base.try_into().map_err(|e: toml::de::Error| config_err(path, e.message()))
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(path, e.message()))?;
        let generator = match table.remove("generator") {
            Some(toml::Value::Table(g)) => merged(&GeneratorConfig::default(), g, path)?,
            Some(_) => return Err(config_err(path, "`generator` must be a table")),
            None => GeneratorConfig::default(),
        };
        let seed = match table.get("seed") {
            Some(toml::Value::Integer(s)) if *s >= 0 => Some(*s as u64),
            Some(v) => return Err(config_err(path, format!("seed must be a nonnegative integer, got {v}"))),
            None => None,
        };
        let router_in_loss = table
            .get("loss")
            .and_then(toml::Value::as_table)
            .is_some_and(|l| l.contains_key("z") || l.contains_key("blc"));
        if router_in_loss {
            return Err(config_err(
                path,
                "set the router weights as model.moe.lambda_z and model.moe.lambda_blc, not in [loss]",
            ));
        }
        let mut train: TrainConfig = merged(&TrainConfig::default(), table, path)?;
        let (z, blc) = (train.model.moe.lambda_z, train.model.moe.lambda_blc);
        train.set_router_weights(z, blc);
        Ok(RunConfig { seed, train, generator })
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        RunConfig::parse(&text, path)
    }

    /// Seed precedence: command-line flag, config file, environment, 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    /// The validated training configuration with the resolved seed.
    pub fn train_config(&self, flag: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.seed = self.resolve_seed(flag)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
