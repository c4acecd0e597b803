//! Versioned, checksummed training checkpoints in the container format.

use std::collections::BTreeMap;
use std::path::Path;

use super::collapse::CollapseDetector;
use super::optim::Moments;
use super::stages::Phase;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scene::container::{Container, Encoding};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON snapshot of the training configuration.
    pub config: String,
    pub phase: Phase,
    pub phase_step: usize,
    pub global_step: usize,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub optim_step: u64,
    pub moments: BTreeMap<String, Moments>,
    pub detector: CollapseDetector,
    pub log: Vec<String>,
}

fn push(c: &mut Container, name: &str, t: &Tensor) {
    c.push_f64(name, t.rows(), t.cols(), t.data().to_vec(), Encoding::Binary);
}

fn tensor(c: &Container, name: &str) -> Result<Tensor> {
    let (r, k, d) = c.f64s(name)?;
    Tensor::matrix(r, k, d.to_vec())
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_meta("config", &self.config);
        c.set_meta("phase", self.phase.name());
        c.set_meta("phase_step", self.phase_step);
        c.set_meta("global_step", self.global_step);
        c.set_meta("seed", self.seed);
        c.set_meta("optim_step", self.optim_step);
        c.set_meta("params", self.params.len());
        c.set_meta("moments", self.moments.len());
        c.set_meta(
            "collapse",
            serde_json::to_string(&self.detector).map_err(|e| Error::config(e.to_string()))?,
        );
        c.set_meta("log_lines", self.log.len());
        for (i, line) in self.log.iter().enumerate() {
            c.set_meta(format!("log.{i}"), line);
        }
        for (name, t) in &self.params {
            push(&mut c, &format!("param.{name}"), t);
        }
        for (name, m) in &self.moments {
            push(&mut c, &format!("adam_m.{name}"), &m.m);
            push(&mut c, &format!("adam_v.{name}"), &m.v);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Parse {
                location: "header".into(),
                message: format!("expected a {CHECKPOINT_KIND} container, found `{}`", c.kind),
            });
        }
        let phase = Phase::parse(c.require_meta("phase")?)?;
        let detector = serde_json::from_str(c.require_meta("collapse")?).map_err(|e| Error::Parse {
            location: "meta collapse".into(),
            message: e.to_string(),
        })?;
        let log_lines: usize = c.parse_meta("log_lines")?;
        let log = (0..log_lines)
            .map(|i| c.require_meta(&format!("log.{i}")).map(str::to_string))
            .collect::<Result<_>>()?;
        let mut params = Vec::new();
        let mut moments = BTreeMap::new();
        for s in &c.sections {
            if let Some(name) = s.name.strip_prefix("param.") {
                params.push((name.to_string(), tensor(c, &s.name)?));
            } else if let Some(name) = s.name.strip_prefix("adam_m.") {
                moments.insert(
                    name.to_string(),
                    Moments {
                        m: tensor(c, &s.name)?,
                        v: tensor(c, &format!("adam_v.{name}"))?,
                    },
                );
            } else if !s.name.starts_with("adam_v.") {
                return Err(Error::Parse {
                    location: format!("section {}", s.name),
                    message: "unknown checkpoint section".into(),
                });
            }
        }
        let expect: usize = c.parse_meta("params")?;
        let expect_m: usize = c.parse_meta("moments")?;
        if params.len() != expect || moments.len() != expect_m {
            return Err(Error::Parse {
                location: "sections".into(),
                message: format!(
                    "{} parameters and {} moments, header says {expect} and {expect_m}",
                    params.len(),
                    moments.len()
                ),
            });
        }
        Ok(Checkpoint {
            config: c.require_meta("config")?.to_string(),
            phase,
            phase_step: c.parse_meta("phase_step")?,
            global_step: c.parse_meta("global_step")?,
            seed: c.parse_meta("seed")?,
            params,
            optim_step: c.parse_meta("optim_step")?,
            moments,
            detector,
            log,
        })
    }
}

/// Atomic write: temporary file, then rename.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.to_container()?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::read(path)?)
}
