//! Optimization, the three training stages, checkpoints and gradient checks.

pub mod checkpoint;
pub mod collapse;
pub mod gradcheck;
pub mod optim;
mod stages;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_KIND};
pub use collapse::{CollapseConfig, CollapseDetector, CollapseWarning};
pub use optim::{AdamW, Moments, OptimConfig, ScheduleKind};
pub use stages::{inst_objective, InstTerms, Phase, Stage3Report, Trainer};

use serde::{Deserialize, Serialize};

use crate::encoder::SceneInputs;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SegTargets};
use crate::model::MestConfig;
use crate::numerics::Tensor;
use crate::scene::{PromptSpec, SceneSample, SuperpointPartition, DEFAULT_VOXEL_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Optimizer updates in the stage.
    pub steps: usize,
    pub optim: OptimConfig,
}

impl StageConfig {
    fn with(steps: usize, lr: f64, weight_decay: f64, schedule: ScheduleKind) -> Self {
        StageConfig {
            steps,
            optim: OptimConfig {
                lr,
                weight_decay,
                schedule,
                ..OptimConfig::default()
            },
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::with(100, 1e-3, 0.0, ScheduleKind::Cosine)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: MestConfig,
    pub loss: LossWeights,
    pub voxel_size: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub collapse: CollapseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: MestConfig::default(),
            loss: LossWeights::default(),
            voxel_size: DEFAULT_VOXEL_SIZE,
            stage1: StageConfig::with(200, 1e-3, 0.0, ScheduleKind::Cosine),
            stage2: StageConfig::with(500, 1e-4, 0.05, ScheduleKind::Poly),
            stage3: StageConfig::with(300, 1e-3, 0.0, ScheduleKind::Cosine),
            collapse: CollapseConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Sets the router regularizer weights in the loss and the MoE config alike.
    pub fn set_router_weights(&mut self, z: f64, blc: f64) {
        self.loss.z = z;
        self.loss.blc = blc;
        self.model.moe.lambda_z = z;
        self.model.moe.lambda_blc = blc;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let moe = &self.model.moe;
        if self.loss.z != moe.lambda_z || self.loss.blc != moe.lambda_blc {
            return Err(Error::config(format!(
                "loss weights z={} blc={} disagree with model.moe lambda_z={} lambda_blc={}",
                self.loss.z, self.loss.blc, moe.lambda_z, moe.lambda_blc
            )));
        }
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.optim.validate()?;
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if !(0.0..=1.0).contains(&self.collapse.share) || self.collapse.patience == 0 {
            return Err(Error::config("collapse share must lie in [0, 1] and patience be >= 1"));
        }
        Ok(())
    }
}

/// A scene with everything training needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub inputs: SceneInputs,
    /// Point-level partition, whose centroids place click prompts.
    pub partition: SuperpointPartition,
    pub sizes: Vec<usize>,
    pub targets: SegTargets,
    pub teacher: Option<Tensor>,
    pub prompt: Option<PromptSpec>,
    /// Ground-truth mask of the instance the prompt refers to.
    pub referring: Option<Vec<bool>>,
}

impl PreparedScene {
    pub fn new(sample: &SceneSample, voxel_size: f64) -> Result<Self> {
        sample.validate()?;
        let instance_class = (0..sample.gt_instances.len()).map(|i| sample.instance_class(i)).collect();
        Ok(PreparedScene {
            inputs: SceneInputs::new(&sample.cloud, voxel_size, &sample.partition)?,
            partition: sample.partition.clone(),
            sizes: sample.partition.sizes(),
            targets: SegTargets {
                instances: sample.gt_instances.clone(),
                instance_class,
                sp_class: sample.sp_class.clone(),
            },
            teacher: sample.teacher.clone(),
            prompt: sample.prompt.clone(),
            referring: sample.prompt_target().map(|t| sample.gt_instances[t].clone()),
        })
    }

    pub fn num_superpoints(&self) -> usize {
        self.sizes.len()
    }
}
