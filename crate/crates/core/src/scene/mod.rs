//! Point clouds, voxel grids, superpoint partitions and scene samples.

pub mod container;
mod generate;
mod io;
mod voxel;

pub use generate::{generate_scene, GeneratorConfig, NUM_PLANES};
pub use io::{read_scene, scene_from_container, scene_to_container, write_scene};
pub use voxel::{
    pool_superpoints, pool_superpoints_tensor, voxel_majority_labels, voxel_partition, voxelize, VoxelGrid,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default voxel edge length in meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.02;

/// `N` colored points: `(x, y, z)` in meters and `(r, g, b)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 6]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 6]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invariant("point cloud needs at least one point"));
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant(format!("point {i} is not finite")));
            }
            if p[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invariant(format!("point {i} color outside [0, 1]")));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 6]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Assignment of elements (points or voxels) to `count` superpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointPartition {
    labels: Vec<usize>,
    count: usize,
    centroids: Vec<[f64; 3]>,
}

impl SuperpointPartition {
    /// Builds a partition over elements with the given coordinates; every label in
    /// `[0, count)` must be used.
    pub fn new(labels: Vec<usize>, coords: &[[f64; 3]]) -> Result<Self> {
        if labels.len() != coords.len() {
            return Err(Error::shape(format!(
                "{} labels for {} elements",
                labels.len(),
                coords.len()
            )));
        }
        let count = labels.iter().max().map_or(0, |&m| m + 1);
        if count == 0 {
            return Err(Error::invariant("partition with zero superpoints"));
        }
        let mut sums = vec![[0.0; 3]; count];
        let mut n = vec![0usize; count];
        for (&l, c) in labels.iter().zip(coords) {
            n[l] += 1;
            for a in 0..3 {
                sums[l][a] += c[a];
            }
        }
        if let Some(k) = n.iter().position(|&x| x == 0) {
            return Err(Error::invariant(format!("superpoint {k} has no members")));
        }
        let centroids = sums
            .iter()
            .zip(&n)
            .map(|(s, &k)| [s[0] / k as f64, s[1] / k as f64, s[2] / k as f64])
            .collect();
        Ok(SuperpointPartition {
            labels,
            count,
            centroids,
        })
    }

    pub fn from_cloud(labels: Vec<usize>, cloud: &PointCloud) -> Result<Self> {
        let coords: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p[0], p[1], p[2]]).collect();
        SuperpointPartition::new(labels, &coords)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn centroids(&self) -> &[[f64; 3]] {
        &self.centroids
    }

    /// Number of elements in each superpoint.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

/// Visual prompt given by the user.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptSpec {
    Click([f64; 3]),
    Box { min: [f64; 3], max: [f64; 3] },
    /// Binary mask over superpoints.
    Mask(Vec<bool>),
}

impl PromptSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PromptSpec::Click(_) => "click",
            PromptSpec::Box { .. } => "box",
            PromptSpec::Mask(_) => "mask",
        }
    }

    pub fn validate(&self, superpoints: usize) -> Result<()> {
        match self {
            PromptSpec::Click(p) if p.iter().any(|v| !v.is_finite()) => {
                Err(Error::invariant("click is not finite"))
            }
            PromptSpec::Box { min, max } if (0..3).any(|a| min[a] > max[a]) => {
                Err(Error::invariant("box min exceeds max"))
            }
            PromptSpec::Mask(m) if m.len() != superpoints => Err(Error::invariant(format!(
                "mask prompt over {} superpoints, scene has {superpoints}",
                m.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// One synthetic scene with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    /// Point-level partition.
    pub partition: SuperpointPartition,
    /// Semantic class of each superpoint, in `[0, num_classes)`.
    pub sp_class: Vec<usize>,
    pub num_classes: usize,
    /// Binary superpoint masks, one per instance.
    pub gt_instances: Vec<Vec<bool>>,
    pub prompt: Option<PromptSpec>,
    /// `L x C` per-superpoint teacher features for feature alignment.
    pub teacher: Option<Tensor>,
}

impl SceneSample {
    pub fn num_superpoints(&self) -> usize {
        self.partition.count()
    }

    /// Class of an instance (that of its first member superpoint).
    pub fn instance_class(&self, instance: usize) -> usize {
        let k = self.gt_instances[instance]
            .iter()
            .position(|&b| b)
            .expect("validated instances are nonempty");
        self.sp_class[k]
    }

    /// Superpoints the prompt selects: the one nearest a click, centroids inside
    /// a box, or the mask itself.
    pub fn prompt_selection(&self) -> Option<Vec<bool>> {
        let l = self.num_superpoints();
        let c = self.partition.centroids();
        Some(match self.prompt.as_ref()? {
            PromptSpec::Click(p) => {
                let d = |k: usize| (0..3).map(|a| (c[k][a] - p[a]).powi(2)).sum::<f64>();
                let best = (0..l).min_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)))?;
                (0..l).map(|k| k == best).collect()
            }
            PromptSpec::Box { min, max } => (0..l)
                .map(|k| (0..3).all(|a| c[k][a] >= min[a] && c[k][a] <= max[a]))
                .collect(),
            PromptSpec::Mask(m) => m.clone(),
        })
    }

    /// Index of the instance the prompt refers to: the one with the largest
    /// fraction of its superpoints selected, ties to the lower index.
    pub fn prompt_target(&self) -> Option<usize> {
        let sel = self.prompt_selection()?;
        let mut best: Option<(usize, usize, usize)> = None;
        for (i, m) in self.gt_instances.iter().enumerate() {
            let hit = m.iter().zip(&sel).filter(|(a, b)| **a && **b).count();
            let size = m.iter().filter(|&&b| b).count();
            if hit == 0 {
                continue;
            }
            if best.is_none_or(|(_, bh, bs)| hit * bs > bh * size) {
                best = Some((i, hit, size));
            }
        }
        best.map(|(i, _, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.partition.count();
        if self.partition.labels().len() != self.cloud.len() {
            return Err(Error::invariant(format!(
                "partition covers {} points, cloud has {}",
                self.partition.labels().len(),
                self.cloud.len()
            )));
        }
        if self.sp_class.len() != l {
            return Err(Error::invariant(format!(
                "{} superpoint classes for {l} superpoints",
                self.sp_class.len()
            )));
        }
        if let Some(&c) = self.sp_class.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::invariant(format!("class {c} >= {}", self.num_classes)));
        }
        for (i, m) in self.gt_instances.iter().enumerate() {
            if m.len() != l {
                return Err(Error::invariant(format!("instance {i} mask has length {}", m.len())));
            }
            let mut classes = m.iter().zip(&self.sp_class).filter(|(b, _)| **b).map(|(_, &c)| c);
            let first = classes
                .next()
                .ok_or_else(|| Error::invariant(format!("instance {i} is empty")))?;
            if classes.any(|c| c != first) {
                return Err(Error::invariant(format!("instance {i} mixes classes")));
            }
        }
        if let Some(p) = &self.prompt {
            p.validate(l)?;
        }
        if let Some(t) = &self.teacher {
            if t.rows() != l {
                return Err(Error::invariant(format!(
                    "teacher features have {} rows for {l} superpoints",
                    t.rows()
                )));
            }
            if !t.is_finite() {
                return Err(Error::invariant("teacher features are not finite"));
            }
        }
        Ok(())
    }
}
