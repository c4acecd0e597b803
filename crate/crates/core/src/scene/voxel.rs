use std::collections::HashMap;

use super::{PointCloud, SuperpointPartition};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Occupied cells of a regular grid with per-cell mean point tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Mean `(x, y, z, r, g, b)` of member points, in first-occupied order.
    pub voxels: Vec<[f64; 6]>,
    pub point_to_voxel: Vec<usize>,
    /// Integer cell index of each voxel.
    pub cells: Vec<[i64; 3]>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// `M x 6` feature matrix of the voxel tuples.
    pub fn features(&self) -> Tensor {
        let data = self.voxels.iter().flat_map(|v| v.iter().copied()).collect();
        Tensor::matrix(self.voxels.len(), 6, data).expect("6 values per voxel")
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.voxels.iter().map(|v| [v[0], v[1], v[2]]).collect()
    }
}

fn cell_of(p: &[f64; 6], size: f64) -> [i64; 3] {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::config(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut cells = Vec::new();
    let mut sums: Vec<[f64; 6]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut point_to_voxel = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let c = cell_of(p, voxel_size);
        let v = *index.entry(c).or_insert_with(|| {
            cells.push(c);
            sums.push([0.0; 6]);
            counts.push(0);
            cells.len() - 1
        });
        for (s, x) in sums[v].iter_mut().zip(p) {
            *s += x;
        }
        counts[v] += 1;
        point_to_voxel.push(v);
    }
    let voxels = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.map(|x| x / n as f64))
        .collect();
    Ok(VoxelGrid {
        voxel_size,
        voxels,
        point_to_voxel,
        cells,
    })
}

/// Majority point label within each voxel, ties to the lowest label.
pub fn voxel_majority_labels(grid: &VoxelGrid, point_labels: &[usize]) -> Result<Vec<usize>> {
    if point_labels.len() != grid.point_to_voxel.len() {
        return Err(Error::shape(format!(
            "{} point labels for {} points",
            point_labels.len(),
            grid.point_to_voxel.len()
        )));
    }
    let mut pairs: Vec<(usize, usize)> = grid
        .point_to_voxel
        .iter()
        .copied()
        .zip(point_labels.iter().copied())
        .collect();
    pairs.sort_unstable();
    let mut out = vec![0usize; grid.len()];
    let mut best = vec![0usize; grid.len()];
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j] == pairs[i] {
            j += 1;
        }
        let (v, l) = pairs[i];
        if j - i > best[v] {
            best[v] = j - i;
            out[v] = l;
        }
        i = j;
    }
    Ok(out)
}

/// Voxel-level partition induced by a point-level one through majority voting.
pub fn voxel_partition(grid: &VoxelGrid, points: &SuperpointPartition) -> Result<SuperpointPartition> {
    let labels = voxel_majority_labels(grid, points.labels())?;
    let part = SuperpointPartition::new(labels, &grid.coords())?;
    if part.count() != points.count() {
        return Err(Error::invariant(format!(
            "superpoint {} owns no voxel",
            part.count()
        )));
    }
    Ok(part)
}

/// Differentiable mean of feature rows per superpoint.
pub fn pool_superpoints(tape: &mut Tape, feats: Var, partition: &SuperpointPartition) -> Result<Var> {
    tape.segment_mean(feats, partition.labels(), partition.count())
}

pub fn pool_superpoints_tensor(feats: &Tensor, partition: &SuperpointPartition) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(feats.clone());
    let y = pool_superpoints(&mut tape, x, partition)?;
    Ok(tape.value(y).clone())
}
