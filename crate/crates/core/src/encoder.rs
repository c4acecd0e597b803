//! Per-voxel MLP feature extractor and the prompt aggregator.
//!
//! The encoder stands in for a sparse convolutional U-Net: each voxel tuple
//! `(x, y, z, r, g, b)` goes through `Linear(6, H) -> GELU -> Linear(H, C)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{FlopKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene::{pool_superpoints, voxel_partition, voxelize, PointCloud, PromptSpec, SuperpointPartition};

pub const INPUT_DIM: usize = 6;
/// Added to click distances before inversion.
pub const THREE_NN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
    pub dim: usize,
}

impl EncoderParams {
    /// Registers `encoder.*` parameters with uniform fan-in initialization.
    pub fn new(store: &mut ParamStore, hidden: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let b1 = 1.0 / (INPUT_DIM as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        EncoderParams {
            w1: store.add_uniform("encoder.w1", INPUT_DIM, hidden, b1, rng),
            b1: store.add_full("encoder.b1", 1, hidden, 0.0),
            w2: store.add_uniform("encoder.w2", hidden, dim, b2, rng),
            b2: store.add_full("encoder.b2", 1, dim, 0.0),
            hidden,
            dim,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let id = |n: &str| store.id(n).ok_or_else(|| Error::Missing(format!("parameter {n}")));
        let w1 = id("encoder.w1")?;
        let w2 = id("encoder.w2")?;
        Ok(EncoderParams {
            w1,
            b1: id("encoder.b1")?,
            w2,
            b2: id("encoder.b2")?,
            hidden: store.value(w1).cols(),
            dim: store.value(w2).cols(),
        })
    }
}

/// `M x C` voxel features.
pub fn encode(tape: &mut Tape, store: &ParamStore, p: &EncoderParams, voxels: Var) -> Result<Var> {
    let (m, c) = tape.value(voxels).dims();
    if m == 0 {
        return Err(Error::invariant("encoder input has no voxels"));
    }
    if c != INPUT_DIM {
        return Err(Error::shape(format!("encoder expects {INPUT_DIM} input channels, got {c}")));
    }
    let prev = tape.set_flop_kind(FlopKind::Encoder);
    let out = (|| {
        let w1 = tape.param(store, p.w1);
        let b1 = tape.param(store, p.b1);
        let w2 = tape.param(store, p.w2);
        let b2 = tape.param(store, p.b2);
        let h = tape.linear(voxels, w1, Some(b1))?;
        let h = tape.gelu(h);
        tape.linear(h, w2, Some(b2))
    })();
    tape.set_flop_kind(prev);
    out
}

/// Voxel tuples of a scene and the voxel-level superpoint partition.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub voxels: Tensor,
    pub voxel_partition: SuperpointPartition,
}

impl SceneInputs {
    pub fn new(cloud: &PointCloud, voxel_size: f64, partition: &SuperpointPartition) -> Result<Self> {
        let grid = voxelize(cloud, voxel_size)?;
        Ok(SceneInputs {
            voxels: grid.features(),
            voxel_partition: voxel_partition(&grid, partition)?,
        })
    }
}

/// `F_sp`: encoded voxel features averaged per superpoint.
pub fn superpoint_features(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    inputs: &SceneInputs,
) -> Result<Var> {
    let v = tape.constant(inputs.voxels.clone());
    let f = encode(tape, store, p, v)?;
    pool_superpoints(tape, f, &inputs.voxel_partition)
}

/// Indices and normalized inverse-distance weights of the (up to) three
/// centroids nearest to `click`; ties go to the lower index.
pub fn three_nn_weights(centroids: &[[f64; 3]], click: [f64; 3], eps: f64) -> Vec<(usize, f64)> {
    let mut d: Vec<(f64, usize)> = centroids
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let s: f64 = (0..3).map(|a| (c[a] - click[a]).powi(2)).sum();
            (s.sqrt(), k)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(3);
    let inv: Vec<f64> = d.iter().map(|(dist, _)| 1.0 / (dist + eps)).collect();
    let total: f64 = inv.iter().sum();
    d.iter().zip(&inv).map(|(&(_, k), w)| (k, w / total)).collect()
}

/// `F_prt`: a single prompt token `[1 x C]` sampled from `F_sp`.
pub fn aggregate_prompt(
    tape: &mut Tape,
    prompt: &PromptSpec,
    partition: &SuperpointPartition,
    f_sp: Var,
) -> Result<Var> {
    let l = partition.count();
    if tape.value(f_sp).rows() != l {
        return Err(Error::shape(format!(
            "{} feature rows for {l} superpoints",
            tape.value(f_sp).rows()
        )));
    }
    prompt.validate(l)?;
    let prev = tape.set_flop_kind(FlopKind::Other);
    let out = (|| match prompt {
        PromptSpec::Click(p) => {
            let nn = three_nn_weights(partition.centroids(), *p, THREE_NN_EPS);
            let idx: Vec<usize> = nn.iter().map(|&(k, _)| k).collect();
            let w = Tensor::row(&nn.iter().map(|&(_, w)| w).collect::<Vec<_>>());
            let rows = tape.gather_rows(f_sp, &idx)?;
            let w = tape.constant(w);
            tape.matmul(w, rows)
        }
        PromptSpec::Box { min, max } => {
            let idx: Vec<usize> = partition
                .centroids()
                .iter()
                .enumerate()
                .filter(|(_, c)| (0..3).all(|a| c[a] >= min[a] && c[a] <= max[a]))
                .map(|(k, _)| k)
                .collect();
            if idx.is_empty() {
                return Err(Error::EmptyPrompt("box contains no superpoint centroid".into()));
            }
            let rows = tape.gather_rows(f_sp, &idx)?;
            Ok(tape.mean_rows(rows))
        }
        PromptSpec::Mask(m) => {
            let idx: Vec<usize> = (0..l).filter(|&k| m[k]).collect();
            if idx.is_empty() {
                return Err(Error::EmptyPrompt("mask selects no superpoint".into()));
            }
            let rows = tape.gather_rows(f_sp, &idx)?;
            Ok(tape.mean_rows(rows))
        }
    })();
    tape.set_flop_kind(prev);
    out
}
