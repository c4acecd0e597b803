use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::voxel::{voxel_majority_labels, voxelize};
use super::{PointCloud, PromptSpec, SceneSample, SuperpointPartition, DEFAULT_VOXEL_SIZE};
use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

/// Floor plus two walls.
pub const NUM_PLANES: usize = 3;
pub const FLOOR_CLASS: usize = 0;
pub const WALL_CLASS: usize = 1;

const STREAM_LAYOUT: u64 = 0x5CE0_0001;
const STREAM_POINTS: u64 = 0x5CE0_0002;
const STREAM_TEACHER: u64 = 0x5CE0_0003;
const STREAM_PROMPT: u64 = 0x5CE0_0004;
const PALETTE_SEED: u64 = 0xC010_12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub points: usize,
    pub objects: usize,
    /// Semantic classes including floor (0) and wall (1).
    pub classes: usize,
    /// Positional noise standard deviation in meters.
    pub noise: f64,
    pub color_noise: f64,
    pub room_size: f64,
    pub wall_height: f64,
    /// Edge of the grid that splits primitives into several superpoints.
    pub split_grid: Option<f64>,
    /// Pieces with fewer points are merged into their primitive's largest piece.
    pub min_piece_points: usize,
    pub voxel_size: f64,
    pub teacher_dim: Option<usize>,
    pub teacher_noise: f64,
    pub prompt: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            points: 4000,
            objects: 4,
            classes: 8,
            noise: 0.005,
            color_noise: 0.03,
            room_size: 3.0,
            wall_height: 1.5,
            split_grid: Some(1.5),
            min_piece_points: 24,
            voxel_size: DEFAULT_VOXEL_SIZE,
            teacher_dim: None,
            teacher_noise: 0.1,
            prompt: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.classes < 2 || (self.objects > 0 && self.classes < 3) {
            return Err(Error::config(format!(
                "{} classes cannot hold floor, wall and object classes",
                self.classes
            )));
        }
        if !(self.noise >= 0.0 && self.color_noise >= 0.0 && self.teacher_noise >= 0.0) {
            return Err(Error::config("noise levels must be nonnegative"));
        }
        if !positive(self.room_size) || !positive(self.wall_height) || !positive(self.voxel_size) {
            return Err(Error::config("room size, wall height and voxel size must be positive"));
        }
        if let Some(g) = self.split_grid {
            if !positive(g) {
                return Err(Error::config(format!("split grid must be positive, got {g}")));
            }
        }
        if self.objects > 64 {
            return Err(Error::config(format!("at most 64 objects, got {}", self.objects)));
        }
        let primitives = NUM_PLANES + self.objects;
        let floor = self.min_piece_points.max(1);
        if self.points < primitives * floor {
            return Err(Error::config(format!(
                "{} points cannot cover {primitives} primitives with {floor} points each",
                self.points
            )));
        }
        if let Some(c) = self.teacher_dim {
            if c < self.classes {
                return Err(Error::config(format!(
                    "teacher dim {c} is smaller than the class count {}",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Cuboid {
    min: [f64; 3],
    max: [f64; 3],
    class: usize,
}

impl Cuboid {
    fn size(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Top face plus four side faces; the bottom rests on the floor.
    fn area(&self) -> f64 {
        let [sx, sy, sz] = self.size();
        sx * sy + 2.0 * (sx + sy) * sz
    }

    fn sample(&self, r: &mut ChaCha8Rng) -> [f64; 3] {
        let [sx, sy, sz] = self.size();
        let faces = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
        let mut u = r.gen::<f64>() * faces.iter().sum::<f64>();
        let mut face = faces.len() - 1;
        for (i, a) in faces.iter().enumerate() {
            if u < *a {
                face = i;
                break;
            }
            u -= a;
        }
        let (a, b) = (r.gen::<f64>(), r.gen::<f64>());
        let [x0, y0, z0] = self.min;
        let [x1, y1, z1] = self.max;
        match face {
            0 => [x0 + a * sx, y0 + b * sy, z1],
            1 => [x0 + a * sx, y0, z0 + b * sz],
            2 => [x0 + a * sx, y1, z0 + b * sz],
            3 => [x0, y0 + a * sy, z0 + b * sz],
            _ => [x1, y0 + a * sy, z0 + b * sz],
        }
    }

    fn covers_xy(&self, p: &[f64; 3]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

fn class_color(class: usize) -> [f64; 3] {
    let mut r = rng::stream(PALETTE_SEED, class as u64, 0);
    [r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)]
}

fn place_objects(cfg: &GeneratorConfig, r: &mut ChaCha8Rng) -> Vec<Cuboid> {
    let k = (cfg.objects as f64).sqrt().ceil().max(1.0) as usize;
    let margin = 0.15 * cfg.room_size;
    let slot = (cfg.room_size - 1.5 * margin) / k as f64;
    let mut slots: Vec<usize> = (0..k * k).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, r.gen_range(0..=i));
    }
    slots
        .iter()
        .take(cfg.objects)
        .map(|&s| {
            let (i, j) = (s / k, s % k);
            let max_side = 0.8 * slot;
            let sx = r.gen_range(0.4..=1.0) * max_side;
            let sy = r.gen_range(0.4..=1.0) * max_side;
            let sz = r.gen_range(0.15..=0.5) * cfg.wall_height;
            let x0 = margin + i as f64 * slot + r.gen::<f64>() * (slot - sx);
            let y0 = margin + j as f64 * slot + r.gen::<f64>() * (slot - sy);
            Cuboid {
                min: [x0, y0, 0.0],
                max: [x0 + sx, y0 + sy, sz],
                class: r.gen_range(2..cfg.classes),
            }
        })
        .collect()
}

/// Deterministic synthetic room: floor, two walls and non-overlapping cuboids.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut layout = rng::stream(seed, STREAM_LAYOUT, 0);
    let objects = place_objects(cfg, &mut layout);

    let room = cfg.room_size;
    let h = cfg.wall_height;
    let floor_area = room * room - objects.iter().map(|o| o.size()[0] * o.size()[1]).sum::<f64>();
    let mut areas = vec![floor_area, room * h, room * h];
    areas.extend(objects.iter().map(Cuboid::area));
    let classes: Vec<usize> = [FLOOR_CLASS, WALL_CLASS, WALL_CLASS]
        .into_iter()
        .chain(objects.iter().map(|o| o.class))
        .collect();

    let total_area: f64 = areas.iter().sum();
    let floor_pts = cfg.min_piece_points.max(1);
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| ((cfg.points as f64 * a / total_area) as usize).max(floor_pts))
        .collect();
    let others: usize = counts[1..].iter().sum();
    if others + floor_pts > cfg.points {
        return Err(Error::config(format!("{} points are too few for this layout", cfg.points)));
    }
    counts[0] = cfg.points - others;

    let mut pr = rng::stream(seed, STREAM_POINTS, 0);
    let pos_noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let col_noise = Normal::new(0.0, cfg.color_noise).expect("validated noise");
    let mut points = Vec::with_capacity(cfg.points);
    let mut base = Vec::with_capacity(cfg.points);
    let mut primitive = Vec::with_capacity(cfg.points);
    for (prim, &n) in counts.iter().enumerate() {
        let color = class_color(classes[prim]);
        for _ in 0..n {
            let p = match prim {
                0 => loop {
                    let p = [pr.gen::<f64>() * room, pr.gen::<f64>() * room, 0.0];
                    if !objects.iter().any(|o| o.covers_xy(&p)) {
                        break p;
                    }
                },
                1 => [0.0, pr.gen::<f64>() * room, pr.gen::<f64>() * h],
                2 => [pr.gen::<f64>() * room, 0.0, pr.gen::<f64>() * h],
                _ => objects[prim - NUM_PLANES].sample(&mut pr),
            };
            let mut q = [0.0; 6];
            for a in 0..3 {
                q[a] = p[a] + pos_noise.sample(&mut pr);
                q[3 + a] = (color[a] + col_noise.sample(&mut pr)).clamp(0.0, 1.0);
            }
            points.push(q);
            base.push(p);
            primitive.push(prim);
        }
    }
    let cloud = PointCloud::new(points)?;

    let labels = split_primitives(cfg, &cloud, &base, &primitive, counts.len())?;
    let partition = SuperpointPartition::from_cloud(labels, &cloud)?;
    let l = partition.count();
    let mut sp_prim = vec![0usize; l];
    for (&sp, &prim) in partition.labels().iter().zip(&primitive) {
        sp_prim[sp] = prim;
    }
    let sp_class: Vec<usize> = sp_prim.iter().map(|&p| classes[p]).collect();
    let gt_instances: Vec<Vec<bool>> = (0..counts.len())
        .map(|prim| sp_prim.iter().map(|&p| p == prim).collect())
        .collect();

    let teacher = cfg.teacher_dim.map(|c| {
        let mut tr = rng::stream(seed, STREAM_TEACHER, 0);
        let noise = Normal::new(0.0, cfg.teacher_noise).expect("validated noise");
        let mut t = Tensor::zeros(l, c);
        for (k, &cls) in sp_class.iter().enumerate() {
            for j in 0..c {
                let one_hot = if j == cls { 1.0 } else { 0.0 };
                t.set(k, j, one_hot + noise.sample(&mut tr));
            }
        }
        t
    });

    let prompt = if cfg.prompt {
        Some(make_prompt(seed, &cloud, &partition, &gt_instances, &primitive))
    } else {
        None
    };

    let sample = SceneSample {
        cloud,
        partition,
        sp_class,
        num_classes: cfg.classes,
        gt_instances,
        prompt,
        teacher,
    };
    sample.validate()?;
    Ok(sample)
}

/// Splits each primitive by grid cell, then merges pieces that are too small or
/// that own no voxel under majority voting into the primitive's largest piece.
fn split_primitives(
    cfg: &GeneratorConfig,
    cloud: &PointCloud,
    base: &[[f64; 3]],
    primitive: &[usize],
    n_prims: usize,
) -> Result<Vec<usize>> {
    let mut pieces: BTreeMap<(usize, [i64; 3]), Vec<usize>> = BTreeMap::new();
    for (i, (p, &prim)) in base.iter().zip(primitive).enumerate() {
        let key = match cfg.split_grid {
            Some(g) => [
                (p[0] / g).floor() as i64,
                (p[1] / g).floor() as i64,
                (p[2] / g).floor() as i64,
            ],
            None => [0; 3],
        };
        pieces.entry((prim, key)).or_default().push(i);
    }
    let mut groups: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n_prims];
    for ((prim, _), members) in pieces {
        groups[prim].push(members);
    }
    for g in groups.iter_mut() {
        merge_into_largest(g, |_, m| m.len() < cfg.min_piece_points);
    }

    let grid = voxelize(cloud, cfg.voxel_size)?;
    loop {
        let labels = flatten(&groups, cloud.len());
        let owners = voxel_majority_labels(&grid, &labels)?;
        let mut owned = vec![false; labels.iter().max().map_or(0, |m| m + 1)];
        for &o in &owners {
            owned[o] = true;
        }
        let mut next = 0;
        let mut changed = false;
        for (prim, g) in groups.iter_mut().enumerate() {
            let flags: Vec<bool> = (0..g.len()).map(|k| !owned[next + k]).collect();
            next += g.len();
            if flags.iter().all(|&f| f) {
                return Err(Error::invariant(format!("primitive {prim} owns no voxel")));
            }
            changed |= merge_into_largest(g, |k, _| flags[k]);
        }
        if !changed {
            return Ok(labels);
        }
    }
}

fn merge_into_largest(pieces: &mut Vec<Vec<usize>>, mut drop: impl FnMut(usize, &Vec<usize>) -> bool) -> bool {
    if pieces.len() < 2 {
        return false;
    }
    let mut flags: Vec<bool> = pieces.iter().enumerate().map(|(k, p)| drop(k, p)).collect();
    let by_size = |k: &usize| (pieces[*k].len(), std::cmp::Reverse(*k));
    let target = (0..pieces.len())
        .filter(|&k| !flags[k])
        .max_by_key(by_size)
        .or_else(|| (0..pieces.len()).max_by_key(by_size))
        .unwrap();
    flags[target] = false;
    if !flags.iter().any(|&f| f) {
        return false;
    }
    let mut absorbed = Vec::new();
    for (p, &f) in pieces.iter_mut().zip(&flags) {
        if f {
            absorbed.append(p);
        }
    }
    pieces[target].append(&mut absorbed);
    pieces[target].sort_unstable();
    pieces.retain(|p| !p.is_empty());
    true
}

fn flatten(groups: &[Vec<Vec<usize>>], n: usize) -> Vec<usize> {
    let mut labels = vec![0usize; n];
    let mut next = 0;
    for g in groups {
        for piece in g {
            for &i in piece {
                labels[i] = next;
            }
            next += 1;
        }
    }
    labels
}

fn make_prompt(
    seed: u64,
    cloud: &PointCloud,
    partition: &SuperpointPartition,
    instances: &[Vec<bool>],
    primitive: &[usize],
) -> PromptSpec {
    let mut r = rng::stream(seed, STREAM_PROMPT, 0);
    let target = if instances.len() > NUM_PLANES {
        r.gen_range(NUM_PLANES..instances.len())
    } else {
        0
    };
    let mask = instances[target].clone();
    match r.gen_range(0..3) {
        0 => {
            let members: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
            let k = members[r.gen_range(0..members.len())];
            PromptSpec::Click(partition.centroids()[k])
        }
        1 => {
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            for (p, &prim) in cloud.points().iter().zip(primitive) {
                if prim == target {
                    for a in 0..3 {
                        min[a] = min[a].min(p[a] - 0.02);
                        max[a] = max[a].max(p[a] + 0.02);
                    }
                }
            }
            PromptSpec::Box { min, max }
        }
        _ => PromptSpec::Mask(mask),
    }
}
