use std::path::Path;

use super::container::{Container, Encoding};
use super::{PointCloud, PromptSpec, SceneSample, SuperpointPartition};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SCENE_KIND: &str = "scene";

fn to_index(v: i64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::invariant(format!("negative {what} {v}")))
}

fn expect_dims(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::invariant(format!(
            "section {name} is {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}

pub fn scene_to_container(s: &SceneSample) -> Container {
    let mut c = Container::new(SCENE_KIND);
    let l = s.num_superpoints();
    c.set_meta("points", s.cloud.len());
    c.set_meta("superpoints", l);
    c.set_meta("classes", s.num_classes);
    c.push_f64(
        "points",
        s.cloud.len(),
        6,
        s.cloud.points().iter().flatten().copied().collect(),
        Encoding::Text,
    );
    c.push_i64(
        "labels",
        s.cloud.len(),
        1,
        s.partition.labels().iter().map(|&v| v as i64).collect(),
    );
    c.push_i64("sp_class", l, 1, s.sp_class.iter().map(|&v| v as i64).collect());
    c.push_i64(
        "instances",
        s.gt_instances.len(),
        l,
        s.gt_instances.iter().flatten().map(|&b| b as i64).collect(),
    );
    if let Some(t) = &s.teacher {
        c.push_f64("teacher", t.rows(), t.cols(), t.data().to_vec(), Encoding::Text);
    }
    match &s.prompt {
        Some(p @ (PromptSpec::Click(_) | PromptSpec::Box { .. })) => {
            c.set_meta("prompt", p.kind());
            let v = match p {
                PromptSpec::Click(x) => x.to_vec(),
                PromptSpec::Box { min, max } => min.iter().chain(max).copied().collect(),
                PromptSpec::Mask(_) => unreachable!(),
            };
            c.push_f64("prompt", 1, v.len(), v, Encoding::Text);
        }
        Some(PromptSpec::Mask(m)) => {
            c.set_meta("prompt", "mask");
            c.push_i64("prompt", 1, m.len(), m.iter().map(|&b| b as i64).collect());
        }
        None => c.set_meta("prompt", "none"),
    }
    c
}

pub fn scene_from_container(c: &Container) -> Result<SceneSample> {
    if c.kind != SCENE_KIND {
        return Err(Error::Parse {
            location: "kind".into(),
            message: format!("expected a scene, found `{}`", c.kind),
        });
    }
    let n: usize = c.parse_meta("points")?;
    let l: usize = c.parse_meta("superpoints")?;
    let num_classes: usize = c.parse_meta("classes")?;
    if l == 0 {
        return Err(Error::invariant("scene has zero superpoints"));
    }

    let (r, k, pts) = c.f64s("points")?;
    expect_dims("points", (r, k), (n, 6))?;
    let cloud = PointCloud::new(pts.chunks_exact(6).map(|p| p.try_into().unwrap()).collect())?;

    let (r, k, labels) = c.i64s("labels")?;
    expect_dims("labels", (r, k), (n, 1))?;
    let labels = labels
        .iter()
        .map(|&v| to_index(v, "label"))
        .collect::<Result<Vec<_>>>()?;
    let partition = SuperpointPartition::from_cloud(labels, &cloud)?;
    if partition.count() != l {
        return Err(Error::invariant(format!(
            "labels use {} superpoints, header says {l}",
            partition.count()
        )));
    }

    let (r, k, cls) = c.i64s("sp_class")?;
    expect_dims("sp_class", (r, k), (l, 1))?;
    let sp_class = cls
        .iter()
        .map(|&v| to_index(v, "class"))
        .collect::<Result<Vec<_>>>()?;

    let (r, k, inst) = c.i64s("instances")?;
    if r > 0 {
        expect_dims("instances", (r, k), (r, l))?;
    }
    let gt_instances = inst
        .chunks_exact(l)
        .map(|row| row.iter().map(|&v| v != 0).collect())
        .collect();

    let teacher = match c.section("teacher") {
        Some(_) => {
            let (r, k, t) = c.f64s("teacher")?;
            Some(Tensor::matrix(r, k, t.to_vec())?)
        }
        None => None,
    };

    let prompt = match c.require_meta("prompt")? {
        "none" => None,
        "click" => {
            let (_, k, v) = c.f64s("prompt")?;
            expect_dims("prompt", (1, k), (1, 3))?;
            Some(PromptSpec::Click([v[0], v[1], v[2]]))
        }
        "box" => {
            let (_, k, v) = c.f64s("prompt")?;
            expect_dims("prompt", (1, k), (1, 6))?;
            Some(PromptSpec::Box {
                min: [v[0], v[1], v[2]],
                max: [v[3], v[4], v[5]],
            })
        }
        "mask" => {
            let (_, _, v) = c.i64s("prompt")?;
            Some(PromptSpec::Mask(v.iter().map(|&b| b != 0).collect()))
        }
        other => {
            return Err(Error::Parse {
                location: "meta prompt".into(),
                message: format!("unknown prompt kind `{other}`"),
            })
        }
    };

    let s = SceneSample {
        cloud,
        partition,
        sp_class,
        num_classes,
        gt_instances,
        prompt,
        teacher,
    };
    s.validate()?;
    Ok(s)
}

pub fn write_scene(sample: &SceneSample, path: &Path) -> Result<()> {
    scene_to_container(sample).write(path)
}

pub fn read_scene(path: &Path) -> Result<SceneSample> {
    scene_from_container(&Container::read(path)?)
}
