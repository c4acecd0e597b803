use std::fs;
use std::path::Path;

use mest_core::metrics::{miou, threshold, MaskPair};
use mest_core::model::{mest_flops, mest_forward, MestConfig};
use mest_core::moe::{expert_stats, SecondExpertPolicy};
use mest_core::numerics::{FlopKind, Tape};
use mest_core::scene::{generate_scene, read_scene, scene_to_container, SceneSample};
use mest_core::train::{load_checkpoint, save_checkpoint, PreparedScene, TrainConfig, Trainer};
use mest_core::{Error, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{io, load_scenes, render_manifest, sha256_hex, write_atomic, ManifestEntry, MANIFEST, SCENE_EXT};
use crate::{AblationAxis, Command, EvalTask};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train.log";

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            scenes,
            seed,
            points,
            objects,
            classes,
            teacher_dim,
            no_prompt,
            config,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let mut g = rc.generator.clone();
            if let Some(p) = points {
                g.points = p;
            }
            if let Some(o) = objects {
                g.objects = o;
            }
            if let Some(c) = classes {
                g.classes = c;
            }
            g.teacher_dim = (teacher_dim > 0).then_some(teacher_dim);
            g.prompt = !no_prompt;
            let seed = rc.resolve_seed(seed)?;
            let manifest = gen_data(&out, scenes, seed, &g)?;
            print!("{manifest}");
            Ok(())
        }
        Command::Pretrain {
            data,
            config,
            out,
            seed,
            resume,
            stop_after,
        } => {
            let summary = pretrain(&data, config.as_deref(), &out, seed, resume.as_deref(), stop_after)?;
            println!("{summary}");
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            task,
            merge,
            gt_as_prediction,
            out,
        } => {
            let table = eval(&ckpt, &data, task, merge, gt_as_prediction)?;
            if let Some(out) = out {
                write_atomic(&out, table.to_csv().as_bytes())?;
            }
            print!("{}", table.to_tsv());
            Ok(())
        }
        Command::ProfileFlops { config, experts, tokens } => {
            let rc = RunConfig::load(config.as_deref())?;
            print!("{}", profile_flops(&rc.train.model, &experts, tokens)?.render());
            Ok(())
        }
        Command::Ablate {
            axis,
            grid,
            data,
            config,
            out,
            seed,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let base = rc.train_config(seed)?;
            let csv = ablate(&base, axis, grid.as_deref(), &data)?;
            write_atomic(&out, csv.as_bytes())?;
            print!("{csv}");
            Ok(())
        }
        Command::DumpActivations { ckpt, scene, out } => {
            let map = dump_activations(&ckpt, &scene)?;
            map.to_container().write(&out)
        }
    }
}

fn scene_file(i: usize) -> String {
    format!("scene_{i:04}.{SCENE_EXT}")
}

/// Generates `n` scenes with seeds `seed, seed + 1, ...`, writes them and a
/// manifest, and returns the manifest text.
pub fn gen_data(out: &Path, n: usize, seed: u64, g: &mest_core::scene::GeneratorConfig) -> Result<String> {
    if n == 0 {
        return Err(Error::Usage("--scenes must be at least 1".into()));
    }
    g.validate()?;
    let samples: Vec<(u64, SceneSample, Vec<u8>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let sample = generate_scene(s, g)?;
            let bytes = scene_to_container(&sample).to_bytes();
            Ok((s, sample, bytes))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, (s, sample, bytes)) in samples.iter().enumerate() {
        let path = out.join(scene_file(i));
        write_atomic(&path, bytes)?;
        let back = read_scene(&path)?;
        let status = if &back == sample { "ok" } else { "mismatch" };
        if status != "ok" {
            return Err(Error::Invariant(format!("{} does not read back identically", path.display())));
        }
        entries.push(ManifestEntry {
            file: scene_file(i),
            seed: *s,
            superpoints: sample.num_superpoints(),
            sha256: sha256_hex(bytes),
            status: status.into(),
        });
    }
    let manifest = render_manifest(&entries);
    write_atomic(&out.join(MANIFEST), manifest.as_bytes())?;
    Ok(manifest)
}

pub fn prepare(scenes: &[(String, SceneSample)], voxel_size: f64) -> Result<Vec<PreparedScene>> {
    scenes
        .par_iter()
        .map(|(_, s)| PreparedScene::new(s, voxel_size))
        .collect()
}

/// Stages 1 and 2. Writes `checkpoint.ckpt` and `train.log` to `out` and
/// returns a one-line summary.
pub fn pretrain(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<String> {
    let mut trainer = match resume {
        Some(ck) => {
            if config.is_some() || seed.is_some() {
                return Err(Error::Usage(
                    "--resume continues with the checkpoint's configuration; drop --config and --seed".into(),
                ));
            }
            Trainer::from_checkpoint(load_checkpoint(ck)?)?
        }
        None => Trainer::new(RunConfig::load(config)?.train_config(seed)?)?,
    };
    let scenes = prepare(&load_scenes(data)?, trainer.cfg.voxel_size)?;
    trainer.check_data(&scenes)?;
    let done = trainer.pretrain(&scenes, stop_after)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    save_checkpoint(&trainer.checkpoint()?, &out.join(CHECKPOINT_FILE))?;
    let mut log = trainer.log.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    write_atomic(&out.join(LOG_FILE), log.as_bytes())?;
    Ok(format!(
        "{} after {} updates ({})",
        if done { "pretraining complete" } else { "stopped" },
        trainer.global_step,
        trainer.phase.name()
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<(String, f64)>,
    pub mean: f64,
}

impl EvalTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scene\tiou\n");
        for (n, v) in &self.rows {
            s.push_str(&format!("{n}\t{v:.6}\n"));
        }
        s.push_str(&format!("mean\t{:.6}\n", self.mean));
        s
    }

    pub fn to_csv(&self) -> String {
        self.to_tsv().replace('\t', ",")
    }
}

fn referring_pair(t: &Trainer, s: &PreparedScene) -> Result<MaskPair> {
    let gt = s
        .referring
        .clone()
        .ok_or_else(|| Error::Missing("the scene has no prompt target".into()))?;
    let cached = t.referring_inputs(s)?;
    let logits = t.referring_logits(std::slice::from_ref(&cached))?;
    Ok(MaskPair {
        pred: vec![threshold(&logits[0])],
        gt: vec![gt],
        sizes: s.sizes.clone(),
    })
}

pub fn eval(ckpt: &Path, data: &Path, task: EvalTask, merge: Option<bool>, gt_as_prediction: bool) -> Result<EvalTable> {
    let trainer = Trainer::from_checkpoint(load_checkpoint(ckpt)?)?;
    let named = load_scenes(data)?;
    let scenes = prepare(&named, trainer.cfg.voxel_size)?;
    let bg = trainer.cfg.model.background();
    for ((name, _), s) in named.iter().zip(&scenes) {
        if let Some(c) = s.targets.sp_class.iter().find(|&&c| c >= bg) {
            return Err(Error::Config(format!(
                "{name} uses class {c}, which the checkpoint's {} class channels cannot represent",
                trainer.cfg.model.n_classes
            )));
        }
    }
    let merge = merge.unwrap_or(task == EvalTask::Miou);
    let pairs: Vec<MaskPair> = scenes
        .par_iter()
        .map(|s| {
            let mut p = match task {
                EvalTask::Seg => trainer.instance_pair(s)?,
                EvalTask::Miou => referring_pair(&trainer, s)?,
            };
            if gt_as_prediction {
                p.pred = p.gt.clone();
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let rows = named
        .iter()
        .zip(&pairs)
        .map(|((n, _), p)| Ok((n.clone(), p.iou(merge)?)))
        .collect::<Result<_>>()?;
    Ok(EvalTable {
        rows,
        mean: miou(&pairs, merge)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopRow {
    pub experts: usize,
    pub per_token: f64,
    pub gate: f64,
    pub expert: f64,
    pub ffn: f64,
    pub attention: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopProfile {
    pub tokens: usize,
    pub rows: Vec<FlopRow>,
}

impl FlopProfile {
    /// `(max - min) / min` of the per-token totals.
    pub fn spread(&self) -> f64 {
        let v: Vec<f64> = self.rows.iter().map(|r| r.per_token).collect();
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        (max - min) / min
    }

    pub fn render(&self) -> String {
        let mut s = format!("tokens\t{}\nexperts\tflops_per_token\tgate\texpert\tffn\tattention\n", self.tokens);
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\n",
                r.experts, r.per_token, r.gate, r.expert, r.ffn, r.attention
            ));
        }
        s.push_str(&format!("relative_spread\t{:.6e}\n", self.spread()));
        s
    }
}

/// Analytic forward FLOPs per superpoint token of the transformer for each
/// expert count, other settings from `model`.
pub fn profile_flops(model: &MestConfig, experts: &[usize], tokens: usize) -> Result<FlopProfile> {
    if experts.is_empty() || tokens == 0 {
        return Err(Error::Usage("need at least one expert count and one token".into()));
    }
    let cfgs: Vec<MestConfig> = experts
        .iter()
        .map(|&e| {
            let mut m = model.clone();
            m.moe.experts = e;
            if e == 1 {
                m.moe.second_expert = SecondExpertPolicy::None;
            }
            m.validate()?;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let per = |v: u64| v as f64 / tokens as f64;
    let rows = cfgs
        .iter()
        .map(|m| {
            let l = mest_flops(m, tokens, 0);
            FlopRow {
                experts: m.moe.experts,
                per_token: per(l.total()),
                gate: per(l.get(FlopKind::Gate)),
                expert: per(l.get(FlopKind::Expert)),
                ffn: per(l.get(FlopKind::Ffn)),
                attention: per(l.get(FlopKind::Attention)),
            }
        })
        .collect();
    Ok(FlopProfile { tokens, rows })
}

fn default_grid(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Experts => "1,2,4,6,8",
        AblationAxis::Layers => "1-2-3,2-3-4,4-5-6,1-3-6",
        AblationAxis::Zloss => "0,5e-4,1e-4,1e-5,1e-6",
        AblationAxis::Balance => "0,1e-3,1e-5,1e-7",
        AblationAxis::TopkPolicy => "none,all,threshold,random",
    }
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Experts => "experts",
        AblationAxis::Layers => "layers",
        AblationAxis::Zloss => "zloss",
        AblationAxis::Balance => "balance",
        AblationAxis::TopkPolicy => "topk-policy",
    }
}

/// One configuration per grid setting, validated up front.
pub fn ablation_cells(base: &TrainConfig, axis: AblationAxis, grid: Option<&str>) -> Result<Vec<(String, TrainConfig)>> {
    let grid = grid.unwrap_or(default_grid(axis));
    let bad = |s: &str, why: String| Error::Config(format!("grid setting `{s}`: {why}"));
    let cells: Vec<(String, TrainConfig)> = grid
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut c = base.clone();
            let real = || s.parse::<f64>().map_err(|e| bad(s, e.to_string()));
            match axis {
                AblationAxis::Experts => {
                    c.model.moe.experts = s.parse().map_err(|e: std::num::ParseIntError| bad(s, e.to_string()))?;
                    if c.model.moe.experts == 1 {
                        c.model.moe.second_expert = SecondExpertPolicy::None;
                    }
                }
                AblationAxis::Layers => {
                    c.model.moe_layers = s
                        .split('-')
                        .map(|b| b.parse().map_err(|e: std::num::ParseIntError| bad(s, e.to_string())))
                        .collect::<Result<_>>()?;
                }
                AblationAxis::Zloss => {
                    let blc = c.loss.blc;
                    c.set_router_weights(real()?, blc);
                }
                AblationAxis::Balance => {
                    let z = c.loss.z;
                    c.set_router_weights(z, real()?);
                }
                AblationAxis::TopkPolicy => {
                    c.model.moe.top_k = 1;
                    c.model.moe.second_expert = s.parse()?;
                }
            }
            c.validate().map_err(|e| bad(s, e.to_string()))?;
            Ok((s.to_string(), c))
        })
        .collect::<Result<_>>()?;
    if cells.is_empty() {
        return Err(Error::Usage("the ablation grid is empty".into()));
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub initial_inst_loss: f64,
    pub final_inst_loss: f64,
    pub seg_miou: f64,
    pub collapse_warnings: usize,
}

pub fn run_cell(cfg: &TrainConfig, scenes: &[PreparedScene]) -> Result<(f64, f64, f64, usize)> {
    let mut t = Trainer::new(cfg.clone())?;
    t.check_data(scenes)?;
    let s1 = cfg.stage1.steps;
    t.pretrain(scenes, Some(s1))?;
    let initial = t.eval_inst_loss(scenes)?;
    t.pretrain(scenes, None)?;
    let fin = t.eval_inst_loss(scenes)?;
    let pairs: Vec<MaskPair> = scenes.iter().map(|s| t.instance_pair(s)).collect::<Result<_>>()?;
    let warnings = t.log.iter().filter(|l| l.contains("\"collapse_warning\"")).count();
    Ok((initial, fin, miou(&pairs, false)?, warnings))
}

pub fn ablate(base: &TrainConfig, axis: AblationAxis, grid: Option<&str>, data: &Path) -> Result<String> {
    let cells = ablation_cells(base, axis, grid)?;
    let scenes = prepare(&load_scenes(data)?, base.voxel_size)?;
    for (_, c) in &cells {
        Trainer::new(c.clone())?.check_data(&scenes)?;
    }
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .map(|(setting, c)| {
            let (initial, fin, m, w) = run_cell(c, &scenes)?;
            Ok(AblationRow {
                setting: setting.clone(),
                seed: c.seed,
                initial_inst_loss: initial,
                final_inst_loss: fin,
                seg_miou: m,
                collapse_warnings: w,
            })
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("axis,setting,seed,initial_inst_loss,final_inst_loss,seg_miou,collapse_warnings\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            axis_name(axis),
            r.setting,
            r.seed,
            r.initial_inst_loss,
            r.final_inst_loss,
            r.seg_miou,
            r.collapse_warnings
        ));
    }
    Ok(csv)
}

pub fn dump_activations(ckpt: &Path, scene: &Path) -> Result<mest_core::moe::ActivationMap> {
    let trainer = Trainer::from_checkpoint(load_checkpoint(ckpt)?)?;
    let sample = read_scene(scene)?;
    let s = PreparedScene::new(&sample, trainer.cfg.voxel_size)?;
    let mut tape = Tape::new();
    let f = mest_core::encoder::superpoint_features(&mut tape, &trainer.store, &trainer.model.encoder, &s.inputs)?;
    let out = mest_forward(&mut tape, &trainer.store, &trainer.model, f, None)?;
    let layers: Vec<usize> = out.router.iter().map(|r| r.layer).collect();
    let states: Vec<_> = out.router.into_iter().map(|r| r.state).collect();
    expert_stats(&layers, &states)
}
