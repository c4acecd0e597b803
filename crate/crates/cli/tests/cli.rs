use std::path::{Path, PathBuf};
use std::process::Command;

use mest_cli::commands::{ablation_cells, eval, gen_data, profile_flops, CHECKPOINT_FILE, LOG_FILE};
use mest_cli::config::RunConfig;
use mest_cli::data::{load_scenes, sha256_hex, MANIFEST};
use mest_cli::{AblationAxis, EvalTask};
use mest_core::metrics::{iou, union_mask};
use mest_core::model::MestConfig;
use mest_core::moe::ActivationMap;
use mest_core::scene::container::Container;
use mest_core::scene::{read_scene, write_scene, GeneratorConfig};
use mest_core::train::{PreparedScene, TrainConfig};

const TINY: &str = r#"
[model]
depth = 2
moe_layers = [2]
dim = 16
ffn = 32
heads = 2
n_queries = 8
encoder_hidden = 16
dropout = 0.1
[model.moe]
experts = 2
[stage1]
steps = 3
[stage2]
steps = 5
"#;

fn mest() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mest"));
    c.env_remove("MEST_SEED");
    c
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let o = cmd.output().unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn tiny_gen() -> GeneratorConfig {
    GeneratorConfig {
        points: 800,
        objects: 2,
        teacher_dim: Some(16),
        prompt: true,
        ..GeneratorConfig::default()
    }
}

fn setup(dir: &Path, scenes: usize) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    gen_data(&data, scenes, 11, &tiny_gen()).unwrap();
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (data, cfg)
}

fn pretrain(data: &Path, cfg: &Path, out: &Path) -> i32 {
    let (code, _, err) = run(mest()
        .args(["pretrain", "--data"])
        .arg(data)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out));
    assert!(code == 0 || !err.is_empty());
    code
}

#[test]
fn gen_data_manifest_is_reproducible_and_scenes_validate() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        let mut c = mest();
        c.args(["gen-data", "--scenes", "10", "--seed", "42", "--points", "600", "--out"]).arg(out);
        c
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&mut args(&a)).0, 0);
    assert_eq!(run(&mut args(&b)).0, 0);
    let ma = std::fs::read(a.join(MANIFEST)).unwrap();
    assert_eq!(sha256_hex(&ma), sha256_hex(&std::fs::read(b.join(MANIFEST)).unwrap()));
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().count(), 12);
    for line in text.lines().skip(2) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[4], "ok");
        let bytes = std::fs::read(a.join(f[0])).unwrap();
        assert_eq!(sha256_hex(&bytes), f[3]);
        let s = read_scene(&a.join(f[0])).unwrap();
        s.validate().unwrap();
        assert_eq!(s.num_superpoints().to_string(), f[2]);
        assert_eq!(s.teacher.as_ref().unwrap().cols(), 256);
    }
}

#[test]
fn gen_data_zero_scenes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("none");
    let (code, _, err) = run(mest().args(["gen-data", "--scenes", "0", "--out"]).arg(&out));
    assert_eq!(code, 1, "{err}");
    assert!(!out.exists());
}

#[test]
fn seed_comes_from_flag_then_file_then_environment() {
    let path = Path::new("x.toml");
    let rc = RunConfig::parse("seed = 7\n", path).unwrap();
    assert_eq!(rc.resolve_seed(Some(3)).unwrap(), 3);
    assert_eq!(rc.resolve_seed(None).unwrap(), 7);
    let dir = tempfile::tempdir().unwrap();
    let run_with = |env: Option<&str>| {
        let out = dir.path().join(format!("g{}", env.unwrap_or("none")));
        let mut c = mest();
        if let Some(e) = env {
            c.env("MEST_SEED", e);
        }
        let (code, stdout, _) = run(c.args(["gen-data", "--scenes", "1", "--points", "300", "--out"]).arg(&out));
        assert_eq!(code, 0);
        stdout
    };
    assert!(run_with(Some("9")).contains("scene_0000.scene\t9\t"));
    assert!(run_with(None).contains("scene_0000.scene\t0\t"));
    let (code, _, _) = run(mest()
        .env("MEST_SEED", "banana")
        .args(["gen-data", "--scenes", "1", "--out"])
        .arg(dir.path().join("bad")));
    assert_eq!(code, 1);
}

#[test]
fn config_overlays_defaults_and_rejects_unknown_keys() {
    let p = Path::new("c.toml");
    let rc = RunConfig::parse("[stage2]\nsteps = 10\n[model.moe]\nlambda_z = 0.0\n", p).unwrap();
    let d = TrainConfig::default();
    assert_eq!(rc.train.stage2.steps, 10);
    assert_eq!(rc.train.stage2.optim, d.stage2.optim);
    assert_eq!(rc.train.loss.z, 0.0);
    assert_eq!(rc.train.model.moe_layers, vec![1, 3, 6]);
    for bad in ["colour = 1\n", "[model]\ndepht = 3\n", "[stage1.optim]\nlearning_rate = 1.0\n", "[loss]\nz = 0.1\n"] {
        assert!(matches!(RunConfig::parse(bad, p), Err(mest_core::Error::Config(_))), "{bad}");
    }
    let rc = RunConfig::parse("[model]\nheads = 7\n", p).unwrap();
    assert!(rc.train_config(None).is_err());
}

#[test]
fn invalid_config_fails_before_compute_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path(), 1);
    for (i, body) in ["[model]\nheads = 3\n", "unknown = 1\n", "[model]\nmoe_layers = [9]\n"].iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&cfg, body).unwrap();
        let out = dir.path().join(format!("out{i}"));
        assert_eq!(pretrain(&data, &cfg, &out), 1);
        assert!(!out.exists());
    }
    let out = dir.path().join("missing");
    let (code, _, _) = run(mest()
        .args(["pretrain", "--data"])
        .arg(dir.path().join("nowhere"))
        .arg("--out")
        .arg(&out));
    assert_eq!(code, 2);
    assert!(!out.exists());
}

#[test]
fn numeric_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path(), 1);
    let cfg = dir.path().join("nan.toml");
    std::fs::write(&cfg, format!("{TINY}[stage1.optim]\nlr = 1e300\n")).unwrap();
    let out = dir.path().join("out");
    assert_eq!(pretrain(&data, &cfg, &out), 3);
    assert!(!out.exists());
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(pretrain(&data, &cfg, &a), 0);
    assert_eq!(pretrain(&data, &cfg, &b), 0);
    for f in [CHECKPOINT_FILE, LOG_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(a.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 8);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["step"].is_u64() && v["loss"].is_f64() && v["lr"].is_f64());
    }
    let half = dir.path().join("half");
    let (code, out, _) = run(mest()
        .args(["pretrain", "--stop-after", "5", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&half));
    assert_eq!(code, 0);
    assert!(out.contains("stopped after 5"));
    let resumed = dir.path().join("resumed");
    let (code, _, err) = run(mest()
        .args(["pretrain", "--data"])
        .arg(&data)
        .arg("--resume")
        .arg(half.join(CHECKPOINT_FILE))
        .arg("--out")
        .arg(&resumed));
    assert_eq!(code, 0, "{err}");
    for f in [CHECKPOINT_FILE, LOG_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(resumed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn default_placement_is_interleaved() {
    let rc = RunConfig::parse("", Path::new("empty.toml")).unwrap();
    assert_eq!(rc.train.model.moe_layers, vec![1, 3, 6]);
    assert_eq!(rc.train.model.depth, 6);
    assert_eq!(rc.train.model.moe.experts, 4);
}

#[test]
fn eval_matches_metric_oracle_and_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 3);
    let run_dir = dir.path().join("run");
    assert_eq!(pretrain(&data, &cfg, &run_dir), 0);
    let ck = run_dir.join(CHECKPOINT_FILE);
    for task in [EvalTask::Seg, EvalTask::Miou] {
        let gt = eval(&ck, &data, task, None, true).unwrap();
        assert!(gt.rows.iter().all(|r| r.1 == 1.0));
        assert_eq!(gt.mean, 1.0);
    }
    let t = mest_core::train::Trainer::from_checkpoint(mest_core::train::load_checkpoint(&ck).unwrap()).unwrap();
    let named = load_scenes(&data).unwrap();
    for merge in [false, true] {
        let table = eval(&ck, &data, EvalTask::Seg, Some(merge), false).unwrap();
        let mut sum = 0.0;
        for ((name, s), (row_name, v)) in named.iter().zip(&table.rows) {
            assert_eq!(name, row_name);
            let p = t.instance_pair(&PreparedScene::new(s, t.cfg.voxel_size).unwrap()).unwrap();
            let sizes = s.partition.sizes();
            let expect = if merge {
                let l = sizes.len();
                iou(&union_mask(&p.pred, l).unwrap(), &union_mask(&p.gt, l).unwrap(), &sizes).unwrap()
            } else {
                let k = p.gt.len() as f64;
                p.pred.iter().zip(&p.gt).map(|(a, b)| iou(a, b, &sizes).unwrap()).sum::<f64>() / k
            };
            assert_eq!(*v, expect);
            sum += expect;
        }
        assert!((table.mean - sum / named.len() as f64).abs() < 1e-15);
    }
    let (code, stdout, _) = run(mest()
        .args(["eval", "--task", "miou", "--ckpt"])
        .arg(&ck)
        .arg("--data")
        .arg(&data));
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().next(), Some("scene\tiou"));
    assert_eq!(stdout.lines().count(), 5);
}

#[test]
fn empty_targets_with_empty_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 2);
    let run_dir = dir.path().join("run");
    assert_eq!(pretrain(&data, &cfg, &run_dir), 0);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let mut s = read_scene(&data.join("scene_0000.scene")).unwrap();
    s.gt_instances.clear();
    s.prompt = None;
    write_scene(&s, &empty.join("e.scene")).unwrap();
    let ck = run_dir.join(CHECKPOINT_FILE);
    for merge in [false, true] {
        let table = eval(&ck, &empty, EvalTask::Seg, Some(merge), true).unwrap();
        assert_eq!(table.rows, vec![("e.scene".to_string(), 1.0)]);
        let predicted = eval(&ck, &empty, EvalTask::Seg, Some(merge), false).unwrap();
        assert!((0.0..=1.0).contains(&predicted.rows[0].1));
    }
}

#[test]
fn eval_rejects_checkpoint_data_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 1);
    let run_dir = dir.path().join("run");
    assert_eq!(pretrain(&data, &cfg, &run_dir), 0);
    let wide = dir.path().join("wide");
    gen_data(&wide, 1, 3, &GeneratorConfig { classes: 12, objects: 12, ..tiny_gen() }).unwrap();
    let (code, _, err) = run(mest()
        .args(["eval", "--task", "seg", "--ckpt"])
        .arg(run_dir.join(CHECKPOINT_FILE))
        .arg("--data")
        .arg(&wide));
    assert_eq!(code, 1, "{err}");
}

#[test]
fn flop_profile_properties() {
    let m = MestConfig::default();
    let p = profile_flops(&m, &[1, 2, 4, 6, 8], 256).unwrap();
    assert!(p.spread() < 0.01, "{}", p.render());
    let dense = MestConfig {
        moe_layers: vec![],
        ..MestConfig::default()
    };
    let e1 = profile_flops(&m, &[1], 256).unwrap().rows[0].per_token;
    assert_eq!(profile_flops(&dense, &[4], 256).unwrap().rows[0].per_token, e1);
    let wide = MestConfig {
        dim: 512,
        ffn: 2048,
        ..MestConfig::default()
    };
    let a = profile_flops(&m, &[4], 8).unwrap().rows[0].per_token;
    let b = profile_flops(&wide, &[4], 8).unwrap().rows[0].per_token;
    assert!((b / a / 4.0 - 1.0).abs() < 0.05, "{}", b / a);
    let (code, stdout, _) = run(mest().args(["profile-flops", "--experts", "1,2,4,6,8"]));
    assert_eq!(code, 0);
    let spread: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("relative_spread\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(spread < 0.01);
}

#[test]
fn ablation_grids() {
    let base = TrainConfig::default();
    let layers = ablation_cells(&base, AblationAxis::Layers, None).unwrap();
    let placements: Vec<Vec<usize>> = layers.iter().map(|(_, c)| c.model.moe_layers.clone()).collect();
    assert_eq!(placements, vec![vec![1, 2, 3], vec![2, 3, 4], vec![4, 5, 6], vec![1, 3, 6]]);
    let z: Vec<f64> = ablation_cells(&base, AblationAxis::Zloss, None)
        .unwrap()
        .iter()
        .map(|(_, c)| c.model.moe.lambda_z)
        .collect();
    for want in [0.0, 1e-4, 1e-5] {
        assert!(z.contains(&want));
    }
    let policies = ablation_cells(&base, AblationAxis::TopkPolicy, None).unwrap();
    assert_eq!(policies.len(), 4);
    assert!(ablation_cells(&base, AblationAxis::Experts, Some("0")).is_err());
    assert!(ablation_cells(&base, AblationAxis::Layers, Some("1-9")).is_err());
}

#[test]
fn experts_ablation_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 2);
    let out = dir.path().join("abl.csv");
    let (code, _, err) = run(mest()
        .args(["ablate", "--axis", "experts", "--grid", "1,2,4", "--jobs", "3", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out));
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    for (row, e) in rows[1..].iter().zip(["1", "2", "4"]) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[0], f[1]), ("experts", e));
        for v in &f[3..6] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
    let again = dir.path().join("abl2.csv");
    run(mest()
        .args(["ablate", "--axis", "experts", "--grid", "1,2,4", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&again));
    assert_eq!(csv, std::fs::read_to_string(&again).unwrap());
}

#[test]
fn activation_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 1);
    let one = dir.path().join("one.toml");
    std::fs::write(&one, TINY.replace("experts = 2", "experts = 1")).unwrap();
    for (c, name) in [(&cfg, "two"), (&one, "one")] {
        let run_dir = dir.path().join(name);
        assert_eq!(pretrain(&data, c, &run_dir), 0);
        let out = dir.path().join(format!("{name}.act"));
        let (code, _, err) = run(mest()
            .arg("dump-activations")
            .arg("--ckpt")
            .arg(run_dir.join(CHECKPOINT_FILE))
            .arg("--scene")
            .arg(data.join("scene_0000.scene"))
            .arg("--out")
            .arg(&out));
        assert_eq!(code, 0, "{err}");
        let map = ActivationMap::from_container(&Container::read(&out).unwrap()).unwrap();
        let l = read_scene(&data.join("scene_0000.scene")).unwrap().num_superpoints();
        assert_eq!(map.layers, vec![2]);
        for (labels, h) in map.labels.iter().zip(&map.histograms) {
            assert_eq!(labels.len(), l);
            assert_eq!(h.iter().sum::<usize>(), l);
        }
        if name == "one" {
            assert!(map.labels.iter().flatten().all(|&e| e == 0));
        }
        let bytes = std::fs::read(&out).unwrap();
        assert_eq!(map.to_container().to_bytes(), bytes);
    }
}
