//! Acceptance gate: one line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the run, unless
//! `MEST_ACCEPT_STRICT` is set. A known-red criterion that passes fails the run
//! so the list stays accurate.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mest_cli::commands::{profile_flops, CHECKPOINT_FILE, LOG_FILE};
use mest_core::encoder::superpoint_features;
use mest_core::losses::LossWeights;
use mest_core::metrics::{miou, MaskPair};
use mest_core::model::{mest_forward, MestConfig, Model};
use mest_core::moe::{
    moe_forward, moe_forward_dense, route, second_expert, z_loss, MoEConfig, MoEParams, SecondExpertPolicy, LN_EPS,
};
use mest_core::numerics::{rng, ParamStore, Tape, Tensor, Var};
use mest_core::scene::{generate_scene, GeneratorConfig};
use mest_core::train::gradcheck::{gradcheck, gradcheck_params, GradCheckOptions, GradCheckReport};
use mest_core::train::{inst_objective, PreparedScene, TrainConfig, Trainer};
use mest_core::Result;
use rand::Rng;

const KNOWN_RED: &[usize] = &[8];

type Outcome = Result<(bool, String)>;

fn random(seed: u64, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut g = rng::stream(seed, 901, 0);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| g.gen_range(-scale..scale)).collect()).unwrap()
}

fn small(depth: usize, moe_layers: Vec<usize>, experts: usize) -> MestConfig {
    MestConfig {
        depth,
        moe_layers,
        dim: 8,
        ffn: 16,
        heads: 2,
        moe: MoEConfig {
            experts,
            ..MoEConfig::default()
        },
        n_classes: 5,
        mask_dim: None,
        dropout: 0.0,
        n_queries: 4,
        encoder_hidden: 8,
    }
}

// ---- 1: gradient suite -------------------------------------------------------

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)> {
    let pos = |s| random(s, 3, 4, 1.0).map(|v| v.abs() + 0.2);
    let w = random(50, 3, 5, 1.0);
    let w_ln = random(51, 4, 6, 1.0);
    vec![
        (
            "matmul+transpose+add+sub",
            vec![random(1, 3, 4, 1.0), random(2, 4, 2, 1.0), random(3, 2, 3, 1.0)],
            Box::new(|t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let ct = t.transpose(v[2]);
                let s = t.add(ab, ct)?;
                let d = t.sub(s, ab)?;
                let m = t.mul(d, s)?;
                Ok(t.sum(m))
            }),
        ),
        (
            "linear",
            vec![random(4, 3, 4, 1.0), random(5, 4, 2, 1.0), random(6, 1, 2, 1.0)],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }),
        ),
        (
            "mul+div+scale+add_scalar",
            vec![random(7, 3, 4, 1.0), pos(8)],
            Box::new(|t, v| {
                let q = t.div(v[0], v[1])?;
                let m = t.mul(q, v[0])?;
                let s = t.scale(m, -1.7);
                let s = t.add_scalar(s, 0.3);
                Ok(t.sum(s))
            }),
        ),
        (
            "add_bias+mul_column",
            vec![random(9, 4, 3, 1.0), random(10, 1, 3, 1.0), random(11, 4, 1, 1.0)],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.mul_column(y, v[2])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }),
        ),
        (
            "gelu+sigmoid+softplus+exp+ln+sqrt+clamp_min",
            vec![random(12, 3, 4, 1.0), pos(13)],
            Box::new(|t, v| {
                let a = t.gelu(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.softplus(v[0]);
                let d = t.exp(v[0]);
                let e = t.ln(v[1]);
                let f = t.sqrt(v[1]);
                let g = t.clamp_min(v[0], 0.05);
                let mut acc = t.add(a, b)?;
                for x in [c, d, e, f, g] {
                    acc = t.mul(acc, x)?;
                    acc = t.add(acc, x)?;
                }
                Ok(t.sum(acc))
            }),
        ),
        (
            "softmax+log_softmax+logsumexp",
            vec![random(14, 3, 5, 1.0)],
            Box::new(move |t, v| {
                let wc = t.constant(w.clone());
                let s = t.softmax_rows(v[0])?;
                let ls = t.log_softmax_rows(v[0])?;
                let lse = t.logsumexp_rows(v[0])?;
                let a = t.mul(s, wc)?;
                let b = t.mul(ls, wc)?;
                let (sa, sb, sl) = (t.sum(a), t.sum(b), t.sum(lse));
                let x = t.add(sa, sb)?;
                t.add(x, sl)
            }),
        ),
        (
            "layer_norm",
            vec![random(15, 4, 6, 1.0), random(16, 1, 6, 1.0), random(17, 1, 6, 1.0)],
            Box::new(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let wc = t.constant(w_ln.clone());
                let y = t.mul(y, wc)?;
                Ok(t.sum(y))
            }),
        ),
        (
            "sum+mean+sum_cols+mean_rows+gather+pick+index_add+segment_mean+slice+concat",
            vec![random(18, 5, 3, 1.0), random(19, 2, 3, 1.0)],
            Box::new(|t, v| {
                let sc = t.sum_cols(v[0]);
                let mr = t.mean_rows(v[0]);
                let g = t.gather_rows(v[0], &[4, 0, 4])?;
                let p = t.pick_cols(v[0], &[0, 2, 1, 1, 0])?;
                let ia = t.index_add_rows(5, 3, &[(v[1], vec![1, 3]), (g, vec![0, 1, 2])])?;
                let sm = t.segment_mean(v[0], &[0, 1, 0, 2, 1], 3)?;
                let sl = t.slice_cols(v[0], 1, 2)?;
                let cc = t.concat_cols(&[sl, v[0]])?;
                let cr = t.concat_rows(&[mr, v[1]])?;
                let mut total = t.mean(sc);
                for x in [p, ia, sm, cc, cr] {
                    let sq = t.mul(x, x)?;
                    let s = t.sum(sq);
                    total = t.add(total, s)?;
                }
                Ok(total)
            }),
        ),
    ]
}

fn dropout_fd(rel: &mut f64) {
    let f = |x0: &Tensor| {
        let mut t = Tape::training(5, 2);
        let x = t.leaf(x0.clone(), true);
        let y = t.dropout(x, 0.4).unwrap();
        let sq = t.mul(y, y).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        (t.value(l).item(), t.grad(x).unwrap().clone())
    };
    let x0 = random(20, 3, 4, 1.0);
    let (_, g) = f(&x0);
    let h = 1e-5;
    for k in 0..x0.numel() {
        let (mut p, mut m) = (x0.clone(), x0.clone());
        p.data_mut()[k] += h;
        m.data_mut()[k] -= h;
        let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
        *rel = rel.max((fd - g.data()[k]).abs() / fd.abs().max(1e-5));
    }
}

fn inst_loss_report() -> Result<GradCheckReport> {
    let g = GeneratorConfig {
        points: 400,
        objects: 5,
        split_grid: None,
        ..GeneratorConfig::default()
    };
    let sample = generate_scene(4, &g)?;
    assert_eq!(sample.num_superpoints(), 8);
    let scene = PreparedScene::new(&sample, g.voxel_size)?;
    let cfg = MestConfig {
        depth: 2,
        moe_layers: vec![2],
        dim: 16,
        ffn: 32,
        moe: MoEConfig {
            experts: 2,
            ..MoEConfig::default()
        },
        n_classes: 9,
        n_queries: 8,
        encoder_hidden: 16,
        ..small(2, vec![2], 2)
    };
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, 9)?;
    gradcheck_params(
        &mut store,
        |t, s| {
            let f = superpoint_features(t, s, &model.encoder, &scene.inputs)?;
            Ok(inst_objective(t, s, &model, f, &scene, &LossWeights::default())?.total)
        },
        &GradCheckOptions::default(),
    )
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, inputs, f) in op_cases() {
        let r = gradcheck(&inputs, |t, v| f(t, v), &opts)?;
        if !r.passed() {
            return Ok((false, format!("{name}: {r}")));
        }
        worst = worst.max(r.max_rel_err);
        checked += r.groups.iter().map(|g| g.checked).sum::<usize>();
    }
    dropout_fd(&mut worst);
    let inst = inst_loss_report()?;
    let inst_entries: usize = inst.groups.iter().map(|g| g.checked).sum();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && inst.passed() && secs < 60.0;
    Ok((
        pass,
        format!(
            "ops max rel {worst:.2e} over {checked} entries, L_inst max rel {:.2e} over {inst_entries} entries, {secs:.1} s",
            inst.max_rel_err
        ),
    ))
}

// ---- 2: routing invariants ----------------------------------------------------

fn c2_routing() -> Outcome {
    let mut g = rng::stream(2, 902, 0);
    let mut worst_shift = 0.0f64;
    let mut ties = 0;
    for row in 0..10_000 {
        let e = g.gen_range(1..=8);
        let quantized = row % 4 == 0;
        let vals: Vec<f64> = (0..e)
            .map(|_| if quantized { g.gen_range(0..3) as f64 } else { g.gen_range(-5.0..5.0) })
            .collect();
        let s = route(&Tensor::row(&vals), 1)?;
        let nz = s.masked.data().iter().filter(|&&v| v != 0.0).count();
        let best = (0..e).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
        ties += usize::from(vals.iter().filter(|&&v| v == vals[best]).count() > 1);
        if nz != 1 || s.selected[0] != vec![best] || s.masked.get(0, best) == 0.0 {
            return Ok((false, format!("row {row}: {vals:?} selected {:?}", s.selected[0])));
        }
        let c = g.gen_range(-100.0..100.0);
        let shifted = route(&Tensor::row(&vals.iter().map(|v| v + c).collect::<Vec<_>>()), 1)?;
        if shifted.selected != s.selected {
            return Ok((false, format!("row {row}: shift {c} changed the selection")));
        }
        worst_shift = worst_shift.max(shifted.masked.max_abs_diff(&s.masked));
    }
    Ok((
        worst_shift <= 1e-12,
        format!("10000 rows ({ties} with tied maxima), max shift deviation {worst_shift:.1e}"),
    ))
}

// ---- 3: z-loss ------------------------------------------------------------------

fn c3_zloss() -> Outcome {
    let mut worst = 0.0f64;
    for e in [1usize, 2, 4, 8] {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(7, e));
        let z = z_loss(&mut t, l)?;
        worst = worst.max((t.value(z).item() - (e as f64).ln().powi(2)).abs());
    }
    Ok((worst <= 1e-12, format!("max |L_z - (ln E)^2| = {worst:.1e}")))
}

// ---- 4: sparse dispatch versus dense masked evaluation ----------------------------

fn moe_cfg(experts: usize) -> MoEConfig {
    MoEConfig {
        experts,
        top_k: 1,
        ..MoEConfig::default()
    }
}

fn c4_dispatch() -> Outcome {
    for batch in 0..100u64 {
        let mut store = ParamStore::new();
        let p = MoEParams::new(&mut store, "moe", 6, 10, 4, &mut rng::stream(batch, 903, 0));
        let x = random(1000 + batch, 3 + batch as usize % 17, 6, 2.0);
        let mut t1 = Tape::new();
        let v = t1.constant(x.clone());
        let a = moe_forward(&mut t1, &store, &p, &moe_cfg(4), v, 0.0)?;
        let mut t2 = Tape::new();
        let v = t2.constant(x.clone());
        let b = moe_forward_dense(&mut t2, &store, &p, &moe_cfg(4), v, 0.0)?;
        let sparse = t1.value(a.y);
        let mut oracle = Tensor::zeros(x.rows(), 6);
        for (e, ex) in p.experts.iter().enumerate() {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = ex.forward(&mut t, &store, v, 0.0)?;
            let y = t.value(y);
            for r in 0..x.rows() {
                let w = a.state.masked.get(r, e);
                if w != 0.0 {
                    for c in 0..6 {
                        oracle.set(r, c, w * y.get(r, c));
                    }
                }
            }
        }
        if sparse.bits() != t2.value(b.y).bits() || sparse.bits() != oracle.bits() {
            return Ok((false, format!("batch {batch} differs")));
        }
    }
    Ok((true, "100 batches bitwise equal to the dense masked sum".into()))
}

// ---- 5: degeneracy ----------------------------------------------------------------

fn param(t: &mut Tape, store: &ParamStore, name: &str) -> Var {
    t.param(store, store.id(name).expect(name))
}

fn ref_ln(t: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = param(t, store, &format!("{name}.g"));
    let b = param(t, store, &format!("{name}.b"));
    t.layer_norm(x, g, b, LN_EPS)
}

fn ref_attention(t: &mut Tape, store: &ParamStore, name: &str, q_in: Var, kv: Var, heads: usize) -> Result<Var> {
    let [wq, wk, wv, wo] = ["q", "k", "v", "o"].map(|m| param(t, store, &format!("{name}.{m}.w")));
    let q = t.matmul(q_in, wq)?;
    let k = t.matmul(kv, wk)?;
    let v = t.matmul(kv, wv)?;
    let dh = t.value(q).cols() / heads;
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh)?;
        let kh = t.slice_cols(k, h * dh, dh)?;
        let vh = t.slice_cols(v, h * dh, dh)?;
        let kt = t.transpose(kh);
        let s = t.matmul(qh, kt)?;
        let s = t.scale(s, 1.0 / (dh as f64).sqrt());
        let a = t.softmax_rows(s)?;
        outs.push(t.matmul(a, vh)?);
    }
    let cat = t.concat_cols(&outs)?;
    t.matmul(cat, wo)
}

fn dense_reference(store: &ParamStore, cfg: &MestConfig, x: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let mut h = t.constant(x.clone());
    for i in 1..=cfg.depth {
        let b = format!("mest.block{i}");
        let a = ref_attention(&mut t, store, &format!("{b}.r1.cross"), h, h, cfg.heads)?;
        let s = t.add(h, a)?;
        let h1 = ref_ln(&mut t, store, &format!("{b}.r1.ln1"), s)?;
        let a = ref_attention(&mut t, store, &format!("{b}.r1.self"), h1, h1, cfg.heads)?;
        let s = t.add(h1, a)?;
        let h2 = ref_ln(&mut t, store, &format!("{b}.r1.ln2"), s)?;
        let f = ref_ln(&mut t, store, &format!("{b}.ffn.ln"), h2)?;
        let w1 = param(&mut t, store, &format!("{b}.ffn.w1"));
        let b1 = param(&mut t, store, &format!("{b}.ffn.b1"));
        let f = t.linear(f, w1, Some(b1))?;
        let f = t.gelu(f);
        let w2 = param(&mut t, store, &format!("{b}.ffn.w2"));
        let b2 = param(&mut t, store, &format!("{b}.ffn.b2"));
        let f = t.linear(f, w2, Some(b2))?;
        let s = t.add(h2, f)?;
        h = ref_ln(&mut t, store, &format!("{b}.ln"), s)?;
    }
    Ok(t.value(h).clone())
}

fn tokens(store: &ParamStore, model: &Model, x: &Tensor, prompt: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let pv = prompt.map(|p| t.constant(p.clone()));
    let out = mest_forward(&mut t, store, model, xv, pv)?;
    Ok((t.value(out.tokens).clone(), out.prompt.map(|p| t.value(p).clone())))
}

fn c5_degeneracy() -> Outcome {
    let moe_cfg = small(2, vec![1, 2], 1);
    let dense_cfg = small(2, vec![], 1);
    let mut moe_store = ParamStore::new();
    let moe_model = Model::new(&moe_cfg, &mut moe_store, 3)?;
    let mut dense_store = ParamStore::new();
    let dense_model = Model::new(&dense_cfg, &mut dense_store, 99)?;
    for (_, p) in moe_store.iter() {
        let name = p.name.replace("moe.expert0", "ffn");
        let id = dense_store.id(&name).expect("dense counterpart");
        dense_store.set_value(id, (*p.value).clone())?;
    }
    let x = random(11, 9, 8, 2.0);
    let prompt = random(12, 2, 8, 2.0);
    let (a, pa) = tokens(&moe_store, &moe_model, &x, Some(&prompt))?;
    let (b, pb) = tokens(&dense_store, &dense_model, &x, Some(&prompt))?;
    let e1 = a.bits() == b.bits() && pa.map(|p| p.bits()) == pb.map(|p| p.bits());
    let mut empty = true;
    for seed in 0..5 {
        let x = random(20 + seed, 10, 8, 2.0);
        let (out, _) = tokens(&dense_store, &dense_model, &x, None)?;
        empty &= out.bits() == dense_reference(&dense_store, &dense_cfg, &x)?.bits();
    }
    Ok((e1 && empty, format!("E=1 equals dense: {e1}; moe_layers=[] equals reference: {empty}")))
}

// ---- 6: FLOP constancy --------------------------------------------------------------

fn c6_flops() -> Outcome {
    let cfg = MestConfig::default();
    assert_eq!((cfg.dim, cfg.ffn, cfg.moe.top_k), (256, 1024, 1));
    let p = profile_flops(&cfg, &[1, 2, 4, 6, 8], 256)?;
    let spread = p.spread();
    Ok((spread < 0.01, format!("relative spread {spread:.3e} over E in 1,2,4,6,8")))
}

// ---- 7: mIoU oracle --------------------------------------------------------------

fn brute_force(pair: &MaskPair, merge: bool) -> f64 {
    let labels: Vec<usize> = pair
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| std::iter::repeat_n(s, n))
        .collect();
    let points = |ms: &[Vec<bool>]| -> Vec<Vec<bool>> { ms.iter().map(|m| labels.iter().map(|&s| m[s]).collect()).collect() };
    let score = |p: &[bool], g: &[bool]| {
        let i = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
        let u = p.iter().zip(g).filter(|(a, b)| **a || **b).count();
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    };
    let (pred, gt) = (points(&pair.pred), points(&pair.gt));
    let any = |ms: &[Vec<bool>]| (0..labels.len()).map(|k| ms.iter().any(|m| m[k])).collect::<Vec<_>>();
    if merge || gt.is_empty() {
        score(&any(&pred), &any(&gt))
    } else {
        pred.iter().zip(&gt).map(|(p, g)| score(p, g)).sum::<f64>() / gt.len() as f64
    }
}

fn random_pair(seed: u64, merge: bool) -> MaskPair {
    let mut g = rng::stream(seed, 907, 0);
    let l = g.gen_range(1..=32);
    let sizes: Vec<usize> = (0..l).map(|_| g.gen_range(1..20)).collect();
    let density = if seed % 10 == 0 { 0.0 } else { g.gen_range(0.0..0.6) };
    let n_gt = g.gen_range(0..4);
    let n_pred = if merge { g.gen_range(0..4) } else { n_gt };
    let mut mask = || (0..l).map(|_| g.gen_bool(density)).collect::<Vec<bool>>();
    let gt = (0..n_gt).map(|_| mask()).collect();
    let pred = (0..n_pred).map(|_| mask()).collect();
    MaskPair { pred, gt, sizes }
}

fn c7_miou() -> Outcome {
    let mut empty = 0;
    for merge in [true, false] {
        let pairs: Vec<MaskPair> = (0..200).map(|s| random_pair(s, merge)).collect();
        for (s, p) in pairs.iter().enumerate() {
            let (got, want) = (p.iou(merge)?, brute_force(p, merge));
            if got != want {
                return Ok((false, format!("pair {s} merge {merge}: {got} vs {want}")));
            }
            empty += usize::from(p.pred.iter().chain(&p.gt).all(|m| m.iter().all(|&b| !b)));
        }
        let want = pairs.iter().map(|p| brute_force(p, merge)).sum::<f64>() / 200.0;
        if miou(&pairs, merge)? != want {
            return Ok((false, format!("mean differs with merge {merge}")));
        }
    }
    Ok((true, format!("2 x 200 pairs exact, {empty} empty-vs-empty")))
}

// ---- 8 and 9: desk-scale training ------------------------------------------------

fn desk_scenes() -> Result<Vec<PreparedScene>> {
    let g = GeneratorConfig {
        teacher_dim: Some(256),
        prompt: true,
        ..GeneratorConfig::default()
    };
    (0..10).map(|s| PreparedScene::new(&generate_scene(s, &g)?, g.voxel_size)).collect()
}

fn c8_c9_training() -> Result<(Outcome, Outcome)> {
    let data = desk_scenes()?;
    let cfg = TrainConfig::default();
    let mut t = Trainer::new(cfg)?;
    t.pretrain(&data, Some(t.cfg.stage1.steps))?;
    let t0 = Instant::now();
    let before = t.eval_inst_loss(&data)?;
    t.pretrain(&data, Some(t.cfg.stage1.steps + t.cfg.stage2.steps))?;
    let after = t.eval_inst_loss(&data)?;
    let secs = t0.elapsed().as_secs_f64();
    let last = t.global_step.saturating_sub(100);
    let late: Vec<serde_json::Value> = t
        .log
        .iter()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).expect("log line"))
        .filter(|v| v["event"] == "collapse_warning" && v["global_step"].as_u64().unwrap_or(0) as usize > last)
        .collect();
    let reduction = 1.0 - after / before;
    let mut layers: Vec<u64> = late.iter().filter_map(|v| v["layer"].as_u64()).collect();
    layers.sort();
    layers.dedup();
    let layers_seen: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
    let c8 = Ok((
        reduction >= 0.5 && late.is_empty() && secs < 600.0,
        format!(
            "L_inst {before:.3} -> {after:.3} (reduction {:.1}%), {} collapse warnings in the final 100 steps (layers {}), {secs:.0} s",
            100.0 * reduction,
            late.len(),
            layers_seen.join(",")
        ),
    ));
    let report = t.finetune_masks(&data, &[])?;
    let c9 = Ok((
        report.train_miou >= 0.90 && report.mest_hash_before == report.mest_hash_after,
        format!(
            "train mIoU {:.4} after {} steps, MEST hash unchanged: {}",
            report.train_miou,
            t.cfg.stage3.steps,
            report.mest_hash_before == report.mest_hash_after
        ),
    ));
    Ok((c8, c9))
}

// ---- 10: second-expert policies ---------------------------------------------------

fn c10_policies() -> Outcome {
    let logits = random(31, 10_000, 4, 1.5);
    let base = route(&logits, 1)?;
    let mut r = rng::stream(5, 910, 0);
    let all = second_expert(&base, SecondExpertPolicy::All, &mut r)?;
    let tau = 0.25;
    let th = second_expert(&base, SecondExpertPolicy::Threshold(tau), &mut r)?;
    let rnd = second_expert(&base, SecondExpertPolicy::Random, &mut r)?;
    let mut mean_p = 0.0;
    for row in 0..10_000 {
        let w = base.weights.row_slice(row);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        let (first, second) = (order[0], order[1]);
        mean_p += w[second] / 10_000.0;
        if all.selected[row] != vec![first, second] {
            return Ok((false, format!("all: row {row} selected {:?}", all.selected[row])));
        }
        let want = if w[second] > tau { vec![first, second] } else { vec![first] };
        if th.selected[row] != want {
            return Ok((false, format!("threshold: row {row} selected {:?}", th.selected[row])));
        }
        if !(rnd.selected[row] == vec![first] || rnd.selected[row] == vec![first, second]) {
            return Ok((false, format!("random: row {row} selected {:?}", rnd.selected[row])));
        }
    }
    let freq = rnd.selected.iter().filter(|s| s.len() == 2).count() as f64 / 10_000.0;
    Ok((
        (freq - mean_p).abs() < 0.02,
        format!("all and threshold({tau}) exact; random frequency {freq:.4} vs mean rank-2 probability {mean_p:.4}"),
    ))
}

// ---- 11: determinism of the pretraining command ------------------------------------

const DETERMINISM_CONFIG: &str = r#"
[model]
depth = 2
moe_layers = [1, 2]
dim = 16
ffn = 32
heads = 2
n_queries = 8
encoder_hidden = 16
dropout = 0.1
[model.moe]
experts = 3
second_expert = "random"
[stage1]
steps = 4
[stage2]
steps = 6
"#;

fn mest(args: &[&str], paths: &[&Path]) -> Result<()> {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mest"));
    c.env_remove("MEST_SEED");
    let mut it = paths.iter();
    for a in args {
        if *a == "{}" {
            c.arg(it.next().expect("path"));
        } else {
            c.arg(a);
        }
    }
    let o = c.output().map_err(|e| mest_core::Error::Usage(e.to_string()))?;
    if !o.status.success() {
        return Err(mest_core::Error::Usage(String::from_utf8_lossy(&o.stderr).into_owned()));
    }
    Ok(())
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| mest_core::Error::Usage(e.to_string()))?;
    let d = dir.path();
    let (data, cfg) = (d.join("data"), d.join("run.toml"));
    std::fs::write(&cfg, DETERMINISM_CONFIG).map_err(|e| mest_core::Error::Usage(e.to_string()))?;
    mest(
        &["gen-data", "--out", "{}", "--scenes", "3", "--seed", "5", "--points", "800", "--objects", "2", "--teacher-dim", "16"],
        &[&data],
    )?;
    let (a, b) = (d.join("a"), d.join("b"));
    for out in [&a, &b] {
        mest(&["pretrain", "--data", "{}", "--config", "{}", "--out", "{}", "--seed", "13"], &[&data, &cfg, out])?;
    }
    let mut same = true;
    let mut sizes = Vec::new();
    for f in [CHECKPOINT_FILE, LOG_FILE] {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        let (x, y) = (x.map_err(|e| mest_core::Error::Usage(e.to_string()))?, y.map_err(|e| mest_core::Error::Usage(e.to_string()))?);
        same &= x == y;
        sizes.push(format!("{f} {} bytes", x.len()));
    }
    Ok((same, format!("two runs byte-identical: {same} ({})", sizes.join(", "))))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let strict = std::env::var_os("MEST_ACCEPT_STRICT").is_some();
    let names = [
        "gradient suite",
        "top-1 routing invariants",
        "z-loss closed form",
        "sparse dispatch equals dense",
        "degeneracy",
        "FLOP constancy",
        "mIoU oracle",
        "desk-scale stage2 pretraining",
        "stage3 mask finetune",
        "second-expert policies",
        "pretrain determinism",
    ];
    let mut results: Vec<Outcome> = vec![
        c1_gradients(),
        c2_routing(),
        c3_zloss(),
        c4_dispatch(),
        c5_degeneracy(),
        c6_flops(),
        c7_miou(),
    ];
    match c8_c9_training() {
        Ok((c8, c9)) => results.extend([c8, c9]),
        Err(e) => results.extend([Err(e), Ok((false, "not run: training failed".into()))]),
    }
    results.extend([c10_policies(), c11_determinism()]);

    let mut fatal = 0;
    for (i, (name, r)) in names.iter().zip(results).enumerate() {
        let n = i + 1;
        let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        let red = KNOWN_RED.contains(&n);
        let tag = match (pass, red) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known red)",
            (true, true) => "PASS (listed as known red)",
        };
        println!("[{n:>2}] {tag} {name}: {detail}");
        if pass == red || (strict && !pass) {
            fatal += 1;
        }
    }
    if fatal > 0 {
        eprintln!("{fatal} acceptance criteria failed");
        std::process::exit(1);
    }
}
