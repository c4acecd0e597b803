use proptest::{prop_assert, prop_assert_eq, proptest};
use rand::Rng;

use super::*;
use crate::numerics::rng;
use crate::train::gradcheck::{gradcheck, gradcheck_params, GradCheckOptions};

fn random(seed: u64, r: usize, c: usize, scale: f64) -> Tensor {
    let mut g = rng::stream(seed, 11, 0);
    Tensor::matrix(r, c, (0..r * c).map(|_| g.gen_range(-scale..scale)).collect()).unwrap()
}

fn layer(dim: usize, ffn: usize, experts: usize, seed: u64) -> (ParamStore, MoEParams) {
    let mut store = ParamStore::new();
    let p = MoEParams::new(&mut store, "moe", dim, ffn, experts, &mut rng::stream(seed, 12, 0));
    (store, p)
}

fn cfg(experts: usize, top_k: usize) -> MoEConfig {
    MoEConfig {
        experts,
        top_k,
        ..MoEConfig::default()
    }
}

fn logits_for(probs: &[f64]) -> Tensor {
    Tensor::row(&probs.iter().map(|p| p.ln()).collect::<Vec<_>>())
}

fn gate_value(x: &Tensor, w: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let g = gate(&mut tape, x, w).unwrap();
    assert_eq!(tape.flops().get(FlopKind::Gate), 2 * x_rows(&tape, x) * tape.value(w).numel() as u64);
    tape.value(g).clone()
}

fn x_rows(tape: &Tape, x: Var) -> u64 {
    tape.value(x).rows() as u64
}

#[test]
fn zero_gate_gives_zero_logits() {
    let g = gate_value(&random(1, 5, 3, 1.0), &Tensor::zeros(3, 4));
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_scalar_example() {
    let g = gate_value(&Tensor::row(&[2.0]), &Tensor::row(&[1.0, -1.0]));
    assert_eq!(g.data(), &[2.0, -2.0]);
}

#[test]
fn gate_matches_triple_loop() {
    let x = random(2, 7, 5, 1.0);
    let w = random(3, 5, 4, 1.0);
    let g = gate_value(&x, &w);
    for i in 0..7 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..5 {
                s += x.get(i, k) * w.get(k, j);
            }
            assert!((g.get(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_logits_pick_lowest_index() {
    let s = route(&Tensor::zeros(1, 4), 1).unwrap();
    assert_eq!(s.masked.data(), &[0.25, 0.0, 0.0, 0.0]);
    assert_eq!(s.selected, vec![vec![0]]);
    assert_eq!(s.load, vec![1, 0, 0, 0]);
}

#[test]
fn full_top_k_keeps_all_weights() {
    let s = route(&random(4, 6, 5, 3.0), 5).unwrap();
    assert_eq!(s.masked, s.weights);
    assert_eq!(s.load, vec![6; 5]);
}

#[test]
fn top2_matches_sort_oracle() {
    let logits = random(5, 200, 6, 2.0);
    let s = route(&logits, 2).unwrap();
    for r in 0..200 {
        let row = logits.row_slice(r);
        let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want = vec![pairs[0].1, pairs[1].1];
        let mut got = s.selected[r].clone();
        want.sort();
        got.sort();
        assert_eq!(got, want);
        for e in 0..6 {
            let kept = s.masked.get(r, e);
            if want.contains(&e) {
                assert_eq!(kept, s.weights.get(r, e));
            } else {
                assert_eq!(kept, 0.0);
            }
        }
    }
    assert_eq!(s.load.iter().sum::<usize>(), 400);
}

#[test]
fn route_rejects_bad_k() {
    assert!(route(&Tensor::zeros(2, 3), 0).is_err());
    assert!(route(&Tensor::zeros(2, 3), 4).is_err());
}

proptest! {
    #[test]
    fn top1_is_sparse_argmax_and_shift_invariant(seed in 0u64..10_000, e in 1usize..9, shift in -50.0f64..50.0) {
        let mut g = rng::stream(seed, 13, 0);
        // Coarse values make exact ties frequent.
        let row: Vec<f64> = (0..e).map(|_| g.gen_range(-3i32..3) as f64 * 0.5).collect();
        let s = route(&Tensor::row(&row), 1).unwrap();
        prop_assert_eq!(s.masked.data().iter().filter(|&&v| v != 0.0).count(), 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let argmax = row.iter().position(|&v| v == max).unwrap();
        prop_assert_eq!(s.top1(), vec![argmax]);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let t = route(&Tensor::row(&shifted), 1).unwrap();
        prop_assert_eq!(t.top1(), s.top1());
        prop_assert!(t.masked.max_abs_diff(&s.masked) <= 1e-12);
        prop_assert!(t.weights.max_abs_diff(&s.weights) <= 1e-12);
    }
}

fn sparse_and_dense(store: &ParamStore, p: &MoEParams, c: &MoEConfig, x: &Tensor) -> (Tensor, Tensor) {
    let mut t1 = Tape::new();
    let v = t1.constant(x.clone());
    let a = moe_forward(&mut t1, store, p, c, v, 0.0).unwrap();
    let mut t2 = Tape::new();
    let v = t2.constant(x.clone());
    let b = moe_forward_dense(&mut t2, store, p, c, v, 0.0).unwrap();
    assert_eq!(a.state, b.state);
    (t1.value(a.y).clone(), t2.value(b.y).clone())
}

fn expert_value(store: &ParamStore, e: &ExpertParams, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = e.forward(&mut tape, store, v, 0.0).unwrap();
    tape.value(y).clone()
}

#[test]
fn single_expert_is_the_expert() {
    let (store, p) = layer(6, 12, 1, 1);
    let x = random(6, 9, 6, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = moe_forward(&mut tape, &store, &p, &cfg(1, 1), v, 0.0).unwrap();
    assert_eq!(tape.value(out.y).bits(), expert_value(&store, &p.experts[0], &x).bits());
    assert!(out.state.weights.data().iter().all(|&w| w == 1.0));
}

#[test]
fn identical_experts_with_full_top_k() {
    let (mut store, p) = layer(5, 10, 2, 2);
    for (a, b) in [
        (p.experts[0].w1, p.experts[1].w1),
        (p.experts[0].w2, p.experts[1].w2),
    ] {
        let v = store.value(a).clone();
        store.set_value(b, v).unwrap();
    }
    let x = random(7, 8, 5, 1.0);
    let (y, _) = sparse_and_dense(&store, &p, &cfg(2, 2), &x);
    assert!(y.max_abs_diff(&expert_value(&store, &p.experts[0], &x)) < 1e-12);
}

#[test]
fn sparse_dispatch_equals_dense_bitwise() {
    for batch in 0..100u64 {
        let (store, p) = layer(6, 10, 4, batch);
        let x = random(1000 + batch, 3 + batch as usize % 17, 6, 2.0);
        let (s, d) = sparse_and_dense(&store, &p, &cfg(4, 1), &x);
        assert_eq!(s.bits(), d.bits(), "batch {batch}");
    }
}

#[test]
fn sparse_dispatch_matches_eq8_rows() {
    let (store, p) = layer(6, 10, 4, 3);
    let x = random(8, 20, 6, 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = moe_forward(&mut tape, &store, &p, &cfg(4, 1), v, 0.0).unwrap();
    let y = tape.value(out.y);
    let per_expert: Vec<Tensor> = p.experts.iter().map(|e| expert_value(&store, e, &x)).collect();
    for r in 0..20 {
        for c in 0..6 {
            let want: f64 = (0..4).map(|e| out.state.masked.get(r, e) * per_expert[e].get(r, c)).sum();
            assert!((y.get(r, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn moe_gradients_match_finite_differences() {
    let (mut store, p) = layer(4, 6, 3, 4);
    let x = random(9, 6, 4, 1.0);
    let c = cfg(3, 2);
    let report = gradcheck_params(
        &mut store,
        |tape, store| {
            let v = tape.constant(x.clone());
            let out = moe_forward(tape, store, &p, &c, v, 0.0)?;
            let sq = tape.mul(out.y, out.y)?;
            let s = tape.sum(sq);
            let z = z_loss(tape, out.logits)?;
            let b = balance_loss(tape, out.probs, &out.state)?;
            let zb = tape.add(z, b)?;
            tape.add(s, zb)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

fn z_value(logits: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let z = z_loss(&mut tape, v).unwrap();
    tape.value(z).item()
}

#[test]
fn z_loss_closed_forms() {
    assert!((z_value(&Tensor::zeros(3, 4)) - 1.921812055672399).abs() < 1e-12);
    assert!((z_value(&Tensor::zeros(3, 4)) - 4f64.ln().powi(2)).abs() < 1e-12);
    assert_eq!(z_value(&Tensor::zeros(2, 1)), 0.0);
}

/// Compensated (Kahan) sum of exponentials without max-shifting.
fn direct_z(logits: &Tensor) -> f64 {
    let mut total = 0.0;
    for row in logits.row_iter() {
        let (mut s, mut comp) = (0.0f64, 0.0f64);
        for &g in row {
            let y = g.exp() - comp;
            let t = s + y;
            comp = (t - s) - y;
            s = t;
        }
        total += s.ln().powi(2);
    }
    total / logits.rows() as f64
}

#[test]
fn z_loss_matches_direct_evaluation() {
    for seed in 0..20 {
        let logits = random(seed, 16, 8, 4.0);
        assert!((z_value(&logits) - direct_z(&logits)).abs() < 1e-10);
    }
    let report = gradcheck(
        &[random(50, 5, 4, 3.0)],
        |tape, v| z_loss(tape, v[0]),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

proptest! {
    #[test]
    fn z_loss_is_nonnegative(seed in 0u64..1000, e in 1usize..9) {
        prop_assert!(z_value(&random(seed, 4, e, 20.0)) >= 0.0);
    }
}

fn balance_value(logits: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let probs = tape.softmax_rows(v).unwrap();
    let state = route(logits, 1).unwrap();
    let b = balance_loss(&mut tape, probs, &state).unwrap();
    tape.value(b).item()
}

#[test]
fn balance_loss_uniform_and_single_expert() {
    assert!((balance_value(&Tensor::zeros(10, 4)) - 1.0).abs() < 1e-15);
    assert!((balance_value(&random(3, 10, 1, 1.0)) - 1.0).abs() < 1e-15);
}

#[test]
fn balance_loss_matches_definition() {
    let logits = random(21, 64, 4, 2.0);
    let p = softmax_rows_tensor(&logits);
    let mut f = [0.0; 4];
    let mut pm = [0.0; 4];
    for r in 0..64 {
        let row = p.row_slice(r);
        let mut best = 0;
        for e in 1..4 {
            if row[e] > row[best] {
                best = e;
            }
        }
        f[best] += 1.0 / 64.0;
        for e in 0..4 {
            pm[e] += row[e] / 64.0;
        }
    }
    let want = 4.0 * (0..4).map(|e| f[e] * pm[e]).sum::<f64>();
    assert!((balance_value(&logits) - want).abs() < 1e-12);
}

#[test]
fn balance_loss_can_fall_below_one() {
    // Each of experts 0 and 1 wins half the tokens but gets ~0 mass from the other half.
    let rows = [
        vec![0.34, 1e-9, 0.33, 0.33 - 1e-9],
        vec![1e-9, 0.34, 0.33, 0.33 - 1e-9],
    ];
    let logits = Tensor::from_rows(
        &rows
            .iter()
            .map(|r| r.iter().map(|p: &f64| p.ln()).collect())
            .collect::<Vec<Vec<f64>>>(),
    )
    .unwrap();
    let v = balance_value(&logits);
    assert!((v - 0.68).abs() < 1e-8);
    assert!(v < 1.0);
}

#[test]
fn second_expert_all_and_threshold() {
    let logits = logits_for(&[0.5, 0.3, 0.15, 0.05]);
    let base = route(&logits, 1).unwrap();
    let mut r = rng::stream(0, 0, 0);
    let all = second_expert(&base, SecondExpertPolicy::All, &mut r).unwrap();
    let nz: Vec<f64> = all.masked.data().iter().copied().filter(|&v| v != 0.0).collect();
    assert_eq!(nz.len(), 2);
    assert!((nz[0] - 0.5).abs() < 1e-12 && (nz[1] - 0.3).abs() < 1e-12);
    let th = second_expert(&base, SecondExpertPolicy::Threshold(0.35), &mut r).unwrap();
    assert_eq!(th.selected, vec![vec![0]]);
    let th = second_expert(&base, SecondExpertPolicy::Threshold(0.25), &mut r).unwrap();
    assert_eq!(th.selected, vec![vec![0, 1]]);
    let none = second_expert(&base, SecondExpertPolicy::None, &mut r).unwrap();
    assert_eq!(none, base);
}

#[test]
fn second_expert_random_frequency() {
    let logits = random(31, 10_000, 4, 1.5);
    let base = route(&logits, 1).unwrap();
    let mut r = rng::stream(5, 0, 0);
    let s = second_expert(&base, SecondExpertPolicy::Random, &mut r).unwrap();
    let mut mean_p = 0.0;
    for row in 0..10_000 {
        let w = base.weights.row_slice(row);
        let mut sorted = w.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        mean_p += sorted[1] / 10_000.0;
    }
    let freq = s.selected.iter().filter(|v| v.len() == 2).count() as f64 / 10_000.0;
    assert!((freq - mean_p).abs() < 0.02, "freq {freq} mean {mean_p}");
}

#[test]
fn policy_strings_round_trip() {
    for p in [
        SecondExpertPolicy::None,
        SecondExpertPolicy::All,
        SecondExpertPolicy::Threshold(0.35),
        SecondExpertPolicy::Random,
    ] {
        assert_eq!(p.to_string().parse::<SecondExpertPolicy>().unwrap(), p);
    }
    assert_eq!("threshold".parse::<SecondExpertPolicy>().unwrap(), SecondExpertPolicy::Threshold(0.2));
    assert!("sometimes".parse::<SecondExpertPolicy>().is_err());
}

#[test]
fn config_validation() {
    assert!(cfg(4, 1).validate().is_ok());
    assert!(cfg(2, 3).validate().is_err());
    assert!(cfg(0, 1).validate().is_err());
    let bad = MoEConfig {
        second_expert: SecondExpertPolicy::All,
        top_k: 2,
        ..MoEConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = MoEConfig {
        lambda_z: -1.0,
        ..MoEConfig::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(MoEConfig::default().lambda_z, 1e-4);
}

#[test]
fn activation_stats() {
    let one = route(&Tensor::zeros(5, 1), 1).unwrap();
    let m = expert_stats(&[1], &[one]).unwrap();
    assert_eq!(m.labels, vec![vec![0; 5]]);

    let mut forced = Tensor::zeros(6, 4);
    for r in 0..6 {
        forced.set(r, 2, 10.0);
    }
    let m = expert_stats(&[3], &[route(&forced, 1).unwrap()]).unwrap();
    assert_eq!(m.labels, vec![vec![2; 6]]);
    assert_eq!(m.histograms, vec![vec![0, 0, 6, 0]]);

    let states: Vec<RouterState> = (0..3).map(|s| route(&random(s, 17, 4, 2.0), 1).unwrap()).collect();
    let m = expert_stats(&[1, 3, 6], &states).unwrap();
    for h in &m.histograms {
        assert_eq!(h.iter().sum::<usize>(), 17);
    }
    let bytes = m.to_container().to_bytes();
    let back = ActivationMap::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn flops_are_nearly_constant_in_expert_count() {
    let f: Vec<f64> = [1, 2, 4, 6, 8]
        .iter()
        .map(|&e| moe_flops_per_token(256, 1024, e, 1) as f64)
        .collect();
    let max = f.iter().cloned().fold(0.0, f64::max);
    let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((max - min) / min < 0.01);
    for (&e, v) in [2usize, 4, 6, 8].iter().zip(&f[1..]) {
        assert_eq!(*v - f[0], (2 * 256 * e) as f64);
    }
}

#[test]
fn measured_flops_match_analytic_count() {
    for e in [1, 2, 4] {
        let (store, p) = layer(8, 16, e, 7);
        let x = random(3, 10, 8, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        moe_forward(&mut tape, &store, &p, &cfg(e, 1), v, 0.0).unwrap();
        assert_eq!(tape.flops().total(), 10 * moe_flops_per_token(8, 16, e, 1));
    }
}
