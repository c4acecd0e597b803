//! Sparse mixture-of-experts: gating, top-K routing, dispatch and combine,
//! router regularizers and utilization statistics.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::softmax_rows_tensor;
use crate::numerics::{FlopKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene::container::Container;

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SecondExpertPolicy {
    None,
    All,
    Threshold(f64),
    Random,
}

impl fmt::Display for SecondExpertPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecondExpertPolicy::None => write!(f, "none"),
            SecondExpertPolicy::All => write!(f, "all"),
            SecondExpertPolicy::Threshold(t) => write!(f, "threshold:{t}"),
            SecondExpertPolicy::Random => write!(f, "random"),
        }
    }
}

impl FromStr for SecondExpertPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SecondExpertPolicy::None),
            "all" => Ok(SecondExpertPolicy::All),
            "random" => Ok(SecondExpertPolicy::Random),
            "threshold" => Ok(SecondExpertPolicy::Threshold(DEFAULT_THRESHOLD)),
            _ => match s.strip_prefix("threshold:").map(str::parse::<f64>) {
                Some(Ok(t)) => Ok(SecondExpertPolicy::Threshold(t)),
                _ => Err(Error::config(format!(
                    "unknown second-expert policy `{s}` (none, all, threshold[:tau], random)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for SecondExpertPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SecondExpertPolicy> for String {
    fn from(p: SecondExpertPolicy) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoEConfig {
    pub experts: usize,
    pub top_k: usize,
    pub lambda_z: f64,
    pub lambda_blc: f64,
    pub second_expert: SecondExpertPolicy,
}

impl Default for MoEConfig {
    fn default() -> Self {
        MoEConfig {
            experts: 4,
            top_k: 1,
            lambda_z: 1e-4,
            lambda_blc: 0.0,
            second_expert: SecondExpertPolicy::None,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::config(format!(
                "need 1 <= top_k <= experts, got top_k={} experts={}",
                self.top_k, self.experts
            )));
        }
        for (name, v) in [("lambda_z", self.lambda_z), ("lambda_blc", self.lambda_blc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        match self.second_expert {
            SecondExpertPolicy::None => {}
            _ if self.top_k != 1 || self.experts < 2 => {
                return Err(Error::config("second-expert policies need top_k = 1 and at least 2 experts"))
            }
            SecondExpertPolicy::Threshold(t) if !(0.0..=1.0).contains(&t) => {
                return Err(Error::config(format!("threshold must lie in [0, 1], got {t}")))
            }
            _ => {}
        }
        Ok(())
    }
}

/// `LN -> Linear(D, F) -> GELU -> Dropout -> Linear(F, D)`; also used as the dense FFN.
#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        ExpertParams {
            ln_g: store.add_full(format!("{prefix}.ln.g"), 1, dim, 1.0),
            ln_b: store.add_full(format!("{prefix}.ln.b"), 1, dim, 0.0),
            w1: store.add_uniform(format!("{prefix}.w1"), dim, ffn, 1.0 / (dim as f64).sqrt(), rng),
            b1: store.add_full(format!("{prefix}.b1"), 1, ffn, 0.0),
            w2: store.add_uniform(format!("{prefix}.w2"), ffn, dim, 1.0 / (ffn as f64).sqrt(), rng),
            b2: store.add_full(format!("{prefix}.b2"), 1, dim, 0.0),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |n: &str| {
            let name = format!("{prefix}.{n}");
            store.id(&name).ok_or_else(|| Error::Missing(format!("parameter {name}")))
        };
        Ok(ExpertParams {
            ln_g: id("ln.g")?,
            ln_b: id("ln.b")?,
            w1: id("w1")?,
            b1: id("b1")?,
            w2: id("w2")?,
            b2: id("b2")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let g = tape.param(store, self.ln_g);
        let b = tape.param(store, self.ln_b);
        let h = tape.layer_norm(x, g, b, LN_EPS)?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let h = tape.linear(h, w1, Some(b1))?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, dropout)?;
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        tape.linear(h, w2, Some(b2))
    }
}

/// Gate and experts of one MoE layer. With a single expert there is no gate.
#[derive(Clone, Debug)]
pub struct MoEParams {
    pub gate: Option<ParamId>,
    pub experts: Vec<ExpertParams>,
}

impl MoEParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ffn: usize,
        experts: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gate = (experts > 1)
            .then(|| store.add_uniform(format!("{prefix}.gate"), dim, experts, 1.0 / (dim as f64).sqrt(), rng));
        let experts = (0..experts)
            .map(|e| ExpertParams::new(store, &format!("{prefix}.expert{e}"), dim, ffn, rng))
            .collect();
        MoEParams { gate, experts }
    }

    pub fn from_store(store: &ParamStore, prefix: &str, experts: usize) -> Result<Self> {
        let gate = if experts > 1 {
            let name = format!("{prefix}.gate");
            Some(store.id(&name).ok_or_else(|| Error::Missing(format!("parameter {name}")))?)
        } else {
            None
        };
        let experts = (0..experts)
            .map(|e| ExpertParams::from_store(store, &format!("{prefix}.expert{e}")))
            .collect::<Result<_>>()?;
        Ok(MoEParams { gate, experts })
    }
}

/// Per-token gating logits `X W_E`.
pub fn gate(tape: &mut Tape, x: Var, w_e: Var) -> Result<Var> {
    let prev = tape.set_flop_kind(FlopKind::Gate);
    let out = tape.matmul(x, w_e);
    tape.set_flop_kind(prev);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub logits: Tensor,
    /// Row-wise softmax of the logits.
    pub weights: Tensor,
    /// `weights` with all but the selected entries zeroed.
    pub masked: Tensor,
    /// Selected experts per token, highest weight first.
    pub selected: Vec<Vec<usize>>,
    pub load: Vec<usize>,
}

impl RouterState {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn experts(&self) -> usize {
        self.load.len()
    }

    /// Top-1 expert of each token.
    pub fn top1(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s[0]).collect()
    }

    fn rebuild(&mut self) {
        let e = self.experts();
        self.masked = Tensor::zeros(self.tokens(), e);
        self.load = vec![0; e];
        for (r, sel) in self.selected.iter().enumerate() {
            for &k in sel {
                self.masked.set(r, k, self.weights.get(r, k));
                self.load[k] += 1;
            }
        }
    }
}

/// Experts of one row ordered by descending weight, ties to the lower index.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Softmax routing keeping the top `k` raw weights per token.
pub fn route(logits: &Tensor, k: usize) -> Result<RouterState> {
    let e = logits.cols();
    if k == 0 || k > e {
        return Err(Error::config(format!("top_k {k} outside [1, {e}]")));
    }
    let weights = softmax_rows_tensor(logits);
    if !weights.is_finite() {
        return Err(Error::Numeric("router weights are not finite".into()));
    }
    let selected = weights
        .row_iter()
        .map(|row| {
            let mut r = ranked(row);
            r.truncate(k);
            r
        })
        .collect();
    let mut state = RouterState {
        logits: logits.clone(),
        weights,
        masked: Tensor::zeros(0, 0),
        selected,
        load: Vec::new(),
    };
    state.load = vec![0; e];
    state.rebuild();
    Ok(state)
}

/// Optionally activates each token's rank-2 expert on top of top-1 routing.
pub fn second_expert(state: &RouterState, policy: SecondExpertPolicy, rng: &mut impl Rng) -> Result<RouterState> {
    if policy == SecondExpertPolicy::None {
        return Ok(state.clone());
    }
    if state.selected.iter().any(|s| s.len() != 1) {
        return Err(Error::Usage("second-expert policies apply to top-1 routing".into()));
    }
    if state.experts() < 2 {
        return Ok(state.clone());
    }
    let mut out = state.clone();
    for (r, sel) in out.selected.iter_mut().enumerate() {
        let row = state.weights.row_slice(r);
        let second = ranked(row)[1];
        let p = row[second];
        let take = match policy {
            SecondExpertPolicy::All => true,
            SecondExpertPolicy::Threshold(t) => p > t,
            SecondExpertPolicy::Random => rng.gen::<f64>() < p,
            SecondExpertPolicy::None => false,
        };
        if take {
            sel.push(second);
        }
    }
    out.rebuild();
    Ok(out)
}

/// Differentiable routing outputs of one layer.
#[derive(Clone, Debug)]
pub struct MoEOutput {
    pub y: Var,
    pub logits: Var,
    pub probs: Var,
    pub state: RouterState,
}

fn router(tape: &mut Tape, store: &ParamStore, p: &MoEParams, cfg: &MoEConfig, x: Var) -> Result<(Var, Var, RouterState)> {
    let l = tape.value(x).rows();
    if p.experts.len() != cfg.experts {
        return Err(Error::config(format!(
            "{} experts built, config says {}",
            p.experts.len(),
            cfg.experts
        )));
    }
    let (logits, probs) = match p.gate {
        Some(w) => {
            let w = tape.param(store, w);
            let logits = gate(tape, x, w)?;
            let probs = tape.softmax_rows(logits)?;
            (logits, probs)
        }
        None => (tape.constant(Tensor::zeros(l, 1)), tape.constant(Tensor::full(l, 1, 1.0))),
    };
    let mut state = route(tape.value(logits), cfg.top_k)?;
    if cfg.second_expert != SecondExpertPolicy::None {
        let mut rng = tape.next_stream();
        state = second_expert(&state, cfg.second_expert, &mut rng)?;
    }
    Ok((logits, probs, state))
}

/// Sparse forward: each expert runs only on the tokens routed to it.
pub fn moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoEParams,
    cfg: &MoEConfig,
    x: Var,
    dropout: f64,
) -> Result<MoEOutput> {
    cfg.validate()?;
    let (l, d) = tape.value(x).dims();
    let (logits, probs, state) = router(tape, store, p, cfg, x)?;
    let prev = tape.set_flop_kind(FlopKind::Expert);
    let mut parts = Vec::new();
    for (e, expert) in p.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..l).filter(|&r| state.selected[r].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let ye = expert.forward(tape, store, xe, dropout)?;
        let pe = tape.gather_rows(probs, &rows)?;
        let we = tape.pick_cols(pe, &vec![e; rows.len()])?;
        let ye = tape.mul_column(ye, we)?;
        parts.push((ye, rows));
    }
    tape.set_flop_kind(prev);
    let y = tape.index_add_rows(l, d, &parts)?;
    Ok(MoEOutput { y, logits, probs, state })
}

/// Reference evaluation running every expert on every token and summing with
/// the masked weights.
pub fn moe_forward_dense(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MoEParams,
    cfg: &MoEConfig,
    x: Var,
    dropout: f64,
) -> Result<MoEOutput> {
    cfg.validate()?;
    let (logits, probs, state) = router(tape, store, p, cfg, x)?;
    let mut mask = Tensor::zeros(state.tokens(), state.experts());
    for (r, sel) in state.selected.iter().enumerate() {
        for &e in sel {
            mask.set(r, e, 1.0);
        }
    }
    let mask = tape.constant(mask);
    let masked = tape.mul(probs, mask)?;
    let prev = tape.set_flop_kind(FlopKind::Expert);
    let mut y: Option<Var> = None;
    for (e, expert) in p.experts.iter().enumerate() {
        let ye = expert.forward(tape, store, x, dropout)?;
        let we = tape.slice_cols(masked, e, 1)?;
        let term = tape.mul_column(ye, we)?;
        y = Some(match y {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    tape.set_flop_kind(prev);
    Ok(MoEOutput {
        y: y.expect("at least one expert"),
        logits,
        probs,
        state,
    })
}

/// `(1/S) sum_s logsumexp(g_s)^2`.
pub fn z_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lse = tape.logsumexp_rows(logits)?;
    let sq = tape.mul(lse, lse)?;
    Ok(tape.mean(sq))
}

/// `E * sum_e f_e P_e`: `f_e` is the hard top-1 fraction, `P_e` the mean router
/// probability (the only differentiable part).
pub fn balance_loss(tape: &mut Tape, probs: Var, state: &RouterState) -> Result<Var> {
    let e = state.experts();
    let l = state.tokens();
    if l == 0 {
        return Err(Error::invariant("balance loss over zero tokens"));
    }
    let mut f = vec![0.0; e];
    for t in state.top1() {
        f[t] += 1.0 / l as f64;
    }
    let mean_p = tape.mean_rows(probs);
    let f = tape.constant(Tensor::row(&f));
    let prod = tape.mul(mean_p, f)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, e as f64))
}

/// Dominant expert per token and load histogram for each MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    /// 1-based block indices of the MoE layers.
    pub layers: Vec<usize>,
    pub experts: usize,
    pub labels: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<usize>>,
}

pub const ACTIVATION_KIND: &str = "activations";

/// Builds the activation map; `tokens` are the superpoints of one scene.
pub fn expert_stats(layers: &[usize], states: &[RouterState]) -> Result<ActivationMap> {
    if layers.len() != states.len() {
        return Err(Error::shape(format!("{} layer ids for {} states", layers.len(), states.len())));
    }
    let experts = states.first().map_or(1, RouterState::experts);
    let mut labels = Vec::new();
    let mut histograms = Vec::new();
    for s in states {
        if s.experts() != experts {
            return Err(Error::shape("layers disagree on the expert count"));
        }
        let top = s.top1();
        let mut h = vec![0; experts];
        for &t in &top {
            h[t] += 1;
        }
        labels.push(top);
        histograms.push(h);
    }
    Ok(ActivationMap {
        layers: layers.to_vec(),
        experts,
        labels,
        histograms,
    })
}

impl ActivationMap {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ACTIVATION_KIND);
        let n = self.layers.len();
        let l = self.labels.first().map_or(0, Vec::len);
        c.set_meta("layers", n);
        c.set_meta("experts", self.experts);
        c.set_meta("superpoints", l);
        c.push_i64("layer_ids", n, 1, self.layers.iter().map(|&v| v as i64).collect());
        c.push_i64("labels", n, l, self.labels.iter().flatten().map(|&v| v as i64).collect());
        c.push_i64(
            "histograms",
            n,
            self.experts,
            self.histograms.iter().flatten().map(|&v| v as i64).collect(),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ACTIVATION_KIND {
            return Err(Error::Parse {
                location: "kind".into(),
                message: format!("expected activations, found `{}`", c.kind),
            });
        }
        let experts: usize = c.parse_meta("experts")?;
        let idx = |v: &[i64]| -> Result<Vec<usize>> {
            v.iter()
                .map(|&x| usize::try_from(x).map_err(|_| Error::invariant(format!("negative index {x}"))))
                .collect()
        };
        let (_, _, layers) = c.i64s("layer_ids")?;
        let (n, l, labels) = c.i64s("labels")?;
        let (hn, he, hist) = c.i64s("histograms")?;
        if n != layers.len() || hn != n || he != experts {
            return Err(Error::invariant("activation map sections disagree"));
        }
        let rows = |v: Vec<usize>, w: usize| -> Vec<Vec<usize>> {
            if w == 0 {
                vec![Vec::new(); n]
            } else {
                v.chunks(w).map(<[usize]>::to_vec).collect()
            }
        };
        Ok(ActivationMap {
            layers: idx(layers)?,
            experts,
            labels: rows(idx(labels)?, l),
            histograms: rows(idx(hist)?, experts),
        })
    }
}

/// Forward FLOPs per token of one K=1 MoE layer: the gate plus one expert.
pub fn moe_flops_per_token(dim: usize, ffn: usize, experts: usize, top_k: usize) -> u64 {
    let gate = if experts > 1 { 2 * dim * experts } else { 0 };
    (gate + top_k * 4 * dim * ffn) as u64
}

#[cfg(test)]
mod tests;
