//! The MoE superpoint transformer: interleaved dense and MoE blocks, the
//! information aggregation module (roles R1, R2, R3), and the heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, INPUT_DIM};
use crate::error::{Error, Result};
use crate::losses::SegPredictions;
use crate::moe::{moe_forward, moe_flops_per_token, ExpertParams, MoEConfig, MoEParams, RouterState, LN_EPS};
use crate::numerics::{rng, FlopKind, FlopLedger, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MestConfig {
    pub depth: usize,
    /// 1-based indices of the blocks whose FFN is replaced by an MoE layer.
    pub moe_layers: Vec<usize>,
    pub dim: usize,
    pub ffn: usize,
    pub heads: usize,
    pub moe: MoEConfig,
    /// Output channels of the classification head; the last one is background.
    pub n_classes: usize,
    /// Width of the mask embedding; `None` means `dim`.
    pub mask_dim: Option<usize>,
    /// Dropout inside FFNs and experts.
    pub dropout: f64,
    /// Learnable instance queries used for pretraining.
    pub n_queries: usize,
    pub encoder_hidden: usize,
}

impl Default for MestConfig {
    fn default() -> Self {
        MestConfig {
            depth: 6,
            moe_layers: vec![1, 3, 6],
            dim: 256,
            ffn: 1024,
            heads: 8,
            moe: MoEConfig::default(),
            n_classes: 199,
            mask_dim: None,
            dropout: 0.1,
            n_queries: 12,
            encoder_hidden: 64,
        }
    }
}

impl MestConfig {
    pub fn mask_width(&self) -> usize {
        self.mask_dim.unwrap_or(self.dim)
    }

    pub fn background(&self) -> usize {
        self.n_classes - 1
    }

    pub fn is_moe(&self, block: usize) -> bool {
        self.moe_layers.contains(&(block + 1))
    }

    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if let Some(&bad) = self.moe_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::config(format!("moe layer {bad} outside [1, {}]", self.depth)));
        }
        let mut sorted = self.moe_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.moe_layers.len() {
            return Err(Error::config("moe_layers has duplicates"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn == 0 || self.mask_width() == 0 || self.encoder_hidden == 0 {
            return Err(Error::config("ffn, mask_dim and encoder_hidden must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must include at least one class and background"));
        }
        if self.n_queries == 0 {
            return Err(Error::config("n_queries must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        LinearParams {
            w: store.add_uniform(format!("{name}.w"), din, dout, bound, rng),
            b: bias.then(|| store.add_full(format!("{name}.b"), 1, dout, 0.0)),
        }
    }

    pub fn from_store(store: &ParamStore, name: &str, bias: bool) -> Result<Self> {
        let id = |n: String| store.id(&n).ok_or(Error::Missing(format!("parameter {n}")));
        Ok(LinearParams {
            w: id(format!("{name}.w"))?,
            b: if bias { Some(id(format!("{name}.b"))?) } else { None },
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormParams {
            g: store.add_full(format!("{name}.g"), 1, dim, 1.0),
            b: store.add_full(format!("{name}.b"), 1, dim, 0.0),
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let id = |n: String| store.id(&n).ok_or(Error::Missing(format!("parameter {n}")));
        Ok(LayerNormParams {
            g: id(format!("{name}.g"))?,
            b: id(format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.g);
        let b = tape.param(store, self.b);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Bias-free query, key, value and output projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |n: &str| LinearParams::new(store, &format!("{name}.{n}"), dim, dim, false, rng);
        AttentionParams {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let lin = |n: &str| LinearParams::from_store(store, &format!("{name}.{n}"), false);
        Ok(AttentionParams {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
        })
    }
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`. Also returns
/// the per-head attention weight matrices.
pub fn attention_weights(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q_in).cols();
    if tape.value(kv_in).cols() != d {
        return Err(Error::shape(format!(
            "attention query width {d} vs key width {}",
            tape.value(kv_in).cols()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible into {heads} heads")));
    }
    let prev = tape.set_flop_kind(FlopKind::Attention);
    let out = (|| {
        let q = p.q.forward(tape, store, q_in)?;
        let k = p.k.forward(tape, store, kv_in)?;
        let v = p.v.forward(tape, store, kv_in)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((p.o.forward(tape, store, cat)?, weights))
    })();
    tape.set_flop_kind(prev);
    out
}

pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<Var> {
    Ok(attention_weights(tape, store, p, q_in, kv_in, heads)?.0)
}

/// Cross-attention, residual and LayerNorm, then self-attention over the
/// updated queries, residual and LayerNorm.
#[derive(Clone, Copy, Debug)]
pub struct InfoAggParams {
    pub cross: AttentionParams,
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
}

impl InfoAggParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        InfoAggParams {
            cross: AttentionParams::new(store, &format!("{name}.cross"), dim, rng),
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), dim),
            self_attn: AttentionParams::new(store, &format!("{name}.self"), dim, rng),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), dim),
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(InfoAggParams {
            cross: AttentionParams::from_store(store, &format!("{name}.cross"))?,
            ln1: LayerNormParams::from_store(store, &format!("{name}.ln1"))?,
            self_attn: AttentionParams::from_store(store, &format!("{name}.self"))?,
            ln2: LayerNormParams::from_store(store, &format!("{name}.ln2"))?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Superpoint refinement: `F_sp` attends to itself.
    R1,
    /// Prompt interaction: `F_prt` attends to `F_sp`.
    R2,
    /// Mask decoding: `F_seg` attends to `F_sp'`.
    R3,
}

/// Returns the updated query set (superpoints for R1, query tokens otherwise).
pub fn info_agg(
    tape: &mut Tape,
    store: &ParamStore,
    p: &InfoAggParams,
    role: Role,
    features: Var,
    queries: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let q = match (role, queries) {
        (Role::R1, None) => features,
        (Role::R2 | Role::R3, Some(q)) => q,
        (Role::R1, Some(_)) => return Err(Error::Usage("R1 takes no query tokens".into())),
        (_, None) => return Err(Error::Usage(format!("{role:?} needs query tokens"))),
    };
    let a = attention(tape, store, &p.cross, q, features, heads)?;
    let h = tape.add(q, a)?;
    let h = p.ln1.forward(tape, store, h)?;
    let s = attention(tape, store, &p.self_attn, h, h, heads)?;
    let h2 = tape.add(h, s)?;
    p.ln2.forward(tape, store, h2)
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(ExpertParams),
    Moe(MoEParams),
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub r1: InfoAggParams,
    pub r2: InfoAggParams,
    pub ff: FeedForward,
    pub ln: LayerNormParams,
}

/// Parameter handles of the whole network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: MestConfig,
    pub encoder: EncoderParams,
    pub blocks: Vec<BlockParams>,
    pub r3: InfoAggParams,
    pub cls: LinearParams,
    pub mask_kernel: LinearParams,
    pub mask_sp: LinearParams,
    pub queries: ParamId,
    pub seg_proj: LinearParams,
}

const STREAM_INIT: u64 = 0x1417_0001;

impl Model {
    pub fn new(cfg: &MestConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let r = &mut rng::stream(seed, STREAM_INIT, 0);
        let d = cfg.dim;
        let encoder = EncoderParams::new(store, cfg.encoder_hidden, d, r);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("mest.block{}", i + 1);
                let r1 = InfoAggParams::new(store, &format!("{name}.r1"), d, r);
                let r2 = InfoAggParams::new(store, &format!("{name}.r2"), d, r);
                let ff = if cfg.is_moe(i) {
                    FeedForward::Moe(MoEParams::new(store, &format!("{name}.moe"), d, cfg.ffn, cfg.moe.experts, r))
                } else {
                    FeedForward::Dense(ExpertParams::new(store, &format!("{name}.ffn"), d, cfg.ffn, r))
                };
                let ln = LayerNormParams::new(store, &format!("{name}.ln"), d);
                BlockParams { r1, r2, ff, ln }
            })
            .collect();
        let m = cfg.mask_width();
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            blocks,
            r3: InfoAggParams::new(store, "mest.r3", d, r),
            cls: LinearParams::new(store, "head.cls", d, cfg.n_classes, true, r),
            mask_kernel: LinearParams::new(store, "head.mask_kernel", d, m, true, r),
            mask_sp: LinearParams::new(store, "head.mask_sp", d, m, true, r),
            queries: store.add_uniform("queries", cfg.n_queries, d, 1.0, r),
            seg_proj: LinearParams::new(store, "seg_proj", d, d, true, r),
        })
    }

    /// Rebinds handles to an existing store, checking every tensor shape.
    pub fn from_store(cfg: &MestConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut fresh = ParamStore::new();
        Model::new(cfg, &mut fresh, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::config(format!(
                "configuration expects {} tensors, store has {}",
                fresh.len(),
                store.len()
            )));
        }
        for (_, p) in fresh.iter() {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::config(format!("store lacks parameter {}", p.name)))?;
            if store.value(id).dims() != p.value.dims() {
                return Err(Error::config(format!(
                    "parameter {} is {:?}, configuration expects {:?}",
                    p.name,
                    store.value(id).dims(),
                    p.value.dims()
                )));
            }
        }
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("mest.block{}", i + 1);
                Ok(BlockParams {
                    r1: InfoAggParams::from_store(store, &format!("{name}.r1"))?,
                    r2: InfoAggParams::from_store(store, &format!("{name}.r2"))?,
                    ff: if cfg.is_moe(i) {
                        FeedForward::Moe(MoEParams::from_store(store, &format!("{name}.moe"), cfg.moe.experts)?)
                    } else {
                        FeedForward::Dense(ExpertParams::from_store(store, &format!("{name}.ffn"))?)
                    },
                    ln: LayerNormParams::from_store(store, &format!("{name}.ln"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            cfg: cfg.clone(),
            encoder: EncoderParams::from_store(store)?,
            blocks,
            r3: InfoAggParams::from_store(store, "mest.r3")?,
            cls: LinearParams::from_store(store, "head.cls", true)?,
            mask_kernel: LinearParams::from_store(store, "head.mask_kernel", true)?,
            mask_sp: LinearParams::from_store(store, "head.mask_sp", true)?,
            queries: store.id("queries").ok_or(Error::Missing("parameter queries".into()))?,
            seg_proj: LinearParams::from_store(store, "seg_proj", true)?,
        })
    }
}

/// Routing record of one MoE block.
#[derive(Clone, Debug)]
pub struct MoERecord {
    /// 1-based block index.
    pub layer: usize,
    pub logits: Var,
    pub probs: Var,
    pub state: RouterState,
}

#[derive(Clone, Debug)]
pub struct MestOutput {
    /// Final superpoint features `F_sp'`, also the visual tokens.
    pub tokens: Var,
    /// Prompt tokens after the R2 stages.
    pub prompt: Option<Var>,
    pub router: Vec<MoERecord>,
}

pub fn mest_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    f_sp: Var,
    f_prt: Option<Var>,
) -> Result<MestOutput> {
    let cfg = &model.cfg;
    let d = tape.value(f_sp).cols();
    if d != cfg.dim {
        return Err(Error::shape(format!("features have width {d}, model dim is {}", cfg.dim)));
    }
    let mut x = f_sp;
    let mut prompt = f_prt;
    let mut router = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        x = info_agg(tape, store, &block.r1, Role::R1, x, None, cfg.heads)?;
        if let Some(p) = prompt {
            prompt = Some(info_agg(tape, store, &block.r2, Role::R2, x, Some(p), cfg.heads)?);
        }
        let y = match &block.ff {
            FeedForward::Dense(ffn) => {
                let prev = tape.set_flop_kind(FlopKind::Ffn);
                let y = ffn.forward(tape, store, x, cfg.dropout);
                tape.set_flop_kind(prev);
                y?
            }
            FeedForward::Moe(moe) => {
                let out = moe_forward(tape, store, moe, &cfg.moe, x, cfg.dropout)?;
                router.push(MoERecord {
                    layer: i + 1,
                    logits: out.logits,
                    probs: out.probs,
                    state: out.state,
                });
                out.y
            }
        };
        let h = tape.add(x, y)?;
        x = block.ln.forward(tape, store, h)?;
    }
    Ok(MestOutput {
        tokens: x,
        prompt,
        router,
    })
}

fn with_kind<T>(tape: &mut Tape, kind: FlopKind, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
    let prev = tape.set_flop_kind(kind);
    let out = f(tape);
    tape.set_flop_kind(prev);
    out
}

/// Class logits `[rows x n_classes]` from a single linear layer.
pub fn classify(tape: &mut Tape, store: &ParamStore, model: &Model, x: Var) -> Result<Var> {
    with_kind(tape, FlopKind::Head, |t| model.cls.forward(t, store, x))
}

/// Mask logits `[queries x L]`: dot products between query kernels and
/// superpoint mask embeddings.
pub fn mask_decode(tape: &mut Tape, store: &ParamStore, model: &Model, f_seg: Var, f_sp: Var) -> Result<Var> {
    with_kind(tape, FlopKind::Head, |t| {
        let kernel = model.mask_kernel.forward(t, store, f_seg)?;
        let emb = model.mask_sp.forward(t, store, f_sp)?;
        let et = t.transpose(emb);
        t.matmul(kernel, et)
    })
}

/// Outputs of instance decoding with the learnable queries.
#[derive(Clone, Debug)]
pub struct InstanceOutputs {
    pub pred: SegPredictions,
    pub mest: MestOutput,
}

/// Full pretraining forward from `F_sp`.
pub fn instance_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    f_sp: Var,
    f_prt: Option<Var>,
) -> Result<InstanceOutputs> {
    let mest = mest_forward(tape, store, model, f_sp, f_prt)?;
    let q = tape.param(store, model.queries);
    let q = info_agg(tape, store, &model.r3, Role::R3, mest.tokens, Some(q), model.cfg.heads)?;
    let class_logits = classify(tape, store, model, q)?;
    let mask_logits = mask_decode(tape, store, model, q, mest.tokens)?;
    let sem_logits = classify(tape, store, model, mest.tokens)?;
    Ok(InstanceOutputs {
        pred: SegPredictions {
            class_logits,
            mask_logits,
            sem_logits,
        },
        mest,
    })
}

/// Referring mask logits `[rows x L]` from hidden states and cached `F_sp'`.
pub fn referring_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    hidden: Var,
    f_sp_prime: Var,
) -> Result<Var> {
    let f_seg = with_kind(tape, FlopKind::Head, |t| model.seg_proj.forward(t, store, hidden))?;
    let f_seg = info_agg(tape, store, &model.r3, Role::R3, f_sp_prime, Some(f_seg), model.cfg.heads)?;
    mask_decode(tape, store, model, f_seg, f_sp_prime)
}

/// Matrix-product FLOPs of attention with `lq` queries over `lk` keys.
pub fn attention_flops(lq: usize, lk: usize, d: usize) -> u64 {
    (2 * lq * d * d + 4 * lk * d * d + 2 * lq * d * d + 4 * lq * lk * d) as u64
}

fn info_agg_flops(lq: usize, lk: usize, d: usize) -> u64 {
    attention_flops(lq, lk, d) + attention_flops(lq, lq, d)
}

/// Analytic forward FLOPs of `mest_forward` on `l` superpoints with `t` prompt
/// tokens, assuming top-K routing without second-expert activations.
pub fn mest_flops(cfg: &MestConfig, l: usize, t: usize) -> FlopLedger {
    let d = cfg.dim;
    let mut ledger = FlopLedger::new();
    for i in 0..cfg.depth {
        let mut attn = info_agg_flops(l, l, d);
        if t > 0 {
            attn += info_agg_flops(t, l, d);
        }
        ledger.record(FlopKind::Attention, attn);
        if cfg.is_moe(i) {
            let per = moe_flops_per_token(d, cfg.ffn, cfg.moe.experts, cfg.moe.top_k);
            let gate = if cfg.moe.experts > 1 { 2 * d * cfg.moe.experts } else { 0 } as u64;
            ledger.record(FlopKind::Gate, gate * l as u64);
            ledger.record(FlopKind::Expert, (per - gate) * l as u64);
        } else {
            ledger.record(FlopKind::Ffn, (4 * d * cfg.ffn * l) as u64);
        }
    }
    ledger
}

/// Analytic forward FLOPs of [`instance_forward`] plus the encoder on `m` voxels.
pub fn instance_flops(cfg: &MestConfig, m: usize, l: usize, t: usize) -> FlopLedger {
    let d = cfg.dim;
    let q = cfg.n_queries;
    let mw = cfg.mask_width();
    let mut ledger = mest_flops(cfg, l, t);
    ledger.record(
        FlopKind::Encoder,
        (2 * m * (INPUT_DIM * cfg.encoder_hidden + cfg.encoder_hidden * d)) as u64,
    );
    ledger.record(FlopKind::Attention, info_agg_flops(q, l, d));
    ledger.record(
        FlopKind::Head,
        (2 * q * d * cfg.n_classes + 2 * l * d * cfg.n_classes + 2 * q * d * mw + 2 * l * d * mw + 2 * q * mw * l) as u64,
    );
    ledger
}
