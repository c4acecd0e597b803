//! Training objectives on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub sem: f64,
    pub z: f64,
    pub blc: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            bce: 1.0,
            dice: 1.0,
            sem: 1.0,
            z: 1e-4,
            blc: 0.0,
            mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("cls", self.cls),
            ("bce", self.bce),
            ("dice", self.dice),
            ("sem", self.sem),
            ("z", self.z),
            ("blc", self.blc),
            ("mask", self.mask),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean of `-log_softmax(logits)[i, targets[i]]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (r, c) = tape.value(logits).dims();
    if targets.len() != r {
        return Err(Error::shape(format!("{} targets for {r} logit rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::config(format!("target class {t} out of range [0, {c})")));
    }
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_cols(lp, targets)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Mean sigmoid binary cross-entropy, `softplus(x) - x t` elementwise.
pub fn bce(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if tape.value(logits).dims() != targets.dims() {
        return Err(Error::shape(format!(
            "bce logits {:?} vs targets {:?}",
            tape.value(logits).dims(),
            targets.dims()
        )));
    }
    let t = tape.constant(targets.clone());
    let sp = tape.softplus(logits);
    let xt = tape.mul(logits, t)?;
    let l = tape.sub(sp, xt)?;
    Ok(tape.mean(l))
}

/// Row-wise `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`, averaged over rows.
pub fn dice(tape: &mut Tape, probs: Var, targets: &Tensor, smooth: f64) -> Result<Var> {
    if tape.value(probs).dims() != targets.dims() {
        return Err(Error::shape(format!(
            "dice probs {:?} vs targets {:?}",
            tape.value(probs).dims(),
            targets.dims()
        )));
    }
    let t = tape.constant(targets.clone());
    let pt = tape.mul(probs, t)?;
    let inter = tape.sum_cols(pt);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let sp = tape.sum_cols(probs);
    let st = tape.sum_cols(t);
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, smooth);
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// BCE plus Dice on sigmoid probabilities of the same logits.
pub fn mask_loss(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let b = bce(tape, logits, targets)?;
    let p = tape.sigmoid(logits);
    let d = dice(tape, p, targets, DICE_SMOOTH)?;
    tape.add(b, d)
}

/// `lambda_m * (BCE + Dice)` for referring mask finetuning.
pub fn ft_mask_loss(tape: &mut Tape, logits: Var, gt: &Tensor, lambda_m: f64) -> Result<Var> {
    let l = mask_loss(tape, logits, gt)?;
    Ok(tape.scale(l, lambda_m))
}

/// Mean over rows of `1 - cos(a_i, b_i)` with norms floored at [`COSINE_EPS`].
pub fn cosine_align(tape: &mut Tape, a: Var, b: Tensor) -> Result<Var> {
    if tape.value(a).dims() != b.dims() {
        return Err(Error::shape(format!(
            "cosine_align {:?} vs {:?}",
            tape.value(a).dims(),
            b.dims()
        )));
    }
    let b = tape.constant(b);
    let ua = unit_rows(tape, a)?;
    let ub = unit_rows(tape, b)?;
    let ab = tape.mul(ua, ub)?;
    let cos = tape.sum_cols(ab);
    let m = tape.mean(cos);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let s = tape.sum_cols(sq);
    let s = tape.clamp_min(s, COSINE_EPS * COSINE_EPS);
    let n = tape.sqrt(s);
    let ones = tape.constant(Tensor::full(tape.value(n).rows(), 1, 1.0));
    let inv = tape.div(ones, n)?;
    tape.mul_column(x, inv)
}

/// Soft IoU between probability rows and binary rows: `sum(p t) / (sum(p) + sum(t) - sum(p t))`.
pub fn soft_iou(p: &[f64], t: &[bool]) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in p.iter().zip(t) {
        sp += p;
        if t {
            inter += p;
            st += 1.0;
        }
    }
    let union = sp + st - inter;
    if union <= 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Greedy one-to-one matching of queries to instances by soft IoU of
/// `sigmoid(mask_logits)`. Repeatedly takes the best remaining pair; ties go to
/// the lower query index, then the lower instance index. Returns the query
/// assigned to each instance.
pub fn greedy_match(mask_logits: &Tensor, gt: &[Vec<bool>]) -> Result<Vec<usize>> {
    let (q, l) = mask_logits.dims();
    if gt.len() > q {
        return Err(Error::config(format!("{} instances exceed {q} queries", gt.len())));
    }
    if let Some(m) = gt.iter().find(|m| m.len() != l) {
        return Err(Error::shape(format!("instance mask of length {} for {l} superpoints", m.len())));
    }
    let probs = mask_logits.map(crate::numerics::tape::sigmoid_scalar);
    let iou: Vec<Vec<f64>> = (0..q)
        .map(|qi| gt.iter().map(|m| soft_iou(probs.row_slice(qi), m)).collect())
        .collect();
    let mut free_q = vec![true; q];
    let mut assign = vec![usize::MAX; gt.len()];
    for _ in 0..gt.len() {
        let mut best: Option<(f64, usize, usize)> = None;
        for (qi, row) in iou.iter().enumerate() {
            if !free_q[qi] {
                continue;
            }
            for (ii, &v) in row.iter().enumerate() {
                if assign[ii] != usize::MAX {
                    continue;
                }
                if best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, qi, ii));
                }
            }
        }
        let (_, qi, ii) = best.expect("free pair exists while instances remain");
        free_q[qi] = false;
        assign[ii] = qi;
    }
    Ok(assign)
}

/// Supervision for one pretraining scene at superpoint level.
#[derive(Clone, Debug)]
pub struct SegTargets {
    pub instances: Vec<Vec<bool>>,
    pub instance_class: Vec<usize>,
    pub sp_class: Vec<usize>,
}

/// Query class logits `[Q x C]`, query mask logits `[Q x L]` and superpoint
/// semantic logits `[L x C]`.
#[derive(Clone, Copy, Debug)]
pub struct SegPredictions {
    pub class_logits: Var,
    pub mask_logits: Var,
    pub sem_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub cls: Var,
    pub bce: Var,
    pub dice: Var,
    pub sem: Var,
    pub total: Var,
}

/// `cls CE + bce BCE + dice Dice + sem BCE_sem` after greedy matching.
/// Unmatched queries are supervised towards the background class.
pub fn seg_loss(tape: &mut Tape, out: &SegPredictions, t: &SegTargets, w: &LossWeights, background: usize) -> Result<SegLoss> {
    let (q, c) = tape.value(out.class_logits).dims();
    if background >= c {
        return Err(Error::config(format!("background class {background} outside {c} channels")));
    }
    if t.instance_class.len() != t.instances.len() {
        return Err(Error::shape("one class per instance required"));
    }
    let assign = greedy_match(tape.value(out.mask_logits), &t.instances)?;
    let mut targets = vec![background; q];
    for (ii, &qi) in assign.iter().enumerate() {
        targets[qi] = t.instance_class[ii];
    }
    let cls = cross_entropy(tape, out.class_logits, &targets)?;
    let (bce_l, dice_l) = if assign.is_empty() {
        let z0 = tape.constant(Tensor::scalar(0.0));
        (z0, z0)
    } else {
        let l = t.instances[0].len();
        let rows = tape.gather_rows(out.mask_logits, &assign)?;
        let gt = Tensor::matrix(
            assign.len(),
            l,
            t.instances.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        let b = bce(tape, rows, &gt)?;
        let p = tape.sigmoid(rows);
        (b, dice(tape, p, &gt, DICE_SMOOTH)?)
    };
    let (l, c2) = tape.value(out.sem_logits).dims();
    if t.sp_class.len() != l {
        return Err(Error::shape(format!("{} superpoint classes for {l} rows", t.sp_class.len())));
    }
    let mut onehot = Tensor::zeros(l, c2);
    for (i, &k) in t.sp_class.iter().enumerate() {
        if k >= c2 {
            return Err(Error::config(format!("superpoint class {k} out of range [0, {c2})")));
        }
        onehot.set(i, k, 1.0);
    }
    let sem = bce(tape, out.sem_logits, &onehot)?;
    let total = weighted_sum(tape, &[(w.cls, cls), (w.bce, bce_l), (w.dice, dice_l), (w.sem, sem)])?;
    Ok(SegLoss {
        cls,
        bce: bce_l,
        dice: dice_l,
        sem,
        total,
    })
}

/// `seg + lambda_z z + lambda_blc blc`.
pub fn inst_loss(tape: &mut Tape, seg: Var, z: Var, blc: Var, w: &LossWeights) -> Result<Var> {
    let zs = tape.scale(z, w.z);
    let total = tape.add(seg, zs)?;
    if w.blc > 0.0 {
        let bs = tape.scale(blc, w.blc);
        tape.add(total, bs)
    } else {
        Ok(total)
    }
}

pub fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = tape.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    acc.ok_or_else(|| Error::Usage("weighted_sum of no terms".into()))
}
