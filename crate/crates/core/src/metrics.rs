//! Point-level IoU of superpoint masks.

use crate::error::{Error, Result};

/// IoU in points of two superpoint masks; empty against empty is 1.
pub fn iou(pred: &[bool], gt: &[bool], sizes: &[usize]) -> Result<f64> {
    if pred.len() != sizes.len() || gt.len() != sizes.len() {
        return Err(Error::shape(format!(
            "masks of length {} and {} for {} superpoints",
            pred.len(),
            gt.len(),
            sizes.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &g), &n) in pred.iter().zip(gt).zip(sizes) {
        if p && g {
            inter += n;
        }
        if p || g {
            union += n;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn union_mask(masks: &[Vec<bool>], len: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; len];
    for m in masks {
        if m.len() != len {
            return Err(Error::shape(format!("mask of length {} for {len} superpoints", m.len())));
        }
        for (o, &b) in out.iter_mut().zip(m) {
            *o |= b;
        }
    }
    Ok(out)
}

/// One referring expression: predicted masks, referenced ground-truth masks and
/// the point count of every superpoint.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub pred: Vec<Vec<bool>>,
    pub gt: Vec<Vec<bool>>,
    pub sizes: Vec<usize>,
}

impl MaskPair {
    /// With `merge`, predictions and references are each unioned into one
    /// region. Otherwise `pred[j]` is scored against `gt[j]` and averaged;
    /// with no references the predictions are scored against the empty mask.
    pub fn iou(&self, merge: bool) -> Result<f64> {
        let l = self.sizes.len();
        if merge {
            return iou(&union_mask(&self.pred, l)?, &union_mask(&self.gt, l)?, &self.sizes);
        }
        if self.gt.is_empty() {
            return iou(&union_mask(&self.pred, l)?, &vec![false; l], &self.sizes);
        }
        if self.pred.len() != self.gt.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} references without merging",
                self.pred.len(),
                self.gt.len()
            )));
        }
        let mut s = 0.0;
        for (p, g) in self.pred.iter().zip(&self.gt) {
            s += iou(p, g, &self.sizes)?;
        }
        Ok(s / self.gt.len() as f64)
    }
}

/// Mean IoU over expressions; 0 pairs gives 0.
pub fn miou(pairs: &[MaskPair], merge: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for p in pairs {
        s += p.iou(merge)?;
    }
    Ok(s / pairs.len() as f64)
}

/// Binary mask `logits > 0`.
pub fn threshold(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&v| v > 0.0).collect()
}
