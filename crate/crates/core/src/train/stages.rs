//! Feature alignment, instance pretraining and referring-mask finetuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::collapse::{CollapseDetector, CollapseWarning};
use super::optim::AdamW;
use super::{PreparedScene, StageConfig, TrainConfig};
use crate::encoder::{aggregate_prompt, superpoint_features};
use crate::error::{Error, Result};
use crate::losses::{cosine_align, ft_mask_loss, greedy_match, inst_loss, seg_loss, LossWeights, SegLoss};
use crate::metrics::{miou, threshold, MaskPair};
use crate::model::{instance_forward, mest_forward, referring_forward, MestOutput, Model};
use crate::moe::{balance_loss, z_loss, RouterState};
use crate::numerics::{rng, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Stage2,
    Stage3,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Stage3 => "stage3",
            Phase::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        Ok(match s {
            "stage1" => Phase::Stage1,
            "stage2" => Phase::Stage2,
            "stage3" => Phase::Stage3,
            "done" => Phase::Done,
            _ => return Err(Error::config(format!("unknown phase `{s}`"))),
        })
    }

    fn tag(self) -> u64 {
        0x7A41_0000
            + match self {
                Phase::Stage1 => 1,
                Phase::Stage2 => 2,
                Phase::Stage3 => 3,
                Phase::Done => 4,
            }
    }
}

/// Terms of the pretraining objective for one scene.
#[derive(Clone, Debug)]
pub struct InstTerms {
    pub seg: SegLoss,
    pub z: Var,
    pub blc: Var,
    pub total: Var,
    pub router: Vec<(usize, RouterState)>,
}

/// `L_inst` from superpoint features: segmentation loss plus the router
/// regularizers averaged over the MoE layers.
pub fn inst_objective(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    f_sp: Var,
    scene: &PreparedScene,
    w: &LossWeights,
) -> Result<InstTerms> {
    let out = instance_forward(tape, store, model, f_sp, None)?;
    let seg = seg_loss(tape, &out.pred, &scene.targets, w, model.cfg.background())?;
    let (z, blc) = router_terms(tape, &out.mest)?;
    let total = inst_loss(tape, seg.total, z, blc, w)?;
    Ok(InstTerms {
        seg,
        z,
        blc,
        total,
        router: out.mest.router.iter().map(|r| (r.layer, r.state.clone())).collect(),
    })
}

fn router_terms(tape: &mut Tape, mest: &MestOutput) -> Result<(Var, Var)> {
    if mest.router.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, zero));
    }
    let n = mest.router.len() as f64;
    let mut zs = Vec::new();
    let mut bs = Vec::new();
    for r in &mest.router {
        zs.push(z_loss(tape, r.logits)?);
        bs.push(balance_loss(tape, r.probs, &r.state)?);
    }
    let mean = |tape: &mut Tape, v: Vec<Var>| -> Result<Var> {
        let mut acc = v[0];
        for &x in &v[1..] {
            acc = tape.add(acc, x)?;
        }
        Ok(tape.scale(acc, 1.0 / n))
    };
    Ok((mean(tape, zs)?, mean(tape, bs)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Report {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_miou: f64,
    pub held_out_miou: f64,
    pub mest_hash_before: String,
    pub mest_hash_after: String,
}

/// Training state across the stages. Everything that influences later steps
/// is part of the checkpoint, so a resumed run continues bit for bit.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: Model,
    pub phase: Phase,
    /// Updates completed in the current phase.
    pub phase_step: usize,
    /// Updates completed over all phases.
    pub global_step: usize,
    pub opt: AdamW,
    pub detector: CollapseDetector,
    /// Line-delimited JSON records, in order.
    pub log: Vec<String>,
    f_sp_cache: Option<Vec<Tensor>>,
}

const STREAM_ORDER: u64 = 0x7A42_0000;
const TRAINED_IN_STAGE3: [&str; 3] = ["seg_proj.", "head.mask_kernel.", "head.mask_sp."];

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&cfg.model, &mut store, cfg.seed)?;
        let opt = AdamW::new(cfg.stage1.optim.clone());
        let detector = CollapseDetector::new(cfg.collapse.clone());
        Ok(Trainer {
            cfg,
            store,
            model,
            phase: Phase::Stage1,
            phase_step: 0,
            global_step: 0,
            opt,
            detector,
            log: Vec::new(),
            f_sp_cache: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&ck.config)
            .map_err(|e| Error::config(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        let mut store = ParamStore::new();
        Model::new(&cfg.model, &mut store, cfg.seed)?;
        if store.len() != ck.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, configuration expects {}",
                ck.params.len(),
                store.len()
            )));
        }
        for (name, t) in ck.params {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor {name} unknown to the configuration")))?;
            store.set_value(id, t)?;
        }
        let model = Model::from_store(&cfg.model, &store)?;
        let mut opt = AdamW::new(stage_cfg(&cfg, ck.phase).optim.clone());
        opt.step = ck.optim_step;
        opt.state = ck.moments;
        Ok(Trainer {
            cfg,
            store,
            model,
            phase: ck.phase,
            phase_step: ck.phase_step,
            global_step: ck.global_step,
            opt,
            detector: ck.detector,
            log: ck.log,
            f_sp_cache: None,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_string(&self.cfg).map_err(|e| Error::config(e.to_string()))?,
            phase: self.phase,
            phase_step: self.phase_step,
            global_step: self.global_step,
            seed: self.cfg.seed,
            params: self.store.iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect(),
            optim_step: self.opt.step,
            moments: self.opt.state.clone(),
            detector: self.detector.clone(),
            log: self.log.clone(),
        })
    }

    fn apply_freeze(&mut self, phase: Phase) {
        let s = &mut self.store;
        match phase {
            Phase::Stage1 => {
                s.freeze_all(true);
                s.set_frozen("encoder.", false);
            }
            Phase::Stage2 => {
                s.freeze_all(false);
                s.set_frozen("encoder.", true);
            }
            Phase::Stage3 => {
                s.freeze_all(true);
                for p in TRAINED_IN_STAGE3 {
                    s.set_frozen(p, false);
                }
            }
            Phase::Done => s.freeze_all(true),
        }
    }

    fn enter(&mut self, phase: Phase) {
        self.phase = phase;
        self.phase_step = 0;
        self.opt = AdamW::new(stage_cfg(&self.cfg, phase).optim.clone());
    }

    fn scene_for(&self, micro: usize, n: usize) -> usize {
        let epoch = micro / n;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, STREAM_ORDER + self.phase.tag(), epoch as u64));
        order[micro % n]
    }

    fn tape(&self, micro: usize) -> Tape {
        Tape::training(rng::derive_seed(self.cfg.seed, self.phase.tag(), 0), micro as u64)
    }

    /// Runs stage 1 then stage 2, stopping early once `stop_at` global updates
    /// are done. Returns whether both stages completed.
    pub fn pretrain(&mut self, scenes: &[PreparedScene], stop_at: Option<usize>) -> Result<bool> {
        self.check_data(scenes)?;
        if self.phase == Phase::Stage1 {
            while self.phase_step < self.cfg.stage1.steps {
                if stop_at.is_some_and(|s| self.global_step >= s) {
                    return Ok(false);
                }
                self.stage1_update(scenes)?;
            }
            self.enter(Phase::Stage2);
        }
        if self.phase == Phase::Stage2 {
            while self.phase_step < self.cfg.stage2.steps {
                if stop_at.is_some_and(|s| self.global_step >= s) {
                    return Ok(false);
                }
                self.stage2_update(scenes)?;
            }
            self.enter(Phase::Stage3);
        }
        Ok(true)
    }

    /// Checks the scenes against what the remaining pretraining stages need.
    pub fn check_data(&self, scenes: &[PreparedScene]) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Usage("pretraining needs at least one scene".into()));
        }
        if self.phase == Phase::Stage1 && self.phase_step < self.cfg.stage1.steps {
            self.check_teachers(scenes)?;
        }
        if matches!(self.phase, Phase::Stage1 | Phase::Stage2) {
            self.check_classes(scenes)?;
        }
        Ok(())
    }

    fn check_teachers(&self, scenes: &[PreparedScene]) -> Result<()> {
        for (i, s) in scenes.iter().enumerate() {
            let t = s
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Missing(format!("teacher features of scene {i}")))?;
            if t.cols() != self.cfg.model.dim {
                return Err(Error::config(format!(
                    "scene {i} teacher width {} differs from model dim {}",
                    t.cols(),
                    self.cfg.model.dim
                )));
            }
        }
        Ok(())
    }

    fn check_classes(&self, scenes: &[PreparedScene]) -> Result<()> {
        let bg = self.cfg.model.background();
        for (i, s) in scenes.iter().enumerate() {
            if let Some(&c) = s.targets.sp_class.iter().find(|&&c| c >= bg) {
                return Err(Error::config(format!(
                    "scene {i} uses class {c}, but class {bg} is the background of {} channels",
                    self.cfg.model.n_classes
                )));
            }
            if s.targets.instances.len() > self.cfg.model.n_queries {
                return Err(Error::config(format!(
                    "scene {i} has {} instances for {} queries",
                    s.targets.instances.len(),
                    self.cfg.model.n_queries
                )));
            }
        }
        Ok(())
    }

    /// Runs `accumulate` micro-batches through `objective`, sums their
    /// gradients and applies one update. Returns the mean of the logged
    /// scalars and the per-layer top-1 loads summed over micro-batches.
    fn update<F>(&mut self, stage: &StageConfig, n: usize, mut objective: F) -> Result<(Vec<(String, f64)>, Vec<(usize, Vec<usize>)>)>
    where
        F: FnMut(&mut Tape, &ParamStore, &Model, usize) -> Result<(Var, Vec<(&'static str, Var)>, Vec<(usize, RouterState)>)>,
    {
        self.apply_freeze(self.phase);
        self.store.zero_grad();
        let a = stage.optim.accumulate;
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut loads: Vec<(usize, Vec<usize>)> = Vec::new();
        for j in 0..a {
            let micro = self.phase_step * a + j;
            let scene = self.scene_for(micro, n);
            let mut tape = self.tape(micro);
            let (loss, parts, router) = objective(&mut tape, &self.store, &self.model, scene)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} loss is {value} at step {}",
                    self.phase.name(),
                    self.phase_step + 1
                )));
            }
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut self.store);
            let mut scalars = vec![("loss".to_string(), value)];
            scalars.extend(parts.iter().map(|(k, v)| (k.to_string(), tape.value(*v).item())));
            if sums.is_empty() {
                sums = scalars.iter().map(|(k, _)| (k.clone(), 0.0)).collect();
            }
            for (s, (_, v)) in sums.iter_mut().zip(&scalars) {
                s.1 += v / a as f64;
            }
            for (layer, state) in router {
                let mut hist = vec![0; state.experts()];
                for e in state.top1() {
                    hist[e] += 1;
                }
                match loads.iter_mut().find(|(l, _)| *l == layer) {
                    Some((_, h)) => h.iter_mut().zip(&hist).for_each(|(a, b)| *a += b),
                    None => loads.push((layer, hist)),
                }
            }
        }
        let lr = stage.optim.lr_at(self.phase_step, stage.steps);
        self.opt.step(&mut self.store, lr)?;
        self.phase_step += 1;
        self.global_step += 1;
        sums.push(("lr".into(), lr));
        Ok((sums, loads))
    }

    fn record(&mut self, scalars: &[(String, f64)], loads: &[(usize, Vec<usize>)]) {
        let mut rec = serde_json::Map::new();
        rec.insert("stage".into(), json!(self.phase.name()));
        rec.insert("step".into(), json!(self.phase_step));
        rec.insert("global_step".into(), json!(self.global_step));
        for (k, v) in scalars {
            rec.insert(k.clone(), json!(v));
        }
        if !loads.is_empty() {
            let l: serde_json::Map<String, serde_json::Value> =
                loads.iter().map(|(layer, h)| (format!("block{layer}"), json!(h))).collect();
            rec.insert("loads".into(), serde_json::Value::Object(l));
        }
        self.log.push(serde_json::Value::Object(rec).to_string());
    }

    fn stage1_update(&mut self, scenes: &[PreparedScene]) -> Result<()> {
        let stage = self.cfg.stage1.clone();
        let (scalars, loads) = self.update(&stage, scenes.len(), |tape, store, model, i| {
            let s = &scenes[i];
            let f = superpoint_features(tape, store, &model.encoder, &s.inputs)?;
            let teacher = s.teacher.clone().ok_or_else(|| Error::Missing("teacher features".into()))?;
            Ok((cosine_align(tape, f, teacher)?, Vec::new(), Vec::new()))
        })?;
        self.record(&scalars, &loads);
        Ok(())
    }

    /// `F_sp` of every scene under the current (frozen) encoder.
    pub fn superpoint_cache(&self, scenes: &[PreparedScene]) -> Result<Vec<Tensor>> {
        scenes
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let f = superpoint_features(&mut tape, &self.store, &self.model.encoder, &s.inputs)?;
                Ok(tape.value(f).clone())
            })
            .collect()
    }

    fn stage2_update(&mut self, scenes: &[PreparedScene]) -> Result<()> {
        if self.f_sp_cache.as_ref().is_none_or(|c| c.len() != scenes.len()) {
            self.f_sp_cache = Some(self.superpoint_cache(scenes)?);
        }
        let cache = self.f_sp_cache.take().expect("filled above");
        let stage = self.cfg.stage2.clone();
        let w = self.cfg.loss.clone();
        let result = self.update(&stage, scenes.len(), |tape, store, model, i| {
            let f = tape.constant(cache[i].clone());
            let t = inst_objective(tape, store, model, f, &scenes[i], &w)?;
            let parts = vec![
                ("cls", t.seg.cls),
                ("bce", t.seg.bce),
                ("dice", t.seg.dice),
                ("sem", t.seg.sem),
                ("z", t.z),
                ("blc", t.blc),
            ];
            Ok((t.total, parts, t.router))
        });
        self.f_sp_cache = Some(cache);
        let (scalars, loads) = result?;
        self.record(&scalars, &loads);
        let warnings = self.detector.update(self.global_step, &loads);
        for w in warnings {
            self.log_warning(&w);
        }
        Ok(())
    }

    fn log_warning(&mut self, w: &CollapseWarning) {
        let rec = json!({
            "event": "collapse_warning",
            "stage": self.phase.name(),
            "step": self.phase_step,
            "global_step": w.step,
            "layer": w.layer,
            "expert": w.expert,
            "streak": w.streak,
        });
        self.log.push(rec.to_string());
    }

    /// Mean `L_inst` over the scenes with dropout off.
    pub fn eval_inst_loss(&self, scenes: &[PreparedScene]) -> Result<f64> {
        let cache = self.superpoint_cache(scenes)?;
        let mut total = 0.0;
        for (s, f) in scenes.iter().zip(cache) {
            let mut tape = Tape::new();
            let f = tape.constant(f);
            let t = inst_objective(&mut tape, &self.store, &self.model, f, s, &self.cfg.loss)?;
            total += tape.value(t.total).item();
        }
        Ok(total / scenes.len() as f64)
    }

    /// Enhanced prompt token and `F_sp'` of a prompted scene, dropout off.
    pub fn referring_inputs(&self, scene: &PreparedScene) -> Result<(Tensor, Tensor)> {
        let prompt = scene
            .prompt
            .as_ref()
            .ok_or_else(|| Error::Missing("scene prompt".into()))?;
        let mut tape = Tape::new();
        let f = superpoint_features(&mut tape, &self.store, &self.model.encoder, &scene.inputs)?;
        let p = aggregate_prompt(&mut tape, prompt, &scene.partition, f)?;
        let out = mest_forward(&mut tape, &self.store, &self.model, f, Some(p))?;
        let hidden = tape.value(out.prompt.expect("prompt was given")).clone();
        Ok((hidden, tape.value(out.tokens).clone()))
    }

    /// Referring mask logits of each scene.
    pub fn referring_logits(&self, cached: &[(Tensor, Tensor)]) -> Result<Vec<Vec<f64>>> {
        cached
            .iter()
            .map(|(h, f)| {
                let mut tape = Tape::new();
                let (h, f) = (tape.constant(h.clone()), tape.constant(f.clone()));
                let l = referring_forward(&mut tape, &self.store, &self.model, h, f)?;
                Ok(tape.value(l).data().to_vec())
            })
            .collect()
    }

    /// Referring mIoU of the current mask decoding, merged-mask protocol.
    pub fn referring_miou(&self, scenes: &[PreparedScene], cached: &[(Tensor, Tensor)]) -> Result<f64> {
        let logits = self.referring_logits(cached)?;
        let pairs: Vec<MaskPair> = scenes
            .iter()
            .zip(logits)
            .map(|(s, l)| MaskPair {
                pred: vec![threshold(&l)],
                gt: s.referring.iter().cloned().collect(),
                sizes: s.sizes.clone(),
            })
            .collect();
        miou(&pairs, true)
    }

    /// Stage 3: trains the segmentation projection and the mask head on
    /// prompted scenes with everything else frozen.
    pub fn finetune_masks(&mut self, train: &[PreparedScene], held_out: &[PreparedScene]) -> Result<Stage3Report> {
        if train.is_empty() {
            return Err(Error::Usage("mask finetuning needs at least one scene".into()));
        }
        if let Some(i) = train.iter().position(|s| s.referring.is_none()) {
            return Err(Error::Missing(format!("referring target of scene {i}")));
        }
        if self.phase != Phase::Stage3 {
            self.enter(Phase::Stage3);
        }
        let before = self.store.hash_prefix("mest.");
        let cache: Vec<(Tensor, Tensor)> = train.iter().map(|s| self.referring_inputs(s)).collect::<Result<_>>()?;
        let held: Vec<(Tensor, Tensor)> = held_out.iter().map(|s| self.referring_inputs(s)).collect::<Result<_>>()?;
        let lambda = self.cfg.loss.mask;
        let gts: Vec<Tensor> = train
            .iter()
            .map(|s| {
                let m = s.referring.as_ref().expect("checked above");
                Tensor::row(&m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>())
            })
            .collect();
        let eval_loss = |tr: &Trainer| -> Result<f64> {
            let logits = tr.referring_logits(&cache)?;
            let mut s = 0.0;
            for (l, gt) in logits.iter().zip(&gts) {
                let mut tape = Tape::new();
                let v = tape.constant(Tensor::row(l));
                let loss = ft_mask_loss(&mut tape, v, gt, 1.0)?;
                s += tape.value(loss).item();
            }
            Ok(s / logits.len() as f64)
        };
        let initial_loss = eval_loss(self)?;
        let stage = self.cfg.stage3.clone();
        while self.phase_step < stage.steps {
            let (scalars, loads) = self.update(&stage, train.len(), |tape, store, model, i| {
                let (h, f) = &cache[i];
                let (h, f) = (tape.constant(h.clone()), tape.constant(f.clone()));
                let logits = referring_forward(tape, store, model, h, f)?;
                Ok((ft_mask_loss(tape, logits, &gts[i], lambda)?, Vec::new(), Vec::new()))
            })?;
            self.record(&scalars, &loads);
        }
        self.phase = Phase::Done;
        Ok(Stage3Report {
            initial_loss,
            final_loss: eval_loss(self)?,
            train_miou: self.referring_miou(train, &cache)?,
            held_out_miou: if held_out.is_empty() { f64::NAN } else { self.referring_miou(held_out, &held)? },
            mest_hash_before: before,
            mest_hash_after: self.store.hash_prefix("mest."),
        })
    }

    /// Instance segmentation of a scene as a mask pair: the thresholded mask
    /// of the query matched to each ground-truth instance, or the predicted
    /// instances when the scene has none.
    pub fn instance_pair(&self, scene: &PreparedScene) -> Result<MaskPair> {
        let gt = scene.targets.instances.clone();
        let pred = if gt.is_empty() {
            self.predict_instances(scene)?
        } else {
            let mut tape = Tape::new();
            let f = superpoint_features(&mut tape, &self.store, &self.model.encoder, &scene.inputs)?;
            let out = instance_forward(&mut tape, &self.store, &self.model, f, None)?;
            let masks = tape.value(out.pred.mask_logits).clone();
            greedy_match(&masks, &gt)?
                .into_iter()
                .map(|q| threshold(masks.row_slice(q)))
                .collect()
        };
        Ok(MaskPair {
            pred,
            gt,
            sizes: scene.sizes.clone(),
        })
    }

    /// Predicted instance masks of a scene: queries whose class is not the
    /// background, thresholded at logit 0.
    pub fn predict_instances(&self, scene: &PreparedScene) -> Result<Vec<Vec<bool>>> {
        let mut tape = Tape::new();
        let f = superpoint_features(&mut tape, &self.store, &self.model.encoder, &scene.inputs)?;
        let out = instance_forward(&mut tape, &self.store, &self.model, f, None)?;
        let cls = tape.value(out.pred.class_logits).clone();
        let masks = tape.value(out.pred.mask_logits).clone();
        let bg = self.cfg.model.background();
        Ok((0..cls.rows())
            .filter(|&q| {
                let row = cls.row_slice(q);
                let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best != bg
            })
            .map(|q| threshold(masks.row_slice(q)))
            .filter(|m| m.iter().any(|&b| b))
            .collect())
    }
}

fn stage_cfg(cfg: &TrainConfig, phase: Phase) -> &StageConfig {
    match phase {
        Phase::Stage1 => &cfg.stage1,
        Phase::Stage2 => &cfg.stage2,
        Phase::Stage3 | Phase::Done => &cfg.stage3,
    }
}
