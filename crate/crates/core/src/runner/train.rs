use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::bbox::BBox;
use crate::continual::{
    accumulate_importance, ewc_penalty, fisher_importance, huber_clipped_penalty, mas_importance, GroupMask,
    ImportanceMatrix, LabeledImage, Snapshot,
};
use crate::detector::{assign_targets, detection_loss, forward, stack_images, Detector, TargetMap};
use crate::dilation::{build_trainability_policy, count_added_params, expand_model, StepGrowth, TrainabilityPolicy};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, forgetting, EvalResult};
use crate::optim::{check_gradients, MomentumSgd};
use crate::pseudo::{generate_pseudo_batch, merge_annotations};
use crate::scenario::TaskProtocol;

use super::{AnchorMode, ExperimentConfig, ImportanceKind, MethodSpec, PenaltyKind};

/// Training image with its assigned targets cached.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub image: crate::tensor::Tensor,
    pub boxes: Vec<BBox>,
    pub targets: TargetMap,
}

impl TrainExample {
    pub fn new(det: &Detector, image: crate::tensor::Tensor, boxes: Vec<BBox>) -> Result<Self> {
        let targets = assign_targets(&boxes, &det.config)?;
        Ok(TrainExample { image, boxes, targets })
    }
}

/// Importance-weighted pull towards earlier solutions.
#[derive(Clone, Debug, Default)]
pub enum Regularizer {
    #[default]
    None,
    Quadratic {
        anchors: Vec<(Snapshot, ImportanceMatrix)>,
        mask: GroupMask,
    },
    Huber {
        anchor: Snapshot,
        importance: ImportanceMatrix,
        clip: f64,
    },
}

impl Regularizer {
    fn penalty(&self, tape: &mut Tape, b: &Bindings, lambda: f64) -> Result<Option<Var>> {
        match self {
            Regularizer::None => Ok(None),
            Regularizer::Quadratic { anchors, mask } => {
                let mut terms = Vec::with_capacity(anchors.len());
                for (snap, imp) in anchors {
                    terms.push(ewc_penalty(tape, b, snap, imp, lambda, mask)?);
                }
                if terms.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(tape.add_all(&terms)?))
                }
            }
            Regularizer::Huber { anchor, importance, clip } => {
                Ok(Some(huber_clipped_penalty(tape, b, anchor, importance, lambda, *clip)?))
            }
        }
    }
}

/// One SGD update on a batch. Returns the total loss before the update.
/// Frozen groups are neither tracked nor updated.
pub fn train_step(
    det: &mut Detector,
    opt: &mut MomentumSgd,
    batch: &[&TrainExample],
    policy: &TrainabilityPolicy,
    reg: &Regularizer,
    lambda: f64,
    lr: f64,
    grad_limit: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.bind_store(&det.params, |n| policy.is_trainable(n));
    let images: Vec<_> = batch.iter().map(|e| &e.image).collect();
    let x = tape.constant(stack_images(&images)?);
    let out = forward(&mut tape, &b, det, x, &det.all_tasks())?;
    let targets: Vec<TargetMap> = batch.iter().map(|e| e.targets.clone()).collect();
    let mut loss = detection_loss(&mut tape, det, &out, &targets)?;
    if let Some(p) = reg.penalty(&mut tape, &b, lambda)? {
        loss = tape.add(loss, p)?;
    }
    let value = tape.data(loss)[0];
    if !value.is_finite() {
        return Err(Error::Explosion { param: "loss".into(), detail: format!("total loss is {value}") });
    }
    tape.backward(loss)?;
    tape.write_grads(&b, &mut det.params);
    check_gradients(&det.params, grad_limit)?;
    let frozen = policy.frozen_tags(&det.params);
    opt.step(&mut det.params, lr, &frozen)?;
    det.params.clear_grads();
    Ok(value)
}

pub(crate) struct Schedule {
    pub iterations: usize,
    pub lr: f64,
    pub decay_at: f64,
    pub momentum: f64,
}

impl Schedule {
    fn lr_at(&self, i: usize) -> f64 {
        if (i as f64) < self.decay_at * self.iterations as f64 {
            self.lr
        } else {
            self.lr * 0.1
        }
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7472_6169_6e00 + step as u64);
    rng
}

/// Batch order of a λ probe: identical to the first incremental step.
pub(crate) fn probe_rng(seed: u64) -> ChaCha8Rng {
    step_rng(seed, 1)
}

/// Epoch-shuffled minibatch SGD over `data`. Returns the mean loss of the
/// final tenth of the iterations.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_loop(
    det: &mut Detector,
    data: &[TrainExample],
    policy: &TrainabilityPolicy,
    reg: &Regularizer,
    lambda: f64,
    schedule: &Schedule,
    batch_size: usize,
    grad_limit: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut opt = MomentumSgd::new(schedule.momentum)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let tail_from = schedule.iterations - (schedule.iterations / 10).max(1).min(schedule.iterations);
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    for i in 0..schedule.iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let loss = train_step(det, &mut opt, &batch, policy, reg, lambda, schedule.lr_at(i), grad_limit)?;
        if i >= tail_from {
            tail_sum += loss;
            tail_n += 1;
        }
    }
    Ok(tail_sum / tail_n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub classes: Vec<usize>,
    pub iterations: usize,
    pub eval: EvalResult,
    pub map50_seen: f64,
    /// Classes from earlier steps; absent at step 0.
    pub map50_old: Option<f64>,
    pub map50_new: f64,
    pub forgetting: Option<f64>,
    pub param_count: usize,
    pub pseudo_boxes: usize,
    pub final_loss: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub method_spec: MethodSpec,
    pub seed: u64,
    pub lambda: f64,
    pub step_sizes: Vec<usize>,
    pub steps: Vec<StepRecord>,
    /// Counted growth of the dilatable model for this protocol.
    pub param_growth: Vec<StepGrowth>,
    /// Diagnostics of attempts abandoned at a larger λ, see
    /// [`super::continue_with_backoff`].
    pub explosions: Vec<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn final_map50(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.map50_seen)
    }

    /// Copy with timing fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_time_s = 0.0;
        for s in &mut r.steps {
            s.wall_ms = 0;
        }
        r
    }
}

/// Model and record after the base step, shared by every method since the
/// base step does not depend on the method.
#[derive(Clone, Debug)]
pub struct BaseState {
    pub seed: u64,
    pub det: Detector,
    pub step: StepRecord,
}

fn gt_examples(det: &Detector, protocol: &TaskProtocol, step: usize) -> Result<Vec<TrainExample>> {
    protocol.train[step]
        .samples
        .iter()
        .map(|s| TrainExample::new(det, s.image.clone(), s.boxes.clone()))
        .collect()
}

fn schedule(cfg: &ExperimentConfig, step: usize) -> Schedule {
    Schedule { iterations: cfg.iterations_for(step), lr: cfg.lr, decay_at: cfg.lr_decay_at, momentum: cfg.momentum }
}

fn evaluate_step(
    cfg: &ExperimentConfig,
    protocol: &TaskProtocol,
    det: &Detector,
    step: usize,
    history: &[EvalResult],
) -> Result<(EvalResult, f64, Option<f64>, f64, Option<f64>)> {
    let seen = protocol.seen_classes(step);
    let eval = evaluate_model(det, &protocol.test, &seen, &cfg.eval_thresholds)?;
    let old: Vec<usize> = protocol.steps[..step].iter().flatten().copied().collect();
    let map_old = (!old.is_empty()).then(|| eval.map50_over(&old));
    let map_new = eval.map50_over(&protocol.steps[step]);
    let mut all = history.to_vec();
    all.push(eval.clone());
    let forget = forgetting(&all, &protocol.steps)[step];
    Ok((eval.clone(), eval.map50, map_old, map_new, forget))
}

pub fn train_base(cfg: &ExperimentConfig, protocol: &TaskProtocol, seed: u64) -> Result<BaseState> {
    cfg.validate()?;
    let start = Instant::now();
    let mut det = Detector::new(cfg.detector.clone(), protocol.steps[0].len(), seed)?;
    let data = gt_examples(&det, protocol, 0)?;
    let policy = build_trainability_policy(0, 1);
    let sched = schedule(cfg, 0);
    let loss = train_loop(
        &mut det,
        &data,
        &policy,
        &Regularizer::None,
        0.0,
        &sched,
        cfg.batch_size,
        cfg.grad_norm_limit,
        &mut step_rng(seed, 0),
    )?;
    let (eval, seen, old, new, forget) = evaluate_step(cfg, protocol, &det, 0, &[])?;
    let step = StepRecord {
        step: 0,
        classes: protocol.steps[0].clone(),
        iterations: sched.iterations,
        eval,
        map50_seen: seen,
        map50_old: old,
        map50_new: new,
        forgetting: forget,
        param_count: det.params.num_scalars(),
        pseudo_boxes: 0,
        final_loss: loss,
        wall_ms: start.elapsed().as_millis(),
    };
    Ok(BaseState { seed, det, step })
}

/// Importance memory carried between steps.
#[derive(Clone, Debug, Default)]
pub(crate) struct Memory {
    per_task: Vec<(Snapshot, ImportanceMatrix)>,
    accumulated: Option<ImportanceMatrix>,
    latest: Option<Snapshot>,
}

impl Memory {
    pub(crate) fn record(&mut self, cfg: &ExperimentConfig, spec: &MethodSpec, det: &Detector, data: &[TrainExample]) -> Result<()> {
        let Some(kind) = spec.importance else { return Ok(()) };
        let labelled: Vec<LabeledImage> =
            data.iter().map(|e| LabeledImage { image: e.image.clone(), boxes: e.boxes.clone() }).collect();
        let imp = match kind {
            ImportanceKind::Fisher => fisher_importance(det, &labelled, cfg.importance_samples)?,
            ImportanceKind::Mas => mas_importance(det, &labelled, cfg.importance_samples)?,
        };
        let snap = Snapshot::of(&det.params);
        self.accumulated = Some(match &self.accumulated {
            Some(prev) => accumulate_importance(prev, &imp)?,
            None => imp.clone(),
        });
        self.per_task.push((snap.clone(), imp));
        self.latest = Some(snap);
        Ok(())
    }

    pub(crate) fn regularizer(&self, cfg: &ExperimentConfig, spec: &MethodSpec) -> Regularizer {
        let (Some(acc), Some(latest)) = (&self.accumulated, &self.latest) else { return Regularizer::None };
        match (spec.penalty, spec.anchors) {
            (PenaltyKind::Huber, _) => {
                Regularizer::Huber { anchor: latest.clone(), importance: acc.clone(), clip: cfg.huber_clip }
            }
            (PenaltyKind::Quadratic, AnchorMode::Online) => {
                Regularizer::Quadratic { anchors: vec![(latest.clone(), acc.clone())], mask: spec.mask.clone() }
            }
            (PenaltyKind::Quadratic, AnchorMode::PerTask) => {
                Regularizer::Quadratic { anchors: self.per_task.clone(), mask: spec.mask.clone() }
            }
        }
    }
}

/// Builds the training set of an incremental step: current ground truth,
/// plus cached pseudo boxes from the frozen previous model when enabled.
pub(crate) fn incremental_examples(
    cfg: &ExperimentConfig,
    spec: &MethodSpec,
    protocol: &TaskProtocol,
    old: &Detector,
    det: &Detector,
    step: usize,
) -> Result<(Vec<TrainExample>, usize)> {
    let samples = &protocol.train[step].samples;
    let pseudo = if spec.pseudo {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        generate_pseudo_batch(old, &images, cfg.pseudo_confidence, cfg.pseudo_nms_iou)?
    } else {
        vec![Vec::new(); samples.len()]
    };
    let mut count = 0;
    let mut out = Vec::with_capacity(samples.len());
    for (i, (s, p)) in samples.iter().zip(pseudo).enumerate() {
        count += p.len();
        let merged = merge_annotations(format!("{i:05}.png"), &s.boxes, &p)?;
        out.push(TrainExample::new(det, s.image.clone(), merged.boxes())?);
    }
    Ok((out, count))
}

/// Adds the new task's head, and adapters when the method expands.
pub(crate) fn grow(det: &mut Detector, spec: &MethodSpec, step: usize, classes: usize, seed: u64) -> Result<()> {
    if spec.expand {
        expand_model(det, step, classes, seed)
    } else {
        det.add_task_head(classes, seed).map(|_| ())
    }
}

/// Runs every incremental step of `cfg.method` from a trained base.
pub fn continue_protocol(cfg: &ExperimentConfig, protocol: &TaskProtocol, base: BaseState) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.method_spec();
    let seed = base.seed;
    let mut det = base.det;
    let mut steps = vec![base.step];
    let mut memory = Memory::default();
    let mut history = vec![steps[0].eval.clone()];
    let mut step_data = gt_examples(&det, protocol, 0)?;
    for step in 1..protocol.num_steps() {
        let t0 = Instant::now();
        let importance_data = if cfg.importance_on_pseudo { step_data.clone() } else { gt_examples(&det, protocol, step - 1)? };
        memory.record(cfg, &spec, &det, &importance_data)?;
        let old = det.clone();
        grow(&mut det, &spec, step, protocol.steps[step].len(), seed)?;
        let (data, pseudo_boxes) = incremental_examples(cfg, &spec, protocol, &old, &det, step)?;
        let policy = build_trainability_policy(step, det.num_tasks());
        let reg = memory.regularizer(cfg, &spec);
        let sched = schedule(cfg, step);
        let loss = train_loop(
            &mut det,
            &data,
            &policy,
            &reg,
            cfg.lambda,
            &sched,
            cfg.batch_size,
            cfg.grad_norm_limit,
            &mut step_rng(seed, step),
        )?;
        let (eval, seen, old_map, new_map, forget) = evaluate_step(cfg, protocol, &det, step, &history)?;
        history.push(eval.clone());
        steps.push(StepRecord {
            step,
            classes: protocol.steps[step].clone(),
            iterations: sched.iterations,
            eval,
            map50_seen: seen,
            map50_old: old_map,
            map50_new: new_map,
            forgetting: forget,
            param_count: det.params.num_scalars(),
            pseudo_boxes,
            final_loss: loss,
            wall_ms: t0.elapsed().as_millis(),
        });
        step_data = data;
    }
    let wall = start.elapsed().as_secs_f64() + steps[0].wall_ms as f64 / 1000.0;
    Ok(RunRecord {
        method: cfg.method.name().to_string(),
        method_spec: spec,
        seed,
        lambda: cfg.lambda,
        step_sizes: protocol.spec.step_sizes.clone(),
        steps,
        param_growth: count_added_params(&cfg.detector, &protocol.spec.step_sizes)?,
        explosions: Vec::new(),
        wall_time_s: wall,
    })
}

pub fn run_protocol(cfg: &ExperimentConfig, protocol: &TaskProtocol, seed: u64) -> Result<RunRecord> {
    let base = train_base(cfg, protocol, seed)?;
    continue_protocol(cfg, protocol, base)
}
