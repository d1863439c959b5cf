//! Task-specific model expansion.
//!
//! From the second incremental step on, every new task gets 1×1 adapters on
//! each pyramid feature (`dm_fpn.<task>.<level>`) and one shared 1×1 adapter
//! after the classification tower (`dm_ch.<task>`), in addition to its own
//! 3×3 classification head. Adapters start as exact identities, so a freshly
//! expanded branch reproduces the unexpanded pathway.
//!
//! Old task branches always consume the unadapted pyramid features.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::detector::{cls_tower, conv_layer, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::tensor::{GroupTag, ParameterStore, Tensor};

/// First task index that receives dilatable adapters.
pub const FIRST_DILATED_TASK: usize = 2;

/// Adds the classification head of `task_idx` and, from
/// [`FIRST_DILATED_TASK`] on, identity-initialised adapters. Existing
/// tensors are never modified.
pub fn expand_model(det: &mut Detector, task_idx: usize, num_new_classes: usize, seed: u64) -> Result<()> {
    if task_idx == 0 {
        return Err(Error::usage("task 0 is the base task and is never expanded"));
    }
    if task_idx < det.num_tasks() {
        return Err(Error::usage(format!("task {task_idx} has already been expanded")));
    }
    if task_idx > det.num_tasks() {
        return Err(Error::usage(format!(
            "task {task_idx} cannot be expanded before task {}",
            det.num_tasks()
        )));
    }
    if num_new_classes == 0 {
        return Err(Error::config("expansion needs at least one new class"));
    }
    if task_idx >= FIRST_DILATED_TASK {
        add_adapters(&mut det.params, &det.config, task_idx)?;
        det.adapters_from.get_or_insert(FIRST_DILATED_TASK);
    }
    det.add_task_head(num_new_classes, seed)?;
    Ok(())
}

fn add_adapters(store: &mut ParameterStore, config: &DetectorConfig, task: usize) -> Result<()> {
    let c = config.channels;
    for level in 0..config.levels() {
        store.insert(format!("dm_fpn.{task}.{level}.weight"), Tensor::identity_1x1(c))?;
        store.insert(format!("dm_fpn.{task}.{level}.bias"), Tensor::zeros(&[c]))?;
    }
    store.insert(format!("dm_ch.{task}.weight"), Tensor::identity_1x1(c))?;
    store.insert(format!("dm_ch.{task}.bias"), Tensor::zeros(&[c]))?;
    Ok(())
}

/// Per-level classification logits of one task branch.
///
/// Without adapters: `Cls_t(CONV_CH(F_i))`. With adapters:
/// `Cls_t(DM_CH[t](CONV_CH(DM_FPN[t][i](F_i))))`.
pub fn task_branch_forward(tape: &mut Tape, b: &Bindings, det: &Detector, feats: &[Var], task: usize) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(feats.len());
    for (level, &f) in feats.iter().enumerate() {
        out.push(branch_level(tape, b, det, f, level, task, None)?);
    }
    Ok(out)
}

fn branch_level(
    tape: &mut Tape,
    b: &Bindings,
    det: &Detector,
    f: Var,
    level: usize,
    task: usize,
    shared_tower: Option<Var>,
) -> Result<Var> {
    let head = format!("cls_head.{task}");
    if det.uses_adapters(task) {
        let dm_ch = format!("dm_ch.{task}");
        let dm_fpn = format!("dm_fpn.{task}.{level}");
        if !b.contains(&format!("{dm_ch}.weight")) || !b.contains(&format!("{dm_fpn}.weight")) {
            return Err(Error::config(format!("task {task} is missing its dilatable adapters")));
        }
        let adapted = conv_layer(tape, b, &dm_fpn, f, 1, 0)?;
        let tower = cls_tower(tape, b, &det.config, adapted)?;
        let adapted_tower = conv_layer(tape, b, &dm_ch, tower, 1, 0)?;
        conv_layer(tape, b, &head, adapted_tower, 1, 1)
    } else {
        let tower = match shared_tower {
            Some(t) => t,
            None => cls_tower(tape, b, &det.config, f)?,
        };
        conv_layer(tape, b, &head, tower, 1, 1)
    }
}

/// Evaluates every requested branch; the unadapted tower output is
/// computed once per level and shared by all branches without adapters.
pub fn all_branches_forward(
    tape: &mut Tape,
    b: &Bindings,
    det: &Detector,
    feats: &[Var],
    tasks: &[usize],
) -> Result<Vec<Vec<Var>>> {
    let needs_plain = tasks.iter().any(|&t| !det.uses_adapters(t));
    let plain: Vec<Option<Var>> = if needs_plain {
        feats
            .iter()
            .map(|&f| cls_tower(tape, b, &det.config, f).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; feats.len()]
    };
    tasks
        .iter()
        .map(|&t| {
            feats
                .iter()
                .enumerate()
                .map(|(level, &f)| branch_level(tape, b, det, f, level, t, plain[level]))
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepGrowth {
    pub added: usize,
    pub cumulative: usize,
    pub cumulative_ratio: f64,
}

/// Closed-form parameter growth per step relative to `base_params`.
/// Step 0 is the base model; step 1 adds a head; later steps add a head
/// plus `levels + 1` adapters.
pub fn count_added_params_with_base(
    channels: usize,
    levels: usize,
    classes_per_step: &[usize],
    base_params: usize,
) -> Result<Vec<StepGrowth>> {
    if classes_per_step.iter().any(|&k| k == 0) {
        return Err(Error::config("every step must introduce at least one class"));
    }
    let c = channels;
    let adapter = c * c + c;
    let mut cumulative = 0;
    let mut out = Vec::with_capacity(classes_per_step.len());
    for (step, &k) in classes_per_step.iter().enumerate() {
        let head = 9 * c * k + k;
        let added = match step {
            0 => 0,
            s if s < FIRST_DILATED_TASK => head,
            _ => levels * adapter + adapter + head,
        };
        cumulative += added;
        out.push(StepGrowth { added, cumulative, cumulative_ratio: cumulative as f64 / base_params as f64 });
    }
    Ok(out)
}

/// Closed-form scalar count of a fresh base model with `base_classes`.
pub fn base_param_count(config: &DetectorConfig, base_classes: usize) -> usize {
    let c = config.channels;
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let mut cin = config.in_channels;
    let mut total = 0;
    for w in config.backbone_widths() {
        total += conv(cin, w, 3);
        cin = w;
    }
    total += config.levels() * conv(c, c, 1);
    total += 2 * config.tower_depth * conv(c, c, 3);
    total += conv(c, 1, 3) + conv(c, 4, 3) + conv(c, base_classes, 3);
    total
}

/// Parameter growth for a desk-scale configuration, with the base count
/// derived from the architecture.
pub fn count_added_params(config: &DetectorConfig, classes_per_step: &[usize]) -> Result<Vec<StepGrowth>> {
    let base_classes = *classes_per_step.first().ok_or_else(|| Error::config("empty protocol"))?;
    if base_classes == 0 {
        return Err(Error::config("every step must introduce at least one class"));
    }
    count_added_params_with_base(config.channels, config.levels(), classes_per_step, base_param_count(config, base_classes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainability {
    Frozen,
    Normal,
    EwcRegularized,
}

/// Per-group training mode for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainabilityPolicy {
    pub step: usize,
    pub task_count: usize,
}

pub fn build_trainability_policy(step: usize, task_count: usize) -> TrainabilityPolicy {
    TrainabilityPolicy { step, task_count }
}

impl TrainabilityPolicy {
    pub fn of(&self, tag: &GroupTag) -> Trainability {
        use Trainability::*;
        match tag {
            GroupTag::Backbone | GroupTag::Fpn(_) | GroupTag::ClsTower => {
                if self.step == 0 {
                    Normal
                } else {
                    EwcRegularized
                }
            }
            GroupTag::RegTower | GroupTag::RegHead | GroupTag::CtrHead | GroupTag::Other(_) => Normal,
            GroupTag::ClsHead(t) | GroupTag::DmCh(t) | GroupTag::DmFpn { task: t, .. } => {
                if *t == self.step {
                    Normal
                } else {
                    Frozen
                }
            }
        }
    }

    pub fn frozen_tags(&self, store: &ParameterStore) -> BTreeSet<GroupTag> {
        store.groups().into_iter().filter(|g| self.of(g) == Trainability::Frozen).collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.of(&GroupTag::from_name(name)) != Trainability::Frozen
    }

    pub fn table(&self, store: &ParameterStore) -> BTreeMap<String, Trainability> {
        store.groups().into_iter().map(|g| (g.to_string(), self.of(&g))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn task_one_adds_only_a_head() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 1).unwrap();
        let before = det.params.num_scalars();
        expand_model(&mut det, 1, 2, 1).unwrap();
        assert_eq!(det.params.num_scalars() - before, 9 * 32 * 2 + 2);
        assert!(det.params.names().all(|n| !n.starts_with("dm_")));
        assert_eq!(det.adapters_from, None);
    }

    #[test]
    fn task_two_adds_adapters_and_head() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 1).unwrap();
        expand_model(&mut det, 1, 2, 1).unwrap();
        let before = det.params.num_scalars();
        let hashes = det.params.hashes();
        expand_model(&mut det, 2, 2, 1).unwrap();
        assert_eq!(det.params.num_scalars() - before, 2 * (32 * 32 + 32) + (32 * 32 + 32) + 9 * 32 * 2 + 2);
        assert_eq!(2 * (32 * 32 + 32) + (32 * 32 + 32), 3168);
        let after = det.params.hashes();
        for (k, v) in &hashes {
            assert_eq!(after[k], *v, "{k} changed");
        }
        let w = det.params.get("dm_fpn.2.1.weight").unwrap();
        assert_eq!(w, &Tensor::identity_1x1(32));
    }

    #[test]
    fn duplicate_expansion_is_usage_error() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 1).unwrap();
        expand_model(&mut det, 1, 2, 1).unwrap();
        assert!(matches!(expand_model(&mut det, 1, 2, 1), Err(Error::Usage(_))));
        assert!(matches!(expand_model(&mut det, 3, 2, 1), Err(Error::Usage(_))));
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn identity_adapters_reproduce_plain_branch() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 3).unwrap();
        expand_model(&mut det, 1, 2, 3).unwrap();
        expand_model(&mut det, 2, 2, 3).unwrap();
        let img = image(8);
        let adapted = det.infer(&[&img], &[2]).unwrap();
        let mut plain = det.clone();
        plain.adapters_from = None;
        let reference = plain.infer(&[&img], &[2]).unwrap();
        for (a, r) in adapted[0].levels.iter().zip(&reference[0].levels) {
            for (x, y) in a.cls[0].logits.iter().zip(&r.cls[0].logits) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn expansion_leaves_old_branches_bitwise_unchanged() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 3).unwrap();
        expand_model(&mut det, 1, 2, 3).unwrap();
        let img = image(9);
        let before = det.infer(&[&img], &[0, 1]).unwrap();
        expand_model(&mut det, 2, 2, 3).unwrap();
        let after = det.infer(&[&img], &[0, 1]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_adapters_feed_zero_features() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 3).unwrap();
        expand_model(&mut det, 1, 1, 3).unwrap();
        expand_model(&mut det, 2, 1, 3).unwrap();
        det.params.get_mut("dm_fpn.2.0.weight").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let b = tape.bind_store(&det.params, |_| false);
        let img = image(1);
        let x = tape.constant(Tensor::new(vec![1, 1, 64, 64], img.into_data()).unwrap());
        let feats = crate::detector::features(&mut tape, &b, &det.config, x).unwrap();
        let adapted = conv_layer(&mut tape, &b, "dm_fpn.2.0", feats[0], 1, 0).unwrap();
        assert!(tape.data(adapted).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_adapters_are_config_error() {
        let mut det = Detector::new(DetectorConfig::default(), 4, 3).unwrap();
        expand_model(&mut det, 1, 1, 3).unwrap();
        det.add_task_head(1, 3).unwrap();
        det.adapters_from = Some(2);
        assert!(matches!(det.infer(&[&image(1)], &[2]), Err(Error::Config(_))));
    }

    #[test]
    fn random_adapters_are_deterministic() {
        let mut det = Detector::new(DetectorConfig::default(), 2, 3).unwrap();
        expand_model(&mut det, 1, 1, 3).unwrap();
        expand_model(&mut det, 2, 1, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        *det.params.get_mut("dm_ch.2.weight").unwrap() = Tensor::randn(&[32, 32, 1, 1], 0.2, &mut rng);
        let img = image(4);
        assert_eq!(det.infer(&[&img], &[2]).unwrap(), det.infer(&[&img], &[2]).unwrap());
    }

    #[test]
    fn closed_form_counts() {
        let g = count_added_params(&DetectorConfig::default(), &[4, 2, 2]).unwrap();
        assert_eq!(g[0].added, 0);
        assert_eq!(g[1].added, 578);
        assert_eq!(g[2].added, 3746);
        assert!(count_added_params(&DetectorConfig::default(), &[4, 0]).is_err());
        let base = Detector::new(DetectorConfig::default(), 4, 0).unwrap();
        assert_eq!(base_param_count(&DetectorConfig::default(), 4), base.params.num_scalars());
    }

    #[test]
    fn paper_scale_growth() {
        let g = count_added_params_with_base(256, 5, &[5, 5, 5], 32_000_000).unwrap();
        assert_eq!(g[1].added, 11_525);
        assert_eq!(g[2].added, 394_752 + 11_525);
        let per_task = g[2].added as f64 / 32e6;
        assert!((0.010..=0.015).contains(&per_task), "{per_task}");
    }

    #[test]
    fn policy_rules() {
        let p = build_trainability_policy(1, 3);
        assert_eq!(p.of(&GroupTag::ClsHead(0)), Trainability::Frozen);
        assert_eq!(p.of(&GroupTag::ClsHead(1)), Trainability::Normal);
        assert_eq!(p.of(&GroupTag::Backbone), Trainability::EwcRegularized);
        assert_eq!(p.of(&GroupTag::Fpn(1)), Trainability::EwcRegularized);
        assert_eq!(p.of(&GroupTag::ClsTower), Trainability::EwcRegularized);
        let p = build_trainability_policy(3, 4);
        for t in 0..3 {
            assert_eq!(p.of(&GroupTag::ClsHead(t)), Trainability::Frozen);
        }
        assert_eq!(p.of(&GroupTag::DmCh(2)), Trainability::Frozen);
        assert_eq!(p.of(&GroupTag::DmFpn { task: 2, level: 0 }), Trainability::Frozen);
        assert_eq!(p.of(&GroupTag::DmCh(3)), Trainability::Normal);
        assert_eq!(p.of(&GroupTag::DmFpn { task: 3, level: 1 }), Trainability::Normal);
        for step in 0..5 {
            let p = build_trainability_policy(step, 5);
            assert_eq!(p.of(&GroupTag::RegHead), Trainability::Normal);
            assert_eq!(p.of(&GroupTag::RegTower), Trainability::Normal);
            assert_eq!(p.of(&GroupTag::CtrHead), Trainability::Normal);
        }
    }
}
