//! Parameter importance and importance-weighted anchoring penalties.
//!
//! Importance is estimated per scalar parameter (empirical Fisher or MAS),
//! accumulated across tasks by entrywise summation, and applied as a
//! quadratic pull towards the end-of-task snapshot, optionally restricted
//! to a set of parameter groups or clipped Huber-style.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::bbox::BBox;
use crate::detector::{assign_targets, detection_loss, forward, Detector};
use crate::error::{Error, Result};
use crate::tensor::{read_records, write_records, GroupKind, GroupTag, ParameterStore, Tensor, IMPORTANCE_MAGIC};

/// A model whose per-example loss and raw outputs can be rebuilt on a tape.
pub trait LossModel {
    type Example;

    fn params(&self) -> &ParameterStore;

    /// Scalar training loss of one example.
    fn example_loss(&self, tape: &mut Tape, b: &Bindings, example: &Self::Example) -> Result<Var>;

    /// Pre-sigmoid outputs whose squared L2 norm drives MAS importance.
    fn mas_outputs(&self, tape: &mut Tape, b: &Bindings, example: &Self::Example) -> Result<Vec<Var>>;
}

/// One labelled training image.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// `[C, H, W]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

fn batch_of_one(tape: &mut Tape, image: &Tensor) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(tape.constant(Tensor::new(shape, image.data().to_vec())?))
}

impl LossModel for Detector {
    type Example = LabeledImage;

    fn params(&self) -> &ParameterStore {
        &self.params
    }

    fn example_loss(&self, tape: &mut Tape, b: &Bindings, ex: &LabeledImage) -> Result<Var> {
        let x = batch_of_one(tape, &ex.image)?;
        let out = forward(tape, b, self, x, &self.all_tasks())?;
        let targets = assign_targets(&ex.boxes, &self.config)?;
        detection_loss(tape, self, &out, &[targets])
    }

    fn mas_outputs(&self, tape: &mut Tape, b: &Bindings, ex: &LabeledImage) -> Result<Vec<Var>> {
        let x = batch_of_one(tape, &ex.image)?;
        let out = forward(tape, b, self, x, &self.all_tasks())?;
        Ok(out.levels.iter().flat_map(|lv| lv.cls.iter().map(|&(_, v)| v)).collect())
    }
}

/// Per-scalar nonnegative importance, name-aligned with a parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceMatrix {
    entries: BTreeMap<String, Tensor>,
}

impl ImportanceMatrix {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        ImportanceMatrix {
            entries: store.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let entries: BTreeMap<_, _> = entries.into_iter().collect();
        for (name, t) in &entries {
            if t.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config(format!("importance of `{name}` must be finite and nonnegative")));
            }
        }
        Ok(ImportanceMatrix { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_records(std::io::BufWriter::new(f), IMPORTANCE_MAGIC, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_entries(read_records(std::io::BufReader::new(f), IMPORTANCE_MAGIC)?)
    }
}

/// Immutable copy of parameter values taken at the end of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    values: BTreeMap<String, Tensor>,
}

impl Snapshot {
    pub fn of(store: &ParameterStore) -> Self {
        Snapshot {
            values: store
                .iter()
                .map(|(n, t)| {
                    let mut v = t.clone();
                    v.grad = None;
                    (n.to_string(), v)
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }
}

/// Parameter groups that receive the anchoring penalty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    /// `None` selects every group.
    kinds: Option<BTreeSet<GroupKind>>,
}

impl GroupMask {
    pub fn all() -> Self {
        GroupMask { kinds: None }
    }

    /// Feature extractor only: backbone, pyramid and classification tower.
    pub fn feature_extractor() -> Self {
        Self::of([GroupKind::Backbone, GroupKind::Fpn, GroupKind::ClsTower])
    }

    pub fn of(kinds: impl IntoIterator<Item = GroupKind>) -> Self {
        GroupMask { kinds: Some(kinds.into_iter().collect()) }
    }

    pub fn contains(&self, tag: &GroupTag) -> bool {
        self.kinds.as_ref().map_or(true, |k| k.contains(&tag.kind()))
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.contains(&GroupTag::from_name(name))
    }

    /// Every selected kind must be present in `store`.
    pub fn validate(&self, store: &ParameterStore) -> Result<()> {
        if let Some(kinds) = &self.kinds {
            let present: BTreeSet<GroupKind> = store.groups().iter().map(GroupTag::kind).collect();
            if let Some(missing) = kinds.iter().find(|k| !present.contains(k)) {
                return Err(Error::config(format!("mask group {missing:?} does not exist in the store")));
            }
        }
        Ok(())
    }
}

/// Averages per-example squared loss gradients over the first
/// `min(n_samples, len)` examples. Model parameters are not modified.
pub fn fisher_importance<M: LossModel>(model: &M, dataset: &[M::Example], n_samples: usize) -> Result<ImportanceMatrix> {
    mean_gradient_statistic(model, dataset, n_samples, |m, tape, b, ex| m.example_loss(tape, b, ex), |g| g * g)
}

/// MAS importance: mean over examples of `|∂‖g(x)‖² / ∂θ|`, with `g` the
/// model's pre-sigmoid classification outputs.
pub fn mas_importance<M: LossModel>(model: &M, dataset: &[M::Example], n_samples: usize) -> Result<ImportanceMatrix> {
    mean_gradient_statistic(
        model,
        dataset,
        n_samples,
        |m, tape, b, ex| {
            let outs = m.mas_outputs(tape, b, ex)?;
            let mut terms = Vec::with_capacity(outs.len());
            for v in outs {
                let sq = tape.mul(v, v)?;
                terms.push(tape.sum(sq));
            }
            if terms.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            tape.add_all(&terms)
        },
        f64::abs,
    )
}

fn mean_gradient_statistic<M, L, S>(model: &M, dataset: &[M::Example], n_samples: usize, objective: L, stat: S) -> Result<ImportanceMatrix>
where
    M: LossModel,
    L: Fn(&M, &mut Tape, &Bindings, &M::Example) -> Result<Var>,
    S: Fn(f64) -> f64,
{
    if n_samples == 0 {
        return Err(Error::usage("importance estimation needs at least one sample"));
    }
    if dataset.is_empty() {
        return Err(Error::usage("importance estimation needs a non-empty dataset"));
    }
    let n = n_samples.min(dataset.len());
    let mut acc = ImportanceMatrix::zeros_like(model.params());
    for ex in &dataset[..n] {
        let mut tape = Tape::new();
        let b = tape.bind_store(model.params(), |_| true);
        let loss = objective(model, &mut tape, &b, ex)?;
        tape.backward(loss)?;
        for (name, var) in b.iter() {
            let Some(g) = tape.grad(var) else { continue };
            let dst = acc.entries.get_mut(name).expect("aligned with store");
            for (d, &gi) in dst.data_mut().iter_mut().zip(g) {
                *d += stat(gi);
            }
        }
    }
    let inv = 1.0 / n as f64;
    for t in acc.entries.values_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    Ok(acc)
}

/// Entrywise sum over the union of names; a name present on one side keeps
/// its value.
pub fn accumulate_importance(previous: &ImportanceMatrix, current: &ImportanceMatrix) -> Result<ImportanceMatrix> {
    let mut out = previous.clone();
    for (name, t) in &current.entries {
        match out.entries.get_mut(name) {
            Some(acc) => {
                if acc.shape() != t.shape() {
                    return Err(Error::config(format!("importance shapes differ for `{name}`")));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            None => {
                out.entries.insert(name.clone(), t.clone());
            }
        }
    }
    Ok(out)
}

struct PenaltyTerm<'a> {
    var: Var,
    anchor: &'a Tensor,
    weights: &'a Tensor,
}

fn penalty_terms<'a>(
    b: &Bindings,
    snapshot: &'a Snapshot,
    importance: &'a ImportanceMatrix,
    mask: &GroupMask,
) -> Result<Vec<PenaltyTerm<'a>>> {
    let mut terms = Vec::new();
    for (name, weights) in importance.iter() {
        if !mask.contains_name(name) {
            continue;
        }
        let var = b.get(name)?;
        let anchor = snapshot
            .get(name)
            .ok_or_else(|| Error::config(format!("snapshot has no entry for `{name}`")))?;
        if anchor.shape() != weights.shape() {
            return Err(Error::config(format!("snapshot and importance disagree on `{name}`")));
        }
        terms.push(PenaltyTerm { var, anchor, weights });
    }
    Ok(terms)
}

/// `(λ/2) Σ_i F_i (θ_i − θ*_i)²` over the masked parameters listed in
/// `importance`. Parameters absent from `importance` contribute nothing.
pub fn ewc_penalty(
    tape: &mut Tape,
    b: &Bindings,
    snapshot: &Snapshot,
    importance: &ImportanceMatrix,
    lambda: f64,
    mask: &GroupMask,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let terms = penalty_terms(b, snapshot, importance, mask)?;
    let mut vars = Vec::with_capacity(terms.len());
    for t in terms {
        if tape.shape(t.var) != t.anchor.shape() {
            return Err(Error::config("bound parameter shape differs from its snapshot"));
        }
        vars.push(tape.weighted_sq(t.var, t.anchor.data().to_vec(), t.weights.data().to_vec(), lambda)?);
    }
    sum_or_zero(tape, &vars)
}

/// Huber-clipped variant applied to every parameter listed in
/// `importance`: quadratic while `|λ F (θ − θ*)| ≤ clip`, linear beyond, so
/// no per-parameter gradient exceeds `clip` in magnitude.
pub fn huber_clipped_penalty(
    tape: &mut Tape,
    b: &Bindings,
    snapshot: &Snapshot,
    importance: &ImportanceMatrix,
    lambda: f64,
    clip: f64,
) -> Result<Var> {
    if !(clip > 0.0) {
        return Err(Error::config(format!("clip threshold must be positive, got {clip}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let terms = penalty_terms(b, snapshot, importance, &GroupMask::all())?;
    let mut vars = Vec::with_capacity(terms.len());
    for t in terms {
        vars.push(tape.huber_sq(t.var, t.anchor.data().to_vec(), t.weights.data().to_vec(), lambda, clip)?);
    }
    sum_or_zero(tape, &vars)
}

fn sum_or_zero(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    if vars.is_empty() {
        Ok(tape.constant(Tensor::scalar(0.0)))
    } else {
        tape.add_all(vars)
    }
}

/// Evaluates [`ewc_penalty`] on a fresh tape, returning the value and the
/// gradient of every store parameter.
pub fn ewc_penalty_with_grad(
    store: &ParameterStore,
    snapshot: &Snapshot,
    importance: &ImportanceMatrix,
    lambda: f64,
    mask: &GroupMask,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = tape.bind_store(store, |_| true);
    let p = ewc_penalty(&mut tape, &b, snapshot, importance, lambda, mask)?;
    collect(tape, b, p, store)
}

pub fn huber_penalty_with_grad(
    store: &ParameterStore,
    snapshot: &Snapshot,
    importance: &ImportanceMatrix,
    lambda: f64,
    clip: f64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = tape.bind_store(store, |_| true);
    let p = huber_clipped_penalty(&mut tape, &b, snapshot, importance, lambda, clip)?;
    collect(tape, b, p, store)
}

fn collect(mut tape: Tape, b: Bindings, p: Var, store: &ParameterStore) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let value = tape.data(p)[0];
    tape.backward(p)?;
    let grads = b
        .iter()
        .map(|(name, v)| {
            let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(name).map_or(0, Tensor::len)]);
            (name.to_string(), g)
        })
        .collect();
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub groups: BTreeMap<String, GroupStats>,
    /// Global max over the smallest strictly positive entry; `None` when
    /// every entry is zero.
    pub max_min_ratio: Option<f64>,
    /// Largest entries as `name[index]`, descending.
    pub top: Vec<(String, f64)>,
}

pub fn importance_stats(importance: &ImportanceMatrix, store: &ParameterStore, top_k: usize) -> Result<ImportanceReport> {
    let mut per_group: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all: Vec<(String, f64)> = Vec::new();
    for (name, t) in importance.iter() {
        let p = store.require(name)?;
        if p.shape() != t.shape() {
            return Err(Error::config(format!("importance of `{name}` is not aligned with the store")));
        }
        let group = GroupTag::from_name(name).to_string();
        per_group.entry(group).or_default().extend_from_slice(t.data());
        all.extend(t.data().iter().enumerate().map(|(i, &v)| (format!("{name}[{i}]"), v)));
    }
    let groups = per_group
        .into_iter()
        .map(|(g, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            (g, GroupStats { count: n, min: v[0], median, max: v[n - 1] })
        })
        .collect();
    let max = all.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let min_pos = all.iter().map(|(_, v)| *v).filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    let max_min_ratio = if min_pos.is_finite() { Some(max / min_pos) } else { None };
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(top_k);
    Ok(ImportanceReport { groups, max_min_ratio, top: all })
}
