//! Plain SGD and the gradient-explosion detector.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{GroupTag, ParameterStore};

/// Global gradient L2 norm above which a step counts as an explosion.
pub const DEFAULT_GRAD_NORM_LIMIT: f64 = 1e6;

/// `θ ← θ − lr·grad` for every parameter outside `frozen`. Frozen
/// parameters are not touched at all.
pub fn sgd_step(store: &mut ParameterStore, lr: f64, frozen: &BTreeSet<GroupTag>) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
    }
    for (name, _) in store.iter() {
        if frozen.contains(&GroupTag::from_name(name)) {
            continue;
        }
        if store.get(name).is_some_and(|t| t.grad.is_none()) {
            return Err(Error::usage(format!("missing gradient on trainable parameter `{name}`")));
        }
    }
    for (name, t) in store.iter_mut() {
        if frozen.contains(&GroupTag::from_name(name)) {
            continue;
        }
        let grad = t.grad.take().expect("checked above");
        for (v, g) in t.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        t.grad = Some(grad);
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μ·v + grad`, `θ ← θ − lr·v`. With `μ = 0` every
/// update equals [`sgd_step`]. Frozen parameters never get a velocity.
#[derive(Clone, Debug, Default)]
pub struct MomentumSgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(MomentumSgd { momentum, velocity: BTreeMap::new() })
    }

    pub fn step(&mut self, store: &mut ParameterStore, lr: f64, frozen: &BTreeSet<GroupTag>) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(store, lr, frozen);
        }
        if !(lr > 0.0) {
            return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
        }
        for (name, t) in store.iter_mut() {
            if frozen.contains(&GroupTag::from_name(name)) {
                continue;
            }
            let grad = t
                .grad
                .as_ref()
                .ok_or_else(|| Error::usage(format!("missing gradient on trainable parameter `{name}`")))?;
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            for (vi, g) in v.iter_mut().zip(grad) {
                *vi = self.momentum * *vi + g;
            }
            let v = v.clone();
            for (x, vi) in t.data_mut().iter_mut().zip(&v) {
                *x -= lr * vi;
            }
        }
        Ok(())
    }
}

/// Checks populated gradients for non-finite entries and a global L2
/// norm above `limit`. Returns the norm when healthy.
pub fn check_gradients(store: &ParameterStore, limit: f64) -> Result<f64> {
    let mut sq = 0.0;
    let mut largest: Option<(&str, f64)> = None;
    for (name, t) in store.iter() {
        let Some(g) = &t.grad else { continue };
        let mut local = 0.0;
        for v in g {
            if !v.is_finite() {
                return Err(Error::Explosion { param: name.to_string(), detail: "non-finite gradient".into() });
            }
            local += v * v;
        }
        sq += local;
        if largest.map_or(true, |(_, l)| local > l) {
            largest = Some((name, local));
        }
    }
    let norm = sq.sqrt();
    if norm > limit {
        let param = largest.map(|(n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::Explosion {
            param,
            detail: format!("global gradient norm {norm:.3e} exceeds {limit:.3e}"),
        });
    }
    Ok(norm)
}
