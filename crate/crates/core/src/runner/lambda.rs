use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::continual::{ewc_penalty_with_grad, GroupMask, ImportanceMatrix, Snapshot};
use crate::detector::Detector;
use crate::dilation::{build_trainability_policy, TrainabilityPolicy};
use crate::error::{Error, Result};
use crate::scenario::TaskProtocol;
use crate::tensor::ParameterStore;

use super::train::{
    continue_protocol, grow, incremental_examples, train_loop, BaseState, Memory, Regularizer, RunRecord, Schedule, TrainExample,
};
use super::{ExperimentConfig, MethodSpec};

/// A short stability trial at one penalty coefficient. `Err(Explosion)`
/// means the trial diverged; any other error aborts the search.
pub trait Probe {
    fn probe(&mut self, lambda: f64) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Explosion diagnostic per grid value; `None` when stable.
    pub explosions: Vec<Option<String>>,
    pub warning: Option<String>,
}

/// Largest grid value whose probe stays stable. Every grid value is
/// probed since stability need not be monotone in λ.
pub fn lambda_search(grid: &[f64], probe: &mut impl Probe) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return Err(Error::usage("lambda grid is empty"));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::usage("lambda grid must be strictly ascending, finite and nonnegative"));
    }
    let mut explosions = Vec::with_capacity(grid.len());
    for &l in grid {
        match probe.probe(l) {
            Ok(()) => explosions.push(None),
            Err(e @ Error::Explosion { .. }) => explosions.push(Some(e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let Some(best) = grid.iter().zip(&explosions).filter(|(_, e)| e.is_none()).map(|(l, _)| *l).last() else {
        return Err(Error::Explosion {
            param: "lambda".into(),
            detail: format!("every grid value exploded: {grid:?}"),
        });
    };
    let warning = explosions.iter().all(Option::is_none).then(|| {
        let w = format!("no grid value exploded; using the largest ({best}) which may be below the critical point");
        log::warn!("{w}");
        w
    });
    Ok(LambdaSearch { lambda: best, grid: grid.to_vec(), explosions, warning })
}

/// Runs the incremental steps at the searched λ*. A probe only covers the
/// start of one step, so a full run may still explode; it is then retried
/// at the next smaller stable grid value, and every abandoned attempt is
/// listed in the record's `explosions`.
pub fn continue_with_backoff(
    cfg: &ExperimentConfig,
    protocol: &TaskProtocol,
    base: &BaseState,
    search: &LambdaSearch,
) -> Result<RunRecord> {
    let mut candidates: Vec<f64> = search
        .grid
        .iter()
        .zip(&search.explosions)
        .filter(|(l, e)| e.is_none() && **l <= search.lambda)
        .map(|(l, _)| *l)
        .collect();
    candidates.reverse();
    let mut failures = Vec::new();
    let mut last = None;
    for lambda in candidates {
        let run_cfg = ExperimentConfig { lambda, ..cfg.clone() };
        match continue_protocol(&run_cfg, protocol, base.clone()) {
            Ok(mut record) => {
                record.explosions = failures;
                return Ok(record);
            }
            Err(e @ Error::Explosion { .. }) => {
                log::warn!("full run exploded at lambda {lambda}: {e}");
                failures.push(format!("lambda {lambda}: {e}"));
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::usage("lambda search has no stable grid value")))
}

/// SGD on the quadratic penalty alone, starting away from the anchor.
pub struct QuadraticProbe {
    pub store: ParameterStore,
    pub anchor: Snapshot,
    pub importance: ImportanceMatrix,
    pub mask: GroupMask,
    pub lr: f64,
    pub steps: usize,
    pub grad_norm_limit: f64,
}

impl Probe for QuadraticProbe {
    fn probe(&mut self, lambda: f64) -> Result<()> {
        let mut store = self.store.clone();
        for _ in 0..self.steps {
            let (_, grads) = ewc_penalty_with_grad(&store, &self.anchor, &self.importance, lambda, &self.mask)?;
            check_norm(&grads, self.grad_norm_limit)?;
            for (name, g) in &grads {
                let t = store.get_mut(name).expect("gradients come from the store");
                for (v, gi) in t.data_mut().iter_mut().zip(g) {
                    *v -= self.lr * gi;
                }
            }
        }
        Ok(())
    }
}

fn check_norm(grads: &BTreeMap<String, Vec<f64>>, limit: f64) -> Result<()> {
    let mut sq = 0.0;
    for (name, g) in grads {
        for v in g {
            if !v.is_finite() {
                return Err(Error::Explosion { param: name.clone(), detail: "non-finite gradient".into() });
            }
            sq += v * v;
        }
    }
    if sq.sqrt() > limit {
        return Err(Error::Explosion { param: "global".into(), detail: format!("gradient norm {} > {limit}", sq.sqrt()) });
    }
    Ok(())
}

/// Short run of the first incremental step of an experiment, restarted
/// from the same base model for every λ.
pub struct ExperimentProbe {
    det: Detector,
    data: Vec<TrainExample>,
    policy: TrainabilityPolicy,
    reg: Regularizer,
    schedule: Schedule,
    batch_size: usize,
    grad_limit: f64,
    seed: u64,
}

impl ExperimentProbe {
    pub fn new(cfg: &ExperimentConfig, protocol: &TaskProtocol, base: &BaseState) -> Result<Self> {
        if protocol.num_steps() < 2 {
            return Err(Error::usage("lambda search needs at least one incremental step"));
        }
        let spec: MethodSpec = cfg.method_spec();
        let base_data: Vec<TrainExample> = protocol.train[0]
            .samples
            .iter()
            .map(|s| TrainExample::new(&base.det, s.image.clone(), s.boxes.clone()))
            .collect::<Result<_>>()?;
        let mut memory = Memory::default();
        memory.record(cfg, &spec, &base.det, &base_data)?;
        let mut det = base.det.clone();
        grow(&mut det, &spec, 1, protocol.steps[1].len(), base.seed)?;
        let (data, _) = incremental_examples(cfg, &spec, protocol, &base.det, &det, 1)?;
        let iterations = ((cfg.iterations_for(1) as f64 * cfg.probe_fraction).ceil() as usize).max(1);
        Ok(ExperimentProbe {
            policy: build_trainability_policy(1, det.num_tasks()),
            reg: memory.regularizer(cfg, &spec),
            det,
            data,
            // the probe runs entirely before the learning-rate drop
            schedule: Schedule { iterations, lr: cfg.lr, decay_at: 1.0, momentum: cfg.momentum },
            batch_size: cfg.batch_size,
            grad_limit: cfg.grad_norm_limit,
            seed: base.seed,
        })
    }

    pub fn iterations(&self) -> usize {
        self.schedule.iterations
    }
}

impl Probe for ExperimentProbe {
    fn probe(&mut self, lambda: f64) -> Result<()> {
        let mut det = self.det.clone();
        let mut rng = super::train::probe_rng(self.seed);
        train_loop(&mut det, &self.data, &self.policy, &self.reg, lambda, &self.schedule, self.batch_size, self.grad_limit, &mut rng)
            .map(|_| ())
    }
}
