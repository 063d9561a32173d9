//! Greedy straggler splitting.
//!
//! Every expert starts with one replica. While the per-layer budget can pay
//! for another replica and the coefficient of variation of the per-replica
//! loads is above the threshold, the expert with the largest per-replica
//! share gets one more replica and its load is re-split evenly.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::cost_model::{
    coefficient_of_variation, share_to_f64, LoadVector, ModelSpec, ScalingPlan, Share,
};
use crate::error::{Error, Result};

const MEM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerConfig {
    /// Stop once the CV of per-replica loads is at or below this value.
    pub cv_threshold: f64,
    /// Count replicas of zero-load experts in the CV.
    pub include_zero_loads: bool,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        Self {
            cv_threshold: 0.2,
            include_zero_loads: true,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cv_threshold.is_finite() && self.cv_threshold >= 0.0) {
            return Err(Error::config(
                "cv_threshold",
                format!("must be >= 0, got {}", self.cv_threshold),
            ));
        }
        Ok(())
    }
}

/// CV of the multiset of per-replica loads described by `(loads, counts)`.
fn replica_cv(loads: &[u64], counts: &[u32], include_zero: bool) -> f64 {
    let values: Vec<f64> = loads
        .iter()
        .zip(counts)
        .filter(|(&w, _)| include_zero || w > 0)
        .flat_map(|(&w, &r)| std::iter::repeat_n(w as f64 / f64::from(r), r as usize))
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    coefficient_of_variation(&values).unwrap_or(0.0)
}

/// Heap key: largest share first, then lowest expert index.
#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Straggler {
    share: Share,
    expert: Reverse<usize>,
}

/// Replica counts plus a max-heap of per-replica shares.
struct Splitter<'a> {
    loads: &'a [u64],
    counts: Vec<u32>,
    heap: BinaryHeap<Straggler>,
}

impl<'a> Splitter<'a> {
    fn new(loads: &'a [u64]) -> Self {
        let heap = loads
            .iter()
            .enumerate()
            .map(|(e, &w)| Straggler {
                share: Share::from_integer(w),
                expert: Reverse(e),
            })
            .collect();
        Self {
            loads,
            counts: vec![1; loads.len()],
            heap,
        }
    }

    /// Adds a replica to the expert with the largest share and returns the
    /// share it had before the split.
    fn split_heaviest(&mut self) -> Share {
        let top = self.heap.pop().expect("heap holds one entry per expert");
        let e = top.expert.0;
        self.counts[e] += 1;
        self.heap.push(Straggler {
            share: Share::new(self.loads[e], u64::from(self.counts[e])),
            expert: top.expert,
        });
        top.share
    }
}

/// Splits the heaviest experts of `predicted` until the load is balanced or
/// the per-layer budget is spent.
pub fn scale_experts(
    predicted: &LoadVector,
    model: &ModelSpec,
    config: &ScalerConfig,
) -> Result<ScalingPlan> {
    Ok(scale_experts_traced(predicted, model, config)?.0)
}

/// Same as [`scale_experts`], also returning the maximum per-replica share
/// before each split.
pub fn scale_experts_traced(
    predicted: &LoadVector,
    model: &ModelSpec,
    config: &ScalerConfig,
) -> Result<(ScalingPlan, Vec<Share>)> {
    if predicted.is_empty() {
        return Err(Error::Empty("scale_experts needs at least one expert"));
    }
    let mut splitter = Splitter::new(&predicted.loads);
    let mut alloc = 0.0;
    let mut trace = Vec::new();
    while alloc + model.expert_mem <= model.layer_mem_cap + MEM_EPS
        && replica_cv(
            &predicted.loads,
            &splitter.counts,
            config.include_zero_loads,
        ) > config.cv_threshold
    {
        trace.push(splitter.split_heaviest());
        alloc += model.expert_mem;
    }
    let plan = ScalingPlan::from_counts(
        predicted.layer,
        &predicted.loads,
        &splitter.counts,
        model.expert_mem,
    )?;
    Ok((plan, trace))
}

/// Spends exactly `extra_replicas` additional replicas on the heaviest
/// per-replica shares, with no balance stop.
pub fn split_with_budget(
    predicted: &LoadVector,
    extra_replicas: usize,
    expert_mem: f64,
) -> Result<ScalingPlan> {
    if predicted.is_empty() {
        return Err(Error::Empty("split_with_budget needs at least one expert"));
    }
    let mut splitter = Splitter::new(&predicted.loads);
    for _ in 0..extra_replicas {
        splitter.split_heaviest();
    }
    ScalingPlan::from_counts(
        predicted.layer,
        &predicted.loads,
        &splitter.counts,
        expert_mem,
    )
}

/// Result of [`verify_plan`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanReport {
    pub violations: Vec<String>,
}

impl PlanReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a plan against the scaler's contract: per-expert conservation,
/// equal shares, replica bookkeeping, the memory budget, and the stopping
/// condition (balanced, or no budget left for another replica).
pub fn verify_plan(
    plan: &ScalingPlan,
    predicted: &LoadVector,
    model: &ModelSpec,
    config: &ScalerConfig,
) -> PlanReport {
    let mut v = Vec::new();
    let e_count = predicted.len();
    if plan.replica_counts.len() != e_count {
        v.push(format!(
            "plan covers {} experts, prediction has {}",
            plan.replica_counts.len(),
            e_count
        ));
        return PlanReport { violations: v };
    }
    for (e, &r) in plan.replica_counts.iter().enumerate() {
        if r == 0 {
            v.push(format!("expert {e} has no replica"));
        }
        let shares: Vec<_> = plan.shares.iter().filter(|s| s.expert == e).collect();
        if shares.len() != r as usize {
            v.push(format!(
                "expert {e}: {} shares for {r} replicas",
                shares.len()
            ));
        }
        let mut ordinals: Vec<u32> = shares.iter().map(|s| s.ordinal).collect();
        ordinals.sort_unstable();
        if ordinals != (0..r).collect::<Vec<_>>() {
            v.push(format!("expert {e}: replica ordinals are not 0..{r}"));
        }
        if shares.windows(2).any(|w| w[0].load != w[1].load) {
            v.push(format!("expert {e}: unequal shares"));
        }
        let sum = shares
            .iter()
            .fold(Share::from_integer(0), |acc, s| acc + s.load);
        if sum != Share::from_integer(predicted.loads[e]) {
            v.push(format!(
                "expert {e}: shares sum to {}, expected {}",
                share_to_f64(&sum),
                predicted.loads[e]
            ));
        }
    }
    if plan.shares.iter().any(|s| s.expert >= e_count) {
        v.push("share references an unknown expert".into());
    }
    let extra = plan.total_replicas().saturating_sub(e_count) as f64;
    let expected_alloc = extra * model.expert_mem;
    if (plan.alloc_mem - expected_alloc).abs() > MEM_EPS * expected_alloc.max(1.0) {
        v.push(format!(
            "alloc_mem {} does not match {} extra replicas",
            plan.alloc_mem, extra
        ));
    }
    if plan.alloc_mem > model.layer_mem_cap + MEM_EPS {
        v.push(format!(
            "alloc_mem {} exceeds layer_mem_cap {}",
            plan.alloc_mem, model.layer_mem_cap
        ));
    }
    let cv = replica_cv(
        &predicted.loads,
        &plan.replica_counts,
        config.include_zero_loads,
    );
    let exhausted = plan.alloc_mem + model.expert_mem > model.layer_mem_cap + MEM_EPS;
    if cv > config.cv_threshold && !exhausted {
        v.push(format!(
            "stopped early: CV {cv:.4} > {} with budget left",
            config.cv_threshold
        ));
    }
    PlanReport { violations: v }
}
