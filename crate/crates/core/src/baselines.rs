//! Reference policies and the exhaustive optimizer for tiny instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::{
    layer_forward_time, share_to_f64, ClusterSpec, LayerMetrics, LoadVector, ModelSpec, ScalingPlan,
};
use crate::error::{Error, Result};
use crate::placer::{place_experts, round_robin, Assignment, Placement, ReplicaRegistry};
use crate::scaler::split_with_budget;

/// Serving policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Predict, scale and place every layer of every iteration.
    Serverless,
    /// One replica per expert, round-robin, never changes.
    Static,
    /// Fixed replica budget re-planned from historical usage every
    /// `period_iters` iterations.
    Eplb {
        period_iters: usize,
        replica_budget: usize,
    },
    /// Perfect balance, evaluated analytically. Lossy: it ignores routing.
    OracleBalance,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Serverless => "serverless",
            PolicyKind::Static => "static",
            PolicyKind::Eplb { .. } => "eplb",
            PolicyKind::OracleBalance => "oracle_balance",
        }
    }

    pub fn is_serverful(&self) -> bool {
        !matches!(self, PolicyKind::Serverless)
    }

    pub fn validate(&self) -> Result<()> {
        if let PolicyKind::Eplb { period_iters, .. } = self {
            if *period_iters == 0 {
                return Err(Error::config("eplb_period_iters", "must be >= 1"));
            }
        }
        Ok(())
    }
}

// ─── Static expert parallelism ────────────────────────────────────────────────

/// One replica per expert, expert `e` on GPU `e mod G`.
pub fn static_plan(
    layer: usize,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<(ScalingPlan, Placement)> {
    let plan = ScalingPlan::single(layer, &vec![0; model.experts_per_layer]);
    let placement = round_robin(&plan, cluster, model.expert_mem)?;
    Ok((plan, placement))
}

// ─── EPLB-style periodic rebalancing ──────────────────────────────────────────

/// Plan from historical usage: the experts with the largest mean load receive
/// the fixed replica budget one replica at a time (largest per-replica share
/// first), then replicas are placed by the cold JSQ path. No history means all
/// experts are assumed equally loaded.
pub fn eplb_plan(
    layer: usize,
    history: &[LoadVector],
    replica_budget: usize,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<(ScalingPlan, Placement)> {
    let e_count = model.experts_per_layer;
    // Sums are proportional to means and stay integral.
    let mut usage = vec![0u64; e_count];
    for lv in history {
        for (u, &w) in usage.iter_mut().zip(&lv.loads) {
            *u += w;
        }
    }
    if usage.iter().all(|&u| u == 0) {
        usage.iter_mut().for_each(|u| *u = 1);
    }
    let plan = split_with_budget(
        &LoadVector::new(layer, usage),
        replica_budget,
        model.expert_mem,
    )?;
    let placed = place_experts(
        &plan,
        cluster,
        model.expert_mem,
        &ReplicaRegistry::new(0),
        0,
    )?;
    Ok((plan, placed.placement))
}

/// Per-layer EPLB state: the current plan is kept until the next refresh.
#[derive(Debug, Clone)]
pub struct EplbPolicy {
    pub period_iters: usize,
    pub replica_budget: usize,
    plans: Vec<Option<(ScalingPlan, Placement)>>,
}

impl EplbPolicy {
    pub fn new(period_iters: usize, replica_budget: usize, layers: usize) -> Self {
        Self {
            period_iters: period_iters.max(1),
            replica_budget,
            plans: vec![None; layers],
        }
    }

    /// Plan for `layer` at `iteration`, refreshed when `iteration` is a
    /// multiple of the period.
    pub fn plan(
        &mut self,
        layer: usize,
        iteration: usize,
        history: &[LoadVector],
        model: &ModelSpec,
        cluster: &ClusterSpec,
    ) -> Result<&(ScalingPlan, Placement)> {
        let slot = &mut self.plans[layer];
        if slot.is_none() || iteration % self.period_iters == 0 {
            *slot = Some(eplb_plan(
                layer,
                history,
                self.replica_budget,
                model,
                cluster,
            )?);
        }
        Ok(slot.as_ref().expect("just filled"))
    }
}

// ─── Perfect-balance oracle ───────────────────────────────────────────────────

/// Layer time if the whole load were spread perfectly: every one of `slots`
/// replicas carries `total / slots` tokens and every GPU hosts `total / G`.
///
/// Under the max-over-replicas compute model this is a lower bound for any
/// plan with at most `slots` replicas.
pub fn oracle_balance_time(
    actual: &LoadVector,
    slots: usize,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> LayerMetrics {
    let total = actual.total() as f64;
    let slots = slots.max(1);
    let compute = cluster.alpha * total / slots as f64;
    let comm = cluster.beta * total / cluster.gpu_count as f64;
    LayerMetrics::from_terms(compute, comm, slots, model.expert_mem, cluster)
}

// ─── Exhaustive optimum ───────────────────────────────────────────────────────

pub const BRUTE_FORCE_MAX_EXPERTS: usize = 4;
pub const BRUTE_FORCE_MAX_GPUS: usize = 3;
pub const BRUTE_FORCE_MAX_EXTRA: usize = 4;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub plan: ScalingPlan,
    pub placement: Placement,
    pub metrics: LayerMetrics,
}

/// All count vectors with `sum(c - 1) <= extra`, lexicographic.
fn count_vectors(experts: usize, extra: usize) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, experts: usize, left: usize, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == experts {
            out.push(prefix.clone());
            return;
        }
        for add in 0..=left {
            prefix.push(1 + add as u32);
            rec(prefix, experts, left - add, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), experts, extra, &mut out);
    out
}

/// Forward time, replica counts and replica→GPU assignment.
type Candidate = (f64, Vec<u32>, Vec<usize>);

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    let tol = TIE_EPS * a.0.abs().max(b.0.abs()).max(1.0);
    a.0 < b.0 - tol || ((a.0 - b.0).abs() <= tol && a.1 < b.1)
}

/// Minimum single-layer forward time over every replica count vector within
/// `max_extra_replicas` and every memory-feasible replica→GPU assignment.
/// Ties go to fewer replicas, then lexicographically smaller counts and
/// assignments.
pub fn brute_force_optimal(
    predicted: &LoadVector,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    max_extra_replicas: usize,
) -> Result<Optimum> {
    let e_count = predicted.len();
    let g_count = cluster.gpu_count;
    if e_count == 0 {
        return Err(Error::Empty("brute force needs at least one expert"));
    }
    if e_count > BRUTE_FORCE_MAX_EXPERTS
        || g_count > BRUTE_FORCE_MAX_GPUS
        || max_extra_replicas > BRUTE_FORCE_MAX_EXTRA
    {
        return Err(Error::GuardExceeded(format!(
            "E={e_count} (max {BRUTE_FORCE_MAX_EXPERTS}), G={g_count} (max {BRUTE_FORCE_MAX_GPUS}), \
             extra={max_extra_replicas} (max {BRUTE_FORCE_MAX_EXTRA})"
        )));
    }
    let per_gpu_slots = (cluster.gpu_mem_capacity / model.expert_mem + 1e-9).floor() as usize;

    let candidates: Vec<Option<Candidate>> = count_vectors(e_count, max_extra_replicas)
        .into_par_iter()
        .map(|counts| {
            let plan = ScalingPlan::from_counts(
                predicted.layer,
                &predicted.loads,
                &counts,
                model.expert_mem,
            )
            .expect("counts are positive");
            let shares = plan.share_values();
            let compute = shares.iter().map(|s| cluster.alpha * s).fold(0.0, f64::max);
            let n = shares.len();
            // Odometer over G^n assignments; first minimum in lexicographic order wins.
            let mut assign = vec![0usize; n];
            let mut best: Option<(f64, Vec<usize>)> = None;
            loop {
                let mut used = vec![0usize; g_count];
                let mut load = vec![0.0; g_count];
                for (s, &g) in shares.iter().zip(&assign) {
                    used[g] += 1;
                    load[g] += s;
                }
                if used.iter().all(|&u| u <= per_gpu_slots) {
                    let comm = cluster.beta * load.iter().copied().fold(0.0, f64::max);
                    let t = compute + 2.0 * comm;
                    if best.as_ref().is_none_or(|(bt, _)| better((t, 0), (*bt, 0))) {
                        best = Some((t, assign.clone()));
                    }
                }
                let mut i = n;
                loop {
                    if i == 0 {
                        return best.map(|(t, a)| (t, counts, a));
                    }
                    i -= 1;
                    assign[i] += 1;
                    if assign[i] < g_count {
                        break;
                    }
                    assign[i] = 0;
                }
            }
        })
        .collect();

    let mut best: Option<Candidate> = None;
    for (t, counts, assign) in candidates.into_iter().flatten() {
        let replicas = assign.len();
        let take = match &best {
            None => true,
            Some((bt, _, ba)) => better((t, replicas), (*bt, ba.len())),
        };
        if take {
            best = Some((t, counts, assign));
        }
    }
    let (_, counts, assign) = best.ok_or(Error::PlacementInfeasible {
        layer: predicted.layer,
        expert: 0,
        ordinal: 0,
        needed_mb: model.expert_mem,
    })?;

    let plan =
        ScalingPlan::from_counts(predicted.layer, &predicted.loads, &counts, model.expert_mem)?;
    let assignments = plan
        .shares
        .iter()
        .zip(&assign)
        .map(|(s, &gpu)| Assignment {
            expert: s.expert,
            ordinal: s.ordinal,
            gpu,
        })
        .collect();
    let placement =
        Placement::from_assignments(predicted.layer, assignments, g_count, model.expert_mem);
    let metrics = layer_forward_time(&plan, &placement, predicted, model, cluster)?;
    Ok(Optimum {
        plan,
        placement,
        metrics,
    })
}

/// Communication makespan `max_g sum(shares on g)` of a placement.
pub fn comm_makespan(plan: &ScalingPlan, placement: &Placement, gpu_count: usize) -> Result<f64> {
    Ok(placement
        .gpu_loads(plan, gpu_count)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Largest share of a plan.
pub fn max_share(plan: &ScalingPlan) -> f64 {
    plan.shares
        .iter()
        .map(|s| share_to_f64(&s.load))
        .fold(0.0, f64::max)
}
