//! Replica-to-GPU placement with warm reuse, and the keep-alive registry.
//!
//! Replicas are taken heaviest first. A replica whose identity
//! `(layer, expert, ordinal)` is still alive on some GPU goes back there if
//! that GPU has room; anything else joins the GPU with the smallest
//! accumulated token load (JSQ). Taking items in non-increasing order onto the
//! least-loaded server is LPT, so the cold path inherits the
//! `4/3 - 1/(3G)` makespan bound.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost_model::{share_to_f64, ClusterSpec, ScalingPlan};
use crate::error::{Error, Result};

const MEM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assignment {
    pub expert: usize,
    pub ordinal: u32,
    pub gpu: usize,
}

/// Where every replica of one layer runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub layer: usize,
    /// In placement order.
    pub assignments: Vec<Assignment>,
    /// Replica memory of this layer on each GPU, MB.
    pub per_gpu_mem: Vec<f64>,
}

impl Placement {
    pub fn from_assignments(
        layer: usize,
        assignments: Vec<Assignment>,
        gpu_count: usize,
        expert_mem: f64,
    ) -> Self {
        let mut per_gpu_mem = vec![0.0; gpu_count];
        for a in &assignments {
            if let Some(m) = per_gpu_mem.get_mut(a.gpu) {
                *m += expert_mem;
            }
        }
        Self {
            layer,
            assignments,
            per_gpu_mem,
        }
    }

    /// GPU of each share of `plan`, in the plan's share order. Fails unless
    /// every replica of the plan is placed exactly once on a valid GPU.
    pub fn resolve(&self, plan: &ScalingPlan, gpu_count: usize) -> Result<Vec<usize>> {
        let mut by_id: BTreeMap<(usize, u32), usize> = BTreeMap::new();
        for a in &self.assignments {
            if a.gpu >= gpu_count {
                return Err(Error::PlacementInconsistent(format!(
                    "expert {} replica {} on GPU {} of {}",
                    a.expert, a.ordinal, a.gpu, gpu_count
                )));
            }
            if by_id.insert((a.expert, a.ordinal), a.gpu).is_some() {
                return Err(Error::PlacementInconsistent(format!(
                    "expert {} replica {} placed twice",
                    a.expert, a.ordinal
                )));
            }
        }
        if by_id.len() != plan.shares.len() {
            return Err(Error::PlacementInconsistent(format!(
                "{} assignments for {} replicas",
                by_id.len(),
                plan.shares.len()
            )));
        }
        plan.shares
            .iter()
            .map(|s| {
                by_id.get(&(s.expert, s.ordinal)).copied().ok_or_else(|| {
                    Error::PlacementInconsistent(format!(
                        "expert {} replica {} unplaced",
                        s.expert, s.ordinal
                    ))
                })
            })
            .collect()
    }

    pub fn gpu_of(&self, expert: usize, ordinal: u32) -> Option<usize> {
        self.assignments
            .iter()
            .find(|a| a.expert == expert && a.ordinal == ordinal)
            .map(|a| a.gpu)
    }

    /// Token load per GPU under `plan`'s shares.
    pub fn gpu_loads(&self, plan: &ScalingPlan, gpu_count: usize) -> Result<Vec<f64>> {
        let gpus = self.resolve(plan, gpu_count)?;
        let mut loads = vec![0.0; gpu_count];
        for (s, g) in plan.shares.iter().zip(gpus) {
            loads[g] += share_to_f64(&s.load);
        }
        Ok(loads)
    }
}

// ─── Keep-alive registry ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub gpu: usize,
    pub last_used: usize,
}

/// Replicas kept alive from earlier placements, keyed by
/// `(layer, expert, ordinal)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplicaRegistry {
    pub entries: BTreeMap<(usize, usize, u32), RegistryEntry>,
    pub keep_alive_iters: usize,
}

impl ReplicaRegistry {
    pub fn new(keep_alive_iters: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            keep_alive_iters,
        }
    }

    fn is_live(&self, entry: &RegistryEntry, iteration: usize) -> bool {
        iteration.saturating_sub(entry.last_used) <= self.keep_alive_iters
    }

    /// GPU of a replica that is still alive at `iteration`.
    pub fn live_gpu(
        &self,
        layer: usize,
        expert: usize,
        ordinal: u32,
        iteration: usize,
    ) -> Option<usize> {
        self.entries
            .get(&(layer, expert, ordinal))
            .filter(|e| self.is_live(e, iteration))
            .map(|e| e.gpu)
    }

    pub fn evict_stale(&mut self, iteration: usize) {
        let keep = self.keep_alive_iters;
        self.entries
            .retain(|_, e| iteration.saturating_sub(e.last_used) <= keep);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Records `placement` as used at `iteration`, releases replicas of the
/// layer that the new plan scaled away, and drops expired entries.
pub fn update_registry(registry: &mut ReplicaRegistry, placement: &Placement, iteration: usize) {
    let layer = placement.layer;
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for a in &placement.assignments {
        let c = counts.entry(a.expert).or_default();
        *c = (*c).max(a.ordinal + 1);
    }
    registry
        .entries
        .retain(|&(l, e, r), _| l != layer || counts.get(&e).is_some_and(|&c| r < c));
    for a in &placement.assignments {
        registry.entries.insert(
            (layer, a.expert, a.ordinal),
            RegistryEntry {
                gpu: a.gpu,
                last_used: iteration,
            },
        );
    }
    registry.evict_stale(iteration);
}

// ─── Placement ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementOutcome {
    pub placement: Placement,
    pub warm: usize,
    pub cold: usize,
}

/// Places every replica of `plan`, heaviest first: warm reuse when the
/// replica is alive and its GPU has room, otherwise the least-loaded GPU that
/// has room (lowest index on ties).
pub fn place_experts(
    plan: &ScalingPlan,
    cluster: &ClusterSpec,
    expert_mem: f64,
    registry: &ReplicaRegistry,
    iteration: usize,
) -> Result<PlacementOutcome> {
    let g_count = cluster.gpu_count;
    let cap = cluster.gpu_mem_capacity;
    let needed = plan.total_replicas() as f64 * expert_mem;
    if needed > g_count as f64 * cap + MEM_EPS {
        let s = plan
            .shares
            .last()
            .ok_or(Error::Empty("plan has no replicas"))?;
        return Err(Error::PlacementInfeasible {
            layer: plan.layer,
            expert: s.expert,
            ordinal: s.ordinal,
            needed_mb: expert_mem,
        });
    }

    let mut order: Vec<_> = plan.shares.iter().collect();
    order.sort_by_key(|s| (Reverse(s.load), s.expert, s.ordinal));

    let mut gpu_load = vec![0.0f64; g_count];
    let mut gpu_mem = vec![0.0f64; g_count];
    let fits = |mem: &[f64], g: usize| mem[g] + expert_mem <= cap + MEM_EPS;
    let mut assignments = Vec::with_capacity(order.len());
    let (mut warm, mut cold) = (0, 0);

    for s in order {
        let warm_gpu = registry
            .live_gpu(plan.layer, s.expert, s.ordinal, iteration)
            .filter(|&g| g < g_count && fits(&gpu_mem, g));
        let gpu = match warm_gpu {
            Some(g) => {
                warm += 1;
                g
            }
            None => {
                let mut best: Option<usize> = None;
                for g in 0..g_count {
                    if fits(&gpu_mem, g) && best.is_none_or(|b| gpu_load[g] < gpu_load[b]) {
                        best = Some(g);
                    }
                }
                cold += 1;
                best.ok_or(Error::PlacementInfeasible {
                    layer: plan.layer,
                    expert: s.expert,
                    ordinal: s.ordinal,
                    needed_mb: expert_mem,
                })?
            }
        };
        gpu_load[gpu] += share_to_f64(&s.load);
        gpu_mem[gpu] += expert_mem;
        assignments.push(Assignment {
            expert: s.expert,
            ordinal: s.ordinal,
            gpu,
        });
    }

    Ok(PlacementOutcome {
        placement: Placement {
            layer: plan.layer,
            assignments,
            per_gpu_mem: gpu_mem,
        },
        warm,
        cold,
    })
}

/// Load-oblivious placement: the k-th replica in expert-major order goes to
/// GPU `k mod G`. With one replica per expert this is `expert mod G`.
pub fn round_robin(
    plan: &ScalingPlan,
    cluster: &ClusterSpec,
    expert_mem: f64,
) -> Result<Placement> {
    let g_count = cluster.gpu_count;
    let assignments: Vec<_> = plan
        .shares
        .iter()
        .enumerate()
        .map(|(k, s)| Assignment {
            expert: s.expert,
            ordinal: s.ordinal,
            gpu: k % g_count,
        })
        .collect();
    let placement = Placement::from_assignments(plan.layer, assignments, g_count, expert_mem);
    if let Some(g) = placement
        .per_gpu_mem
        .iter()
        .position(|&m| m > cluster.gpu_mem_capacity + MEM_EPS)
    {
        let a = placement
            .assignments
            .iter()
            .rev()
            .find(|a| a.gpu == g)
            .expect("gpu holds replicas");
        return Err(Error::PlacementInfeasible {
            layer: plan.layer,
            expert: a.expert,
            ordinal: a.ordinal,
            needed_mb: expert_mem,
        });
    }
    Ok(placement)
}

/// Replicas of `placement` that sit where the registry already has them alive.
pub fn count_warm(registry: &ReplicaRegistry, placement: &Placement, iteration: usize) -> usize {
    placement
        .assignments
        .iter()
        .filter(|a| {
            registry.live_gpu(placement.layer, a.expert, a.ordinal, iteration) == Some(a.gpu)
        })
        .count()
}
