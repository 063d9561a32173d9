//! Analytic latency and memory-time cost of one MoE layer.
//!
//! A replica's compute time is linear in its token share (`alpha * share`), a
//! GPU's one-way all-to-all time is linear in the tokens it hosts
//! (`beta * sum(shares on g)`), and a layer's forward time is
//!
//! ```text
//! forward = max_replica(compute) + 2 * max_gpu(comm) + t_misc
//! ```
//!
//! Its cost bills the memory of every live replica for the expert part of
//! that window, plus `t_misc * m_misc` for the non-expert part.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placer::Placement;

/// Per-replica token share. Exact so that even splits and heap ordering do
/// not depend on floating point rounding.
pub type Share = Ratio<u64>;

pub fn share_to_f64(share: &Share) -> f64 {
    *share.numer() as f64 / *share.denom() as f64
}

// ─── Domain types ─────────────────────────────────────────────────────────────

/// A cluster of homogeneous GPUs and the latency model's coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub gpu_count: usize,
    /// Memory per GPU, MB.
    pub gpu_mem_capacity: f64,
    /// Processing coefficient, ms per token.
    pub alpha: f64,
    /// Communication coefficient, ms per token.
    pub beta: f64,
    /// Non-MoE latency per layer, ms.
    pub t_misc: f64,
    /// Non-MoE memory, MB.
    pub m_misc: f64,
}

impl Default for ClusterSpec {
    /// Four 48 GB GPUs. `alpha`, `beta`, `t_misc` and `m_misc` are calibration
    /// knobs, not measured values.
    fn default() -> Self {
        Self {
            gpu_count: 4,
            gpu_mem_capacity: 48_000.0,
            alpha: 0.01,
            beta: 0.002,
            t_misc: 0.5,
            m_misc: 0.0,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_count == 0 {
            return Err(Error::config("gpu_count", "must be >= 1"));
        }
        check_positive("gpu_mem_capacity_mb", self.gpu_mem_capacity)?;
        check_non_negative("alpha_ms_per_token", self.alpha)?;
        check_non_negative("beta_ms_per_token", self.beta)?;
        check_non_negative("t_misc_ms", self.t_misc)?;
        check_non_negative("m_misc_mb", self.m_misc)?;
        Ok(())
    }
}

/// Shape of the served MoE model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    /// Memory of one expert replica, MB.
    pub expert_mem: f64,
    /// Per-layer budget for replicas beyond the mandatory one per expert, MB.
    pub layer_mem_cap: f64,
}

impl Default for ModelSpec {
    /// 8 layers of 16 experts with top-2 routing. 330 MB per expert; the
    /// per-layer cap allows doubling the replica count.
    fn default() -> Self {
        Self {
            num_layers: 8,
            experts_per_layer: 16,
            top_k: 2,
            expert_mem: 330.0,
            layer_mem_cap: 16.0 * 330.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be >= 1"));
        }
        if self.experts_per_layer == 0 {
            return Err(Error::config("experts_per_layer", "must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(Error::config(
                "top_k",
                format!(
                    "must be in [1, experts_per_layer = {}]",
                    self.experts_per_layer
                ),
            ));
        }
        check_positive("expert_mem_mb", self.expert_mem)?;
        check_non_negative("layer_mem_cap_mb", self.layer_mem_cap)?;
        Ok(())
    }

    /// Number of additional replicas the per-layer cap can pay for.
    pub fn extra_replica_budget(&self) -> usize {
        (self.layer_mem_cap / self.expert_mem + 1e-9).floor() as usize
    }
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::config(key, format!("must be > 0, got {v}")));
    }
    Ok(())
}

fn check_non_negative(key: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::config(key, format!("must be >= 0, got {v}")));
    }
    Ok(())
}

/// Per-expert token counts of one layer in one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoadVector {
    pub layer: usize,
    pub loads: Vec<u64>,
}

impl LoadVector {
    pub fn new(layer: usize, loads: Vec<u64>) -> Self {
        Self { layer, loads }
    }

    pub fn zeros(layer: usize, experts: usize) -> Self {
        Self::new(layer, vec![0; experts])
    }

    pub fn total(&self) -> u64 {
        self.loads.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }
}

/// One replica's even share of its expert's load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaShare {
    pub expert: usize,
    pub ordinal: u32,
    pub load: Share,
}

/// Replica counts per expert and the resulting per-replica shares.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPlan {
    pub layer: usize,
    pub replica_counts: Vec<u32>,
    /// Expert-major, ordinal-minor.
    pub shares: Vec<ReplicaShare>,
    /// Memory of replicas beyond one per expert, MB.
    pub alloc_mem: f64,
}

impl ScalingPlan {
    /// Builds a plan that splits each expert's load evenly over its replicas.
    pub fn from_counts(
        layer: usize,
        loads: &[u64],
        counts: &[u32],
        expert_mem: f64,
    ) -> Result<Self> {
        if loads.len() != counts.len() {
            return Err(Error::Dimension(format!(
                "{} loads vs {} replica counts",
                loads.len(),
                counts.len()
            )));
        }
        if let Some(e) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Dimension(format!("expert {e} has zero replicas")));
        }
        let shares = loads
            .iter()
            .zip(counts)
            .enumerate()
            .flat_map(|(expert, (&w, &r))| {
                let load = Share::new(w, u64::from(r));
                (0..r).map(move |ordinal| ReplicaShare {
                    expert,
                    ordinal,
                    load,
                })
            })
            .collect();
        let extra = counts.iter().map(|&c| u64::from(c) - 1).sum::<u64>();
        Ok(Self {
            layer,
            replica_counts: counts.to_vec(),
            shares,
            alloc_mem: extra as f64 * expert_mem,
        })
    }

    /// One replica per expert.
    pub fn single(layer: usize, loads: &[u64]) -> Self {
        Self::from_counts(layer, loads, &vec![1; loads.len()], 0.0)
            .expect("unit counts are always valid")
    }

    /// Same replica counts, shares recomputed from `loads`.
    pub fn resplit(&self, loads: &[u64]) -> Result<Self> {
        let mut plan = Self::from_counts(self.layer, loads, &self.replica_counts, 0.0)?;
        plan.alloc_mem = self.alloc_mem;
        Ok(plan)
    }

    pub fn experts(&self) -> usize {
        self.replica_counts.len()
    }

    pub fn total_replicas(&self) -> usize {
        self.replica_counts.iter().map(|&c| c as usize).sum()
    }

    pub fn share_values(&self) -> Vec<f64> {
        self.shares.iter().map(|s| share_to_f64(&s.load)).collect()
    }
}

/// Latency and cost of one layer in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub forward_ms: f64,
    pub replica_count: usize,
    pub mem_mb: f64,
    /// MB·ms.
    pub cost: f64,
}

impl LayerMetrics {
    /// Assembles the metrics from their terms; `forward_ms` and `cost` are
    /// derived so that they are exactly the sum of the declared terms.
    pub fn from_terms(
        compute_ms: f64,
        comm_ms: f64,
        replica_count: usize,
        expert_mem: f64,
        cluster: &ClusterSpec,
    ) -> Self {
        let moe_ms = compute_ms + 2.0 * comm_ms;
        let mem_mb = replica_count as f64 * expert_mem;
        Self {
            compute_ms,
            comm_ms,
            forward_ms: moe_ms + cluster.t_misc,
            replica_count,
            mem_mb,
            cost: moe_ms * mem_mb + cluster.t_misc * cluster.m_misc,
        }
    }
}

// ─── Operations ───────────────────────────────────────────────────────────────

/// `alpha * load_share`.
pub fn replica_time(load_share: f64, alpha: f64) -> f64 {
    alpha * load_share
}

/// One-way all-to-all time of every GPU: `beta` times the tokens it hosts.
pub fn gpu_comm_times(
    plan: &ScalingPlan,
    placement: &Placement,
    beta: f64,
    gpu_count: usize,
) -> Result<Vec<f64>> {
    let gpus = placement.resolve(plan, gpu_count)?;
    let mut tokens = vec![0.0; gpu_count];
    for (share, g) in plan.shares.iter().zip(gpus) {
        tokens[g] += share_to_f64(&share.load);
    }
    Ok(tokens.into_iter().map(|t| beta * t).collect())
}

/// Evaluates a plan made from a prediction against the realized loads.
///
/// Each expert's actual load is split evenly over the replicas the plan gave
/// it, then timed with the linear compute and communication model.
pub fn layer_forward_time(
    plan: &ScalingPlan,
    placement: &Placement,
    actual: &LoadVector,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<LayerMetrics> {
    if actual.len() != plan.experts() {
        return Err(Error::Dimension(format!(
            "actual load has {} experts, plan has {}",
            actual.len(),
            plan.experts()
        )));
    }
    if placement.layer != plan.layer {
        return Err(Error::Dimension(format!(
            "placement is for layer {}, plan for layer {}",
            placement.layer, plan.layer
        )));
    }
    let realized = plan.resplit(&actual.loads)?;
    let compute_ms = realized
        .shares
        .iter()
        .map(|s| replica_time(share_to_f64(&s.load), cluster.alpha))
        .fold(0.0, f64::max);
    let comm_ms = gpu_comm_times(&realized, placement, cluster.beta, cluster.gpu_count)?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(LayerMetrics::from_terms(
        compute_ms,
        comm_ms,
        plan.total_replicas(),
        model.expert_mem,
        cluster,
    ))
}

/// Population standard deviation over mean. An all-zero vector is perfectly
/// balanced and yields 0.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty(
            "coefficient_of_variation needs at least one value",
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Serverful billing: every expert of every layer stays resident for the
/// whole run.
pub fn serverful_cost(model: &ModelSpec, cluster: &ClusterSpec, total_latency_ms: f64) -> f64 {
    let resident =
        (model.experts_per_layer * model.num_layers) as f64 * model.expert_mem + cluster.m_misc;
    resident * total_latency_ms
}
