//! Heuristic-versus-optimum check on random small instances.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    brute_force_optimal, BRUTE_FORCE_MAX_EXPERTS, BRUTE_FORCE_MAX_EXTRA, BRUTE_FORCE_MAX_GPUS,
};
use crate::cost_model::{layer_forward_time, ClusterSpec, LoadVector, ModelSpec};
use crate::error::{Error, Result};
use crate::placer::{place_experts, ReplicaRegistry};
use crate::rng::{self, Stream};
use crate::scaler::{scale_experts, ScalerConfig};
use crate::sim::report::percentile;
use crate::workload::{route_tokens, IterationBatch, Phase, PopularityProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckParams {
    pub instances: usize,
    pub seed: u64,
    pub max_experts: usize,
    pub max_gpus: usize,
    pub max_extra: usize,
    pub zipf_exponent: f64,
    /// Declared calibration target for the heuristic/optimal ratio.
    pub tolerance: f64,
    /// Equal loads on every expert, `G` dividing `E` and fewer extra replicas
    /// than experts: the instances where both sides reduce to static.
    pub uniform: bool,
    pub max_tokens_per_expert: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Non-MoE time is the same on both sides; 0 compares the MoE part only.
    pub t_misc: f64,
    pub cv_threshold: f64,
}

impl Default for OracleCheckParams {
    fn default() -> Self {
        Self {
            instances: 200,
            seed: 0,
            max_experts: BRUTE_FORCE_MAX_EXPERTS,
            max_gpus: BRUTE_FORCE_MAX_GPUS,
            max_extra: BRUTE_FORCE_MAX_EXTRA,
            zipf_exponent: 1.2,
            tolerance: 1.5,
            uniform: false,
            max_tokens_per_expert: 64,
            alpha: 0.01,
            beta: 0.002,
            t_misc: 0.0,
            cv_threshold: 0.2,
        }
    }
}

impl OracleCheckParams {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::config("instances", "must be >= 1"));
        }
        for (key, v, max) in [
            ("max_experts", self.max_experts, BRUTE_FORCE_MAX_EXPERTS),
            ("max_gpus", self.max_gpus, BRUTE_FORCE_MAX_GPUS),
            ("max_extra", self.max_extra, BRUTE_FORCE_MAX_EXTRA),
        ] {
            if v > max {
                return Err(Error::GuardExceeded(format!(
                    "{key}={v} exceeds the brute-force limit {max}"
                )));
            }
        }
        if self.max_experts == 0 || self.max_gpus == 0 {
            return Err(Error::config(
                "max_experts",
                "experts and GPUs must be >= 1",
            ));
        }
        if self.max_tokens_per_expert == 0 {
            return Err(Error::config("max_tokens_per_expert", "must be >= 1"));
        }
        if self.tolerance.is_nan() || self.tolerance < 1.0 {
            return Err(Error::config("tolerance", "must be >= 1"));
        }
        Ok(())
    }
}

/// One generated instance and both forward times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub experts: usize,
    pub gpus: usize,
    pub extra: usize,
    pub loads: Vec<u64>,
    pub heuristic_ms: f64,
    pub optimal_ms: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub params: OracleCheckParams,
    /// Instances where the heuristic beat the exhaustive optimum.
    pub dominance_violations: usize,
    pub ratio_min: f64,
    pub ratio_mean: f64,
    pub ratio_p50: f64,
    pub ratio_p95: f64,
    pub ratio_max: f64,
    pub within_tolerance: usize,
    pub within_tolerance_fraction: f64,
    pub results: Vec<InstanceResult>,
}

const DOMINANCE_EPS: f64 = 1e-9;

fn instance(params: &OracleCheckParams, index: usize) -> Result<InstanceResult> {
    let mut rng = rng::stream(params.seed, Stream::Instances, index as u64, 0);
    let (experts, gpus, extra) = if params.uniform {
        // G must divide E; at least one expert must keep its full load.
        let experts = rng.random_range(1..=params.max_experts);
        let divisors: Vec<usize> = (1..=params.max_gpus.min(experts))
            .filter(|g| experts % g == 0)
            .collect();
        let gpus = divisors[rng.random_range(0..divisors.len())];
        let extra = rng.random_range(0..=params.max_extra.min(experts - 1));
        (experts, gpus, extra)
    } else {
        (
            rng.random_range(1..=params.max_experts),
            rng.random_range(1..=params.max_gpus),
            rng.random_range(0..=params.max_extra),
        )
    };
    let tokens = rng.random_range(1..=params.max_tokens_per_expert) * experts as u64;
    let loads = if params.uniform {
        LoadVector::new(0, vec![tokens / experts as u64; experts])
    } else {
        let profile = PopularityProfile::zipf(experts, params.zipf_exponent, rng.random());
        let batch = IterationBatch {
            iteration: 0,
            phase: Phase::Prefill,
            token_count: tokens,
        };
        route_tokens(&batch, 0, &profile, 1, rng.random())?
    };

    let expert_mem = 1.0;
    let model = ModelSpec {
        num_layers: 1,
        experts_per_layer: experts,
        top_k: 1,
        expert_mem,
        layer_mem_cap: extra as f64 * expert_mem,
    };
    let cluster = ClusterSpec {
        gpu_count: gpus,
        // Memory never binds.
        gpu_mem_capacity: (experts + extra) as f64 * expert_mem,
        alpha: params.alpha,
        beta: params.beta,
        t_misc: params.t_misc,
        m_misc: 0.0,
    };
    let scaler = ScalerConfig {
        cv_threshold: params.cv_threshold,
        include_zero_loads: true,
    };
    let plan = scale_experts(&loads, &model, &scaler)?;
    let placed = place_experts(&plan, &cluster, expert_mem, &ReplicaRegistry::new(0), 0)?;
    let heuristic =
        layer_forward_time(&plan, &placed.placement, &loads, &model, &cluster)?.forward_ms;
    let optimal = brute_force_optimal(&loads, &model, &cluster, extra)?
        .metrics
        .forward_ms;
    let ratio = if optimal > 0.0 {
        heuristic / optimal
    } else {
        1.0
    };
    Ok(InstanceResult {
        experts,
        gpus,
        extra,
        loads: loads.loads,
        heuristic_ms: heuristic,
        optimal_ms: optimal,
        ratio,
    })
}

/// Generates the instances, solves each with the scaler plus placer and by
/// exhaustive search, and summarizes the time ratios.
pub fn oracle_check(params: &OracleCheckParams) -> Result<OracleCheckReport> {
    params.validate()?;
    let results = (0..params.instances)
        .into_par_iter()
        .map(|i| instance(params, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ratios: Vec<f64> = results.iter().map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let dominance_violations = results
        .iter()
        .filter(|r| r.heuristic_ms < r.optimal_ms * (1.0 - DOMINANCE_EPS))
        .count();
    let within_tolerance = ratios.iter().filter(|&&r| r <= params.tolerance).count();
    let n = ratios.len() as f64;
    Ok(OracleCheckReport {
        params: params.clone(),
        dominance_violations,
        ratio_min: ratios[0],
        ratio_mean: ratios.iter().sum::<f64>() / n,
        ratio_p50: percentile(&ratios, 50.0),
        ratio_p95: percentile(&ratios, 95.0),
        ratio_max: ratios[ratios.len() - 1],
        within_tolerance,
        within_tolerance_fraction: within_tolerance as f64 / n,
        results,
    })
}
