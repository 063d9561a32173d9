//! Load prediction, greedy expert scaling, warm-start placement and a
//! trace-driven simulator for serving Mixture-of-Experts models on
//! serverless GPU capacity.
//!
//! The pipeline per layer and iteration is: route the batch's tokens
//! ([`workload`]), estimate the layer's load ([`predictor`]), split
//! stragglers ([`scaler`]), place replicas ([`placer`]), and time the layer on
//! its real loads ([`cost_model`]). [`sim`] drives it over a trace and
//! [`baselines`] provides the serverful reference policies.

pub mod baselines;
pub mod cost_model;
pub mod error;
pub mod placer;
pub mod predictor;
pub mod rng;
pub mod scaler;
pub mod sim;
pub mod validation;
pub mod workload;

pub use baselines::{
    brute_force_optimal, eplb_plan, oracle_balance_time, static_plan, EplbPolicy, Optimum,
    PolicyKind,
};
pub use cost_model::{
    coefficient_of_variation, gpu_comm_times, layer_forward_time, replica_time, serverful_cost,
    ClusterSpec, LayerMetrics, LoadVector, ModelSpec, ReplicaShare, ScalingPlan, Share,
};
pub use error::{Error, Result};
pub use placer::{
    place_experts, update_registry, Assignment, Placement, PlacementOutcome, ReplicaRegistry,
};
pub use predictor::{
    apply_layer_aware_finetuning, measure_accuracy, predict, KeepRule, PredictContext, Prediction,
    PredictorKind, PredictorProfile, Reassign,
};
pub use scaler::{scale_experts, verify_plan, ScalerConfig};
pub use sim::{run, run_comparison, sweep, MetricsReport, SimConfig, SweepParam};
pub use validation::{oracle_check, OracleCheckParams, OracleCheckReport};
pub use workload::{
    batch_requests, gen_synthetic_trace, parse_trace, route_tokens, IterationBatch, Phase,
    PopularityProfile, Request, TraceParams,
};
