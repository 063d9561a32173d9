//! Iteration engine: route, predict, scale, place, serve.

use std::collections::VecDeque;

use crate::baselines::{oracle_balance_time, static_plan, EplbPolicy, PolicyKind};
use crate::cost_model::{layer_forward_time, LayerMetrics, LoadVector, ScalingPlan};
use crate::error::{Error, Result};
use crate::placer::{
    count_warm, place_experts, round_robin, update_registry, Placement, ReplicaRegistry,
};
use crate::predictor::{
    overlap_mass, predict, PredictContext, Prediction, PredictorKind, PredictorProfile,
};
use crate::scaler::scale_experts;
use crate::sim::config::SimConfig;
use crate::sim::report::{AccuracyTally, MetricsReport, Sample};
use crate::workload::{batch_requests, route_tokens, IterationBatch, Phase, Request};

/// Replays `requests` under `config` and collects per-layer metrics.
pub fn run(config: &SimConfig, requests: &[Request]) -> Result<MetricsReport> {
    if requests.is_empty() {
        return Err(Error::Empty("trace has no requests"));
    }
    let mut batches = batch_requests(requests);
    if config.max_iterations > 0 {
        batches.truncate(config.max_iterations);
    }
    run_batches(config, &batches)
}

/// Same as [`run`] on pre-batched iterations.
pub fn run_batches(config: &SimConfig, batches: &[IterationBatch]) -> Result<MetricsReport> {
    config.validate()?;
    if batches.is_empty() {
        return Err(Error::Empty("no iterations to simulate"));
    }
    let mut engine = Engine::new(config);
    for batch in batches {
        engine.step(batch)?;
    }
    Ok(engine.finish(batches.len()))
}

/// Ground-truth loads of every layer for one batch.
pub fn route_iteration(config: &SimConfig, batch: &IterationBatch) -> Result<Vec<LoadVector>> {
    (0..config.model.num_layers)
        .map(|l| {
            route_tokens(
                batch,
                l,
                &config.popularity,
                config.model.top_k,
                config.seed,
            )
        })
        .collect()
}

struct Engine<'a> {
    config: &'a SimConfig,
    profile: PredictorProfile,
    /// Previous true loads per layer, oldest first.
    history: Vec<VecDeque<LoadVector>>,
    history_cap: usize,
    registry: ReplicaRegistry,
    /// Serverless plans kept between refreshes.
    held: Vec<Option<(ScalingPlan, Placement)>>,
    eplb: Option<EplbPolicy>,
    samples: Vec<Sample>,
    accuracy: AccuracyTally,
    fallbacks: usize,
    phase: Phase,
}

impl<'a> Engine<'a> {
    fn new(config: &'a SimConfig) -> Self {
        let layers = config.model.num_layers;
        let profile = config.predictor.profile();
        let (eplb, keep_alive, history_cap) = match config.policy {
            PolicyKind::Eplb {
                period_iters,
                replica_budget,
            } => (
                Some(EplbPolicy::new(period_iters, replica_budget, layers)),
                usize::MAX,
                period_iters,
            ),
            PolicyKind::Static | PolicyKind::OracleBalance => (None, usize::MAX, 0),
            PolicyKind::Serverless => (None, config.keep_alive_iters, profile.history_window),
        };
        Self {
            config,
            profile,
            history: vec![VecDeque::new(); layers],
            history_cap,
            registry: ReplicaRegistry::new(keep_alive),
            held: vec![None; layers],
            eplb,
            samples: Vec::new(),
            accuracy: AccuracyTally::new(layers),
            fallbacks: 0,
            phase: Phase::Prefill,
        }
    }

    fn step(&mut self, batch: &IterationBatch) -> Result<()> {
        let actual = route_iteration(self.config, batch)?;
        let i = batch.iteration;
        self.phase = batch.phase;
        for (l, act) in actual.iter().enumerate() {
            let sample = self.serve_layer(i, l, act).map_err(|e| match e {
                Error::PlacementInfeasible { .. } | Error::PlacementInconsistent(_) => {
                    Error::SimulationInfeasible {
                        iteration: i,
                        layer: l,
                        source: Box::new(e),
                    }
                }
                other => other,
            })?;
            self.samples.push(sample);
        }
        for (h, act) in self.history.iter_mut().zip(actual) {
            if self.history_cap == 0 {
                break;
            }
            if h.len() == self.history_cap {
                h.pop_front();
            }
            h.push_back(act);
        }
        Ok(())
    }

    fn serve_layer(&mut self, i: usize, l: usize, actual: &LoadVector) -> Result<Sample> {
        let c = self.config;
        let (model, cluster) = (&c.model, &c.cluster);
        let (metrics, warm, cold) = match c.policy {
            PolicyKind::OracleBalance => (
                oracle_balance_time(actual, c.max_replicas_per_layer(), model, cluster),
                0,
                0,
            ),
            PolicyKind::Static => {
                let (plan, placement) = static_plan(l, model, cluster)?;
                self.serve_fixed(i, &plan, &placement, actual)?
            }
            PolicyKind::Eplb { .. } => {
                let history = self.history[l].make_contiguous();
                let eplb = self
                    .eplb
                    .as_mut()
                    .expect("eplb state exists for the eplb policy");
                let (plan, placement) = eplb.plan(l, i, history, model, cluster)?.clone();
                self.serve_fixed(i, &plan, &placement, actual)?
            }
            PolicyKind::Serverless => self.serve_serverless(i, l, actual)?,
        };
        Ok(Sample {
            iteration: i,
            layer: l,
            forward_ms: metrics.forward_ms,
            compute_ms: metrics.compute_ms,
            comm_ms: metrics.comm_ms,
            replicas: metrics.replica_count,
            warm,
            cold,
            cost: metrics.cost,
        })
    }

    /// Serverful plans: replicas stay resident, so only the first use of a
    /// replica is cold.
    fn serve_fixed(
        &mut self,
        i: usize,
        plan: &ScalingPlan,
        placement: &Placement,
        actual: &LoadVector,
    ) -> Result<(LayerMetrics, usize, usize)> {
        let metrics = layer_forward_time(
            plan,
            placement,
            actual,
            &self.config.model,
            &self.config.cluster,
        )?;
        let warm = count_warm(&self.registry, placement, i);
        update_registry(&mut self.registry, placement, i);
        Ok((metrics, warm, plan.total_replicas() - warm))
    }

    fn serve_serverless(
        &mut self,
        i: usize,
        l: usize,
        actual: &LoadVector,
    ) -> Result<(LayerMetrics, usize, usize)> {
        let c = self.config;
        let refresh = self.held[l].is_none() || i % c.plan_refresh_iters == 0;
        let (plan, placement, warm, cold) = if refresh {
            let estimate = self.estimate(i, l, actual)?;
            let plan = if c.ablation.no_scaler {
                ScalingPlan::single(l, &estimate.loads.loads)
            } else {
                scale_experts(&estimate.loads, &c.model, &c.scaler)?
            };
            let (placement, warm, cold) = if c.ablation.no_placer {
                let p = round_robin(&plan, &c.cluster, c.model.expert_mem)?;
                let warm = count_warm(&self.registry, &p, i);
                let cold = plan.total_replicas() - warm;
                (p, warm, cold)
            } else {
                let out = place_experts(&plan, &c.cluster, c.model.expert_mem, &self.registry, i)?;
                (out.placement, out.warm, out.cold)
            };
            (plan, placement, warm, cold)
        } else {
            let (plan, placement) = self.held[l]
                .clone()
                .expect("held plan exists between refreshes");
            let warm = count_warm(&self.registry, &placement, i);
            let cold = plan.total_replicas() - warm;
            (plan, placement, warm, cold)
        };

        let mut metrics = layer_forward_time(&plan, &placement, actual, &c.model, &c.cluster)?;
        // Synchronous planning cannot hide replica instantiation.
        if self.profile.distance == 0 && cold > 0 {
            metrics.forward_ms += c.cold_start_ms;
        }
        update_registry(&mut self.registry, &placement, i);
        self.held[l] = Some((plan, placement));
        Ok((metrics, warm, cold))
    }

    /// Load estimate the layer's plan is built from. Layers closer to the
    /// input than the prediction distance have no earlier layer to predict
    /// from and reuse the previous iteration's loads; with the predictor
    /// ablated every layer uses the windowed historical mean.
    fn estimate(&mut self, i: usize, l: usize, actual: &LoadVector) -> Result<Prediction> {
        let c = self.config;
        let profile = if c.ablation.no_predictor {
            self.profile.clone().with_kind(PredictorKind::Historical)
        } else if l < self.profile.distance {
            let mut p = self.profile.clone().with_kind(PredictorKind::Historical);
            p.history_window = 1;
            p
        } else {
            self.profile.clone()
        };
        let weights = c.popularity.weights(l, i, self.phase);
        let ctx = PredictContext {
            seed: c.seed,
            iteration: i,
            popularity: Some(&weights),
        };
        let history = self.history[l].make_contiguous();
        let estimate = predict(actual, history, &profile, ctx)?;

        if c.audit && profile.kind == PredictorKind::Historical {
            // A decoy with the same token count must yield the same estimate.
            let mut decoy = actual.loads.clone();
            decoy.reverse();
            let decoy = LoadVector::new(l, decoy);
            if predict(&decoy, history, &profile, ctx)? != estimate {
                return Err(Error::Mismatch(format!(
                    "audit: estimate for layer {l} at iteration {i} depends on its true loads"
                )));
            }
        }

        if estimate.fallback {
            self.fallbacks += 1;
        }
        if actual.total() > 0 {
            self.accuracy.overlap[l] += overlap_mass(&estimate.loads, actual)?;
            self.accuracy.total[l] += actual.total() as f64;
        }
        Ok(estimate)
    }

    fn finish(self, iterations: usize) -> MetricsReport {
        let tally = matches!(self.config.policy, PolicyKind::Serverless).then_some(self.accuracy);
        MetricsReport::build(self.config, iterations, self.samples, tally, self.fallbacks)
    }
}
