//! Per-sample records and the aggregated run report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost_model::serverful_cost;
use crate::sim::config::SimConfig;

/// One layer of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub iteration: usize,
    pub layer: usize,
    pub forward_ms: f64,
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub replicas: usize,
    pub warm: usize,
    pub cold: usize,
    /// Serverless-convention cost of this layer, MB·ms.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub seed: u64,
    pub iterations: usize,
    pub layers: usize,
    pub sample_count: usize,
    /// T: sum of all layer forward times.
    pub total_latency_ms: f64,
    pub mean_forward_ms: f64,
    pub p50_forward_ms: f64,
    pub p95_forward_ms: f64,
    pub p99_forward_ms: f64,
    /// C: sum of per-layer cost terms (pay for instantiated replicas only).
    pub cost_serverless_mb_ms: f64,
    /// All experts of all layers resident for the whole run.
    pub cost_serverful_mb_ms: f64,
    pub mean_replicas_per_layer: f64,
    pub per_layer_mean_replicas: Vec<f64>,
    pub warm_replicas: usize,
    pub cold_replicas: usize,
    /// Realized load-overlap accuracy of the estimates the plans were built
    /// from; `None` when the policy makes no estimates.
    pub per_layer_accuracy: Vec<Option<f64>>,
    pub mean_accuracy: Option<f64>,
    /// Layer estimates that fell back to a uniform split for lack of history.
    pub uniform_fallbacks: usize,
    /// The policy's latency is analytic and ignores routing.
    pub lossy: bool,
    #[serde(skip)]
    pub samples: Vec<Sample>,
}

/// Nearest-rank percentile of sorted values; `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub(crate) struct AccuracyTally {
    pub overlap: Vec<f64>,
    pub total: Vec<f64>,
}

impl AccuracyTally {
    pub fn new(layers: usize) -> Self {
        Self {
            overlap: vec![0.0; layers],
            total: vec![0.0; layers],
        }
    }
}

impl MetricsReport {
    pub(crate) fn build(
        config: &SimConfig,
        iterations: usize,
        samples: Vec<Sample>,
        accuracy: Option<AccuracyTally>,
        uniform_fallbacks: usize,
    ) -> Self {
        let layers = config.model.num_layers;
        let n = samples.len();
        let total: f64 = samples.iter().map(|s| s.forward_ms).sum();
        let mut sorted: Vec<f64> = samples.iter().map(|s| s.forward_ms).collect();
        sorted.sort_by(f64::total_cmp);
        let mean = |x: f64, k: usize| if k == 0 { 0.0 } else { x / k as f64 };

        let mut per_layer = vec![0.0; layers];
        let mut per_layer_n = vec![0usize; layers];
        for s in &samples {
            per_layer[s.layer] += s.replicas as f64;
            per_layer_n[s.layer] += 1;
        }
        let replicas_sum: f64 = per_layer.iter().sum();
        let per_layer_mean_replicas = per_layer
            .iter()
            .zip(&per_layer_n)
            .map(|(&r, &k)| mean(r, k))
            .collect();

        let (per_layer_accuracy, mean_accuracy) = match accuracy {
            Some(t) => {
                let per: Vec<Option<f64>> = t
                    .overlap
                    .iter()
                    .zip(&t.total)
                    .map(|(&o, &w)| (w > 0.0).then(|| o / w))
                    .collect();
                let w: f64 = t.total.iter().sum();
                (per, (w > 0.0).then(|| t.overlap.iter().sum::<f64>() / w))
            }
            None => (vec![None; layers], None),
        };

        Self {
            policy: config.label(),
            seed: config.seed,
            iterations,
            layers,
            sample_count: n,
            total_latency_ms: total,
            mean_forward_ms: mean(total, n),
            p50_forward_ms: percentile(&sorted, 50.0),
            p95_forward_ms: percentile(&sorted, 95.0),
            p99_forward_ms: percentile(&sorted, 99.0),
            cost_serverless_mb_ms: samples.iter().map(|s| s.cost).sum(),
            cost_serverful_mb_ms: serverful_cost(&config.model, &config.cluster, total),
            mean_replicas_per_layer: mean(replicas_sum, n),
            per_layer_mean_replicas,
            warm_replicas: samples.iter().map(|s| s.warm).sum(),
            cold_replicas: samples.iter().map(|s| s.cold).sum(),
            per_layer_accuracy,
            mean_accuracy,
            uniform_fallbacks,
            lossy: matches!(config.policy, crate::baselines::PolicyKind::OracleBalance),
            samples,
        }
    }

    /// Cost under the convention that applies to the policy: serverless
    /// billing for the serverless policy, resident billing for the rest.
    pub fn billed_cost(&self, config: &SimConfig) -> f64 {
        if config.policy.is_serverful() {
            self.cost_serverful_mb_ms
        } else {
            self.cost_serverless_mb_ms
        }
    }

    pub const SAMPLES_CSV_HEADER: &'static str =
        "iteration,layer,policy,forward_ms,replicas,warm,cold";

    pub fn samples_csv(&self) -> String {
        let mut out = String::with_capacity(48 * (self.samples.len() + 1));
        out.push_str(Self::SAMPLES_CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.iteration, s.layer, self.policy, s.forward_ms, s.replicas, s.warm, s.cold
            );
        }
        out
    }

    /// Forward times sorted ascending.
    pub fn sorted_forward(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.samples.iter().map(|s| s.forward_ms).collect();
        v.sort_by(f64::total_cmp);
        v
    }
}
