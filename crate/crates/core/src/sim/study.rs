//! Paired policy comparisons and one-parameter sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::config::SimConfig;
use crate::sim::engine::run;
use crate::sim::report::{percentile, MetricsReport};
use crate::workload::Request;

/// Forward-time quantiles of one policy at 0%, 1%, ..., 100%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCdf {
    pub policy: String,
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRatio {
    pub numerator: String,
    pub denominator: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reports: Vec<MetricsReport>,
    pub cdfs: Vec<PolicyCdf>,
    /// `mean_forward_ms(numerator) / mean_forward_ms(denominator)` for every
    /// ordered pair of distinct runs.
    pub mean_ratios: Vec<MeanRatio>,
}

impl ComparisonReport {
    pub fn get(&self, policy: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.policy == policy)
    }
}

/// Runs every config on the same trace. Configs must agree on everything
/// that shapes the ground-truth routing.
pub fn run_comparison(configs: &[SimConfig], requests: &[Request]) -> Result<ComparisonReport> {
    let first = configs
        .first()
        .ok_or(Error::Empty("comparison needs at least one config"))?;
    for c in &configs[1..] {
        let same = c.seed == first.seed
            && c.model == first.model
            && c.popularity == first.popularity
            && c.max_iterations == first.max_iterations;
        if !same {
            return Err(Error::Mismatch(format!(
                "{} and {} do not share seed, model, popularity and iteration limit",
                first.label(),
                c.label()
            )));
        }
    }
    let reports = configs
        .par_iter()
        .map(|c| run(c, requests))
        .collect::<Result<Vec<_>>>()?;
    let cdfs = reports
        .iter()
        .map(|r| {
            let sorted = r.sorted_forward();
            PolicyCdf {
                policy: r.policy.clone(),
                quantiles: (0..=100)
                    .map(|p| percentile(&sorted, f64::from(p)))
                    .collect(),
            }
        })
        .collect();
    let mut mean_ratios = Vec::new();
    for (a, ra) in reports.iter().enumerate() {
        for (b, rb) in reports.iter().enumerate() {
            if a != b {
                mean_ratios.push(MeanRatio {
                    numerator: ra.policy.clone(),
                    denominator: rb.policy.clone(),
                    ratio: ra.mean_forward_ms / rb.mean_forward_ms,
                });
            }
        }
    }
    Ok(ComparisonReport {
        reports,
        cdfs,
        mean_ratios,
    })
}

// ─── Sweeps ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Prediction distance in layers.
    Distance,
    CvThreshold,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Distance => "distance",
            SweepParam::CvThreshold => "cv_threshold",
        }
    }

    /// `config` with the parameter set to `value`.
    pub fn apply(self, config: &SimConfig, value: f64) -> Result<SimConfig> {
        let mut c = config.clone();
        match self {
            SweepParam::Distance => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::config(
                        "prediction_distance",
                        format!("must be a non-negative integer, got {value}"),
                    ));
                }
                c.predictor.distance = value as usize;
            }
            SweepParam::CvThreshold => c.scaler.cv_threshold = value,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_forward_ms: f64,
    pub mean_replicas_per_layer: f64,
    pub total_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str =
        "param,value,mean_forward_ms,mean_replicas_per_layer,total_latency_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.param.name(),
                p.value,
                p.mean_forward_ms,
                p.mean_replicas_per_layer,
                p.total_latency_ms
            ));
        }
        out
    }
}

/// One run per grid value, all with the config's seed. Points come back in
/// grid order.
pub fn sweep(
    config: &SimConfig,
    param: SweepParam,
    values: &[f64],
    requests: &[Request],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Empty("sweep grid is empty"));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let points = configs
        .par_iter()
        .zip(values)
        .map(|(c, &value)| {
            let r = run(c, requests)?;
            Ok(SweepPoint {
                value,
                mean_forward_ms: r.mean_forward_ms,
                mean_replicas_per_layer: r.mean_replicas_per_layer,
                total_latency_ms: r.total_latency_ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        param,
        seed: config.seed,
        points,
    })
}

/// `from, from + step, ...` up to `to` inclusive, rounded to suppress drift.
pub fn grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config("step", format!("must be > 0, got {step}")));
    }
    if !(from.is_finite() && to.is_finite()) || to < from {
        return Err(Error::config(
            "to",
            format!("must be >= from ({from}), got {to}"),
        ));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|k| ((from + k as f64 * step) * 1e9).round() / 1e9)
        .collect())
}
