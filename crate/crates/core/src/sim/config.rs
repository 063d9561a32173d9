//! Simulation settings and the flat key-value config file.
//!
//! The file is TOML with one key per setting and units in the key names.
//! Every key is optional; unknown keys are rejected by name.

use serde::{Deserialize, Serialize};

use crate::baselines::PolicyKind;
use crate::cost_model::{ClusterSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::predictor::{
    apply_layer_aware_finetuning, default_accuracies, KeepRule, PredictorKind, PredictorProfile,
    Reassign,
};
use crate::scaler::ScalerConfig;
use crate::workload::PopularityProfile;

/// Predictor settings before distance decay and fine-tuning are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSettings {
    pub kind: PredictorKind,
    pub distance: usize,
    /// Profiled accuracy per layer at distance 1.
    pub base_accuracy: Vec<f64>,
    /// Accuracy lost per layer of distance beyond the first.
    pub accuracy_decay: f64,
    pub accuracy_threshold: f64,
    pub finetune: bool,
    pub history_window: usize,
    pub keep_rule: KeepRule,
    pub reassign: Reassign,
}

impl PredictorSettings {
    pub fn new(layers: usize) -> Self {
        Self {
            kind: PredictorKind::Noisy,
            distance: 1,
            base_accuracy: default_accuracies(layers),
            accuracy_decay: 0.04,
            accuracy_threshold: 0.8,
            finetune: true,
            history_window: 50,
            keep_rule: KeepRule::OverlapCalibrated,
            reassign: Reassign::Uniform,
        }
    }

    /// The profile used at run time: base accuracies decayed to `distance`,
    /// then fine-tuned if enabled.
    pub fn profile(&self) -> PredictorProfile {
        let base = PredictorProfile {
            kind: self.kind,
            distance: 1,
            per_layer_accuracy: self.base_accuracy.clone(),
            accuracy_threshold: self.accuracy_threshold,
            history_window: self.history_window,
            fine_tuned: vec![false; self.base_accuracy.len()],
            keep_rule: self.keep_rule,
            reassign: self.reassign,
        };
        let decayed = base.at_distance(self.distance, self.accuracy_decay);
        if self.finetune {
            apply_layer_aware_finetuning(&decayed)
        } else {
            decayed
        }
    }
}

/// Components switched off for ablation runs of the serverless policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Use historical load estimates instead of the predictor.
    pub no_predictor: bool,
    /// Keep one replica per expert.
    pub no_scaler: bool,
    /// Round-robin placement instead of warm-start JSQ.
    pub no_placer: bool,
}

impl Ablation {
    pub fn all() -> Self {
        Self {
            no_predictor: true,
            no_scaler: true,
            no_placer: true,
        }
    }

    pub fn any(&self) -> bool {
        self.no_predictor || self.no_scaler || self.no_placer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub policy: PolicyKind,
    pub predictor: PredictorSettings,
    pub scaler: ScalerConfig,
    pub popularity: PopularityProfile,
    pub keep_alive_iters: usize,
    /// Added to a layer's forward time when planning is synchronous
    /// (distance 0) and the layer needed a cold replica.
    pub cold_start_ms: f64,
    pub ablation: Ablation,
    /// Serverless plans are recomputed every this many iterations.
    pub plan_refresh_iters: usize,
    /// Stop after this many iterations; 0 runs the whole trace.
    pub max_iterations: usize,
    /// Check that history-based plans do not depend on the true loads.
    pub audit: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let model = ModelSpec::default();
        let cluster = ClusterSpec::default();
        Self {
            popularity: PopularityProfile::zipf(model.experts_per_layer, 1.2, 0),
            predictor: PredictorSettings::new(model.num_layers),
            policy: PolicyKind::Serverless,
            scaler: ScalerConfig::default(),
            keep_alive_iters: 10,
            cold_start_ms: 0.0,
            ablation: Ablation::default(),
            plan_refresh_iters: 1,
            max_iterations: 0,
            audit: false,
            seed: 0,
            model,
            cluster,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.model.validate()?;
        self.policy.validate()?;
        self.scaler.validate()?;
        self.popularity.validate()?;
        if self.popularity.experts != self.model.experts_per_layer {
            return Err(Error::config(
                "experts_per_layer",
                "popularity profile and model disagree on the expert count",
            ));
        }
        let p = &self.predictor;
        if p.distance >= self.model.num_layers {
            return Err(Error::config(
                "prediction_distance",
                format!("must be < num_layers = {}", self.model.num_layers),
            ));
        }
        if !(p.accuracy_decay.is_finite() && p.accuracy_decay >= 0.0) {
            return Err(Error::config("accuracy_decay_per_layer", "must be >= 0"));
        }
        if p.history_window == 0 {
            return Err(Error::config("history_window", "must be >= 1"));
        }
        self.predictor.profile().validate(self.model.num_layers)?;
        if !(self.cold_start_ms.is_finite() && self.cold_start_ms >= 0.0) {
            return Err(Error::config("cold_start_ms", "must be >= 0"));
        }
        if self.plan_refresh_iters == 0 {
            return Err(Error::config("plan_refresh_iters", "must be >= 1"));
        }
        Ok(())
    }

    /// Policy name plus ablation markers, used as the report label.
    pub fn label(&self) -> String {
        let mut s = self.policy.name().to_string();
        if matches!(self.policy, PolicyKind::Serverless) && self.ablation.any() {
            for (off, tag) in [
                (self.ablation.no_predictor, "pred"),
                (self.ablation.no_scaler, "scale"),
                (self.ablation.no_placer, "place"),
            ] {
                if off {
                    s.push_str("-no_");
                    s.push_str(tag);
                }
            }
        }
        s
    }

    pub fn with_policy(mut self, policy: PolicyKind) -> Self {
        self.policy = policy;
        self
    }

    /// Replica slots a serverless layer may use: one per expert plus the
    /// per-layer budget.
    pub fn max_replicas_per_layer(&self) -> usize {
        self.model.experts_per_layer + self.model.extra_replica_budget()
    }
}

// ─── Flat config file ─────────────────────────────────────────────────────────

/// Documented key set of the config file. Absent keys take the defaults of
/// [`SimConfig::default`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    // cluster
    pub gpu_count: Option<usize>,
    pub gpu_mem_capacity_mb: Option<f64>,
    pub alpha_ms_per_token: Option<f64>,
    pub beta_ms_per_token: Option<f64>,
    pub t_misc_ms: Option<f64>,
    pub m_misc_mb: Option<f64>,
    // model
    pub num_layers: Option<usize>,
    pub experts_per_layer: Option<usize>,
    pub top_k: Option<usize>,
    pub expert_mem_mb: Option<f64>,
    pub layer_mem_cap_mb: Option<f64>,
    // policy
    pub policy: Option<String>,
    pub eplb_period_iters: Option<usize>,
    pub eplb_replica_budget: Option<usize>,
    // predictor
    pub predictor: Option<PredictorKind>,
    pub prediction_distance: Option<usize>,
    pub per_layer_accuracy: Option<Vec<f64>>,
    pub accuracy_decay_per_layer: Option<f64>,
    pub accuracy_threshold: Option<f64>,
    pub finetune: Option<bool>,
    pub history_window: Option<usize>,
    pub noise_keep_rule: Option<KeepRule>,
    pub noise_reassign: Option<Reassign>,
    // scaler
    pub cv_threshold: Option<f64>,
    pub cv_include_zero_loads: Option<bool>,
    // placer and engine
    pub keep_alive_iters: Option<usize>,
    pub cold_start_ms: Option<f64>,
    pub plan_refresh_iters: Option<usize>,
    pub max_iterations: Option<usize>,
    pub audit: Option<bool>,
    pub disable_predictor: Option<bool>,
    pub disable_scaler: Option<bool>,
    pub disable_placer: Option<bool>,
    // workload
    pub zipf_exponent: Option<f64>,
    pub decode_zipf_exponent: Option<f64>,
    pub drift_period_iters: Option<usize>,
    pub shared_permutation: Option<bool>,
}

/// Parses a policy name: `serverless`, `static` (alias `megatron`), `eplb`,
/// or `oracle` / `oracle_balance`.
pub fn parse_policy(
    name: &str,
    eplb_period_iters: usize,
    eplb_replica_budget: usize,
) -> Result<PolicyKind> {
    match name {
        "serverless" => Ok(PolicyKind::Serverless),
        "static" | "megatron" => Ok(PolicyKind::Static),
        "eplb" => Ok(PolicyKind::Eplb {
            period_iters: eplb_period_iters,
            replica_budget: eplb_replica_budget,
        }),
        "oracle" | "oracle_balance" => Ok(PolicyKind::OracleBalance),
        other => Err(Error::config(
            "policy",
            format!("unknown policy {other:?} (expected serverless, static, eplb or oracle)"),
        )),
    }
}

pub const DEFAULT_EPLB_PERIOD_ITERS: usize = 600;

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, msg)
        })
    }

    pub fn resolve(&self) -> Result<SimConfig> {
        let d = SimConfig::default();
        let cluster = ClusterSpec {
            gpu_count: self.gpu_count.unwrap_or(d.cluster.gpu_count),
            gpu_mem_capacity: self
                .gpu_mem_capacity_mb
                .unwrap_or(d.cluster.gpu_mem_capacity),
            alpha: self.alpha_ms_per_token.unwrap_or(d.cluster.alpha),
            beta: self.beta_ms_per_token.unwrap_or(d.cluster.beta),
            t_misc: self.t_misc_ms.unwrap_or(d.cluster.t_misc),
            m_misc: self.m_misc_mb.unwrap_or(d.cluster.m_misc),
        };
        let experts = self.experts_per_layer.unwrap_or(d.model.experts_per_layer);
        let expert_mem = self.expert_mem_mb.unwrap_or(d.model.expert_mem);
        let model = ModelSpec {
            num_layers: self.num_layers.unwrap_or(d.model.num_layers),
            experts_per_layer: experts,
            top_k: self.top_k.unwrap_or(d.model.top_k),
            expert_mem,
            // Default budget: one extra replica per expert.
            layer_mem_cap: self.layer_mem_cap_mb.unwrap_or(experts as f64 * expert_mem),
        };
        let policy = parse_policy(
            self.policy.as_deref().unwrap_or("serverless"),
            self.eplb_period_iters.unwrap_or(DEFAULT_EPLB_PERIOD_ITERS),
            self.eplb_replica_budget.unwrap_or(cluster.gpu_count),
        )?;
        let mut predictor = PredictorSettings::new(model.num_layers);
        if let Some(k) = self.predictor {
            predictor.kind = k;
        }
        if let Some(v) = self.prediction_distance {
            predictor.distance = v;
        }
        if let Some(v) = &self.per_layer_accuracy {
            predictor.base_accuracy = v.clone();
        }
        if let Some(v) = self.accuracy_decay_per_layer {
            predictor.accuracy_decay = v;
        }
        if let Some(v) = self.accuracy_threshold {
            predictor.accuracy_threshold = v;
        }
        if let Some(v) = self.finetune {
            predictor.finetune = v;
        }
        if let Some(v) = self.history_window {
            predictor.history_window = v;
        }
        if let Some(v) = self.noise_keep_rule {
            predictor.keep_rule = v;
        }
        if let Some(v) = self.noise_reassign {
            predictor.reassign = v;
        }
        let seed = self.seed.unwrap_or(d.seed);
        let s = self.zipf_exponent.unwrap_or(d.popularity.prefill_exponent);
        let popularity = PopularityProfile {
            experts,
            prefill_exponent: s,
            decode_exponent: self.decode_zipf_exponent.unwrap_or(s),
            drift_period: self.drift_period_iters.unwrap_or(0),
            shared_permutation: self.shared_permutation.unwrap_or(false),
            seed,
        };
        let config = SimConfig {
            cluster,
            model,
            policy,
            predictor,
            scaler: ScalerConfig {
                cv_threshold: self.cv_threshold.unwrap_or(d.scaler.cv_threshold),
                include_zero_loads: self
                    .cv_include_zero_loads
                    .unwrap_or(d.scaler.include_zero_loads),
            },
            popularity,
            keep_alive_iters: self.keep_alive_iters.unwrap_or(d.keep_alive_iters),
            cold_start_ms: self.cold_start_ms.unwrap_or(d.cold_start_ms),
            ablation: Ablation {
                no_predictor: self.disable_predictor.unwrap_or(false),
                no_scaler: self.disable_scaler.unwrap_or(false),
                no_placer: self.disable_placer.unwrap_or(false),
            },
            plan_refresh_iters: self.plan_refresh_iters.unwrap_or(d.plan_refresh_iters),
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            audit: self.audit.unwrap_or(false),
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses and validates a config file's contents.
pub fn load_config_str(text: &str) -> Result<SimConfig> {
    FileConfig::from_toml(text)?.resolve()
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<SimConfig> {
    load_config_str(&std::fs::read_to_string(path)?)
}
