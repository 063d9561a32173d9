//! Load prediction `d` layers ahead.
//!
//! The gate-network predictors are modelled by their accuracy only:
//!
//! * `Oracle` returns the true future load.
//! * `Noisy` keeps each routed token on its true expert with some probability
//!   and re-routes the rest by a reassignment law (uniform by default). With
//!   [`KeepRule::PerToken`] the keep probability is the configured accuracy;
//!   with [`KeepRule::OverlapCalibrated`] it is solved so that the expected
//!   load overlap with the truth equals the configured accuracy.
//! * `Historical` averages the layer's recent loads and rescales them to the
//!   current token count.
//!
//! Accuracy is measured as the load-overlap coefficient
//! `sum_e min(pred_e, actual_e) / sum_e actual_e` after rescaling the
//! prediction to the actual total.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::cost_model::LoadVector;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Oracle,
    Noisy,
    Historical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepRule {
    /// Each token keeps its expert with probability `a_l`.
    PerToken,
    /// Keep probability chosen so the expected load overlap equals `a_l`.
    OverlapCalibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reassign {
    Uniform,
    /// Re-route by the layer's popularity law.
    Popularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorProfile {
    pub kind: PredictorKind,
    /// Layers ahead of execution; 0 means planning on the layer's own gate.
    pub distance: usize,
    pub per_layer_accuracy: Vec<f64>,
    pub accuracy_threshold: f64,
    pub history_window: usize,
    pub fine_tuned: Vec<bool>,
    pub keep_rule: KeepRule,
    pub reassign: Reassign,
}

/// Profiled accuracy at distance 1: early layers are the least predictable,
/// rising linearly from 0.70 to 0.95.
pub fn default_accuracies(layers: usize) -> Vec<f64> {
    if layers <= 1 {
        return vec![0.95; layers];
    }
    (0..layers)
        .map(|l| 0.70 + 0.25 * l as f64 / (layers - 1) as f64)
        .collect()
}

impl PredictorProfile {
    pub fn noisy(per_layer_accuracy: Vec<f64>) -> Self {
        let n = per_layer_accuracy.len();
        Self {
            kind: PredictorKind::Noisy,
            distance: 1,
            per_layer_accuracy,
            accuracy_threshold: 0.8,
            history_window: 50,
            fine_tuned: vec![false; n],
            keep_rule: KeepRule::OverlapCalibrated,
            reassign: Reassign::Uniform,
        }
    }

    pub fn with_kind(mut self, kind: PredictorKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.per_layer_accuracy.len() != layers {
            return Err(Error::config(
                "per_layer_accuracy",
                format!(
                    "needs {layers} entries, got {}",
                    self.per_layer_accuracy.len()
                ),
            ));
        }
        if let Some(a) = self
            .per_layer_accuracy
            .iter()
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::config(
                "per_layer_accuracy",
                format!("{a} is outside [0, 1]"),
            ));
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return Err(Error::config(
                "accuracy_threshold",
                format!("{} is outside [0, 1]", self.accuracy_threshold),
            ));
        }
        if self.kind == PredictorKind::Historical && self.history_window == 0 {
            return Err(Error::config("history_window", "must be >= 1"));
        }
        Ok(())
    }

    /// Accuracies at `distance`: each layer loses `decay` per layer of
    /// distance beyond the first, clamped to `[0, 1]`. Fine-tuning marks are
    /// cleared since they were earned at another distance.
    pub fn at_distance(&self, distance: usize, decay: f64) -> Self {
        let steps = distance.saturating_sub(1) as f64;
        Self {
            distance,
            per_layer_accuracy: self
                .per_layer_accuracy
                .iter()
                .map(|a| (a - decay * steps).clamp(0.0, 1.0))
                .collect(),
            fine_tuned: vec![false; self.per_layer_accuracy.len()],
            ..self.clone()
        }
    }
}

/// Raises every layer below the threshold to the threshold and marks it
/// fine-tuned. Layers already at or above it are left alone.
pub fn apply_layer_aware_finetuning(profile: &PredictorProfile) -> PredictorProfile {
    let mut out = profile.clone();
    if out.kind != PredictorKind::Noisy {
        return out;
    }
    let h = out.accuracy_threshold;
    out.fine_tuned.resize(out.per_layer_accuracy.len(), false);
    for (a, tuned) in out
        .per_layer_accuracy
        .iter_mut()
        .zip(out.fine_tuned.iter_mut())
    {
        if *a < h {
            *a = h;
            *tuned = true;
        }
    }
    out
}

/// Where a prediction is made; keys the noise stream.
#[derive(Debug, Clone, Copy)]
pub struct PredictContext<'a> {
    pub seed: u64,
    pub iteration: usize,
    /// Popularity law of the target layer, for [`Reassign::Popularity`].
    pub popularity: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub loads: LoadVector,
    /// No usable history; the prediction is uniform.
    pub fallback: bool,
}

/// Splits `total` tokens in proportion to `weights`, largest remainders first
/// (lowest index on ties), so the parts sum to `total` exactly.
pub fn apportion(weights: &[f64], total: u64) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        return apportion(&vec![1.0; weights.len()], total);
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order
        .iter()
        .cycle()
        .take(total.saturating_sub(assigned) as usize)
    {
        parts[i] += 1;
    }
    parts
}

fn uniform(layer: usize, experts: usize, total: u64) -> LoadVector {
    LoadVector::new(layer, apportion(&vec![1.0; experts], total))
}

/// Predicts the load of the layer whose true load is `actual_future`.
/// `history` holds earlier true loads of the same layer, oldest first.
pub fn predict(
    actual_future: &LoadVector,
    history: &[LoadVector],
    profile: &PredictorProfile,
    ctx: PredictContext<'_>,
) -> Result<Prediction> {
    let layer = actual_future.layer;
    let total = actual_future.total();
    let experts = actual_future.len();
    match profile.kind {
        PredictorKind::Oracle => Ok(Prediction {
            loads: actual_future.clone(),
            fallback: false,
        }),
        PredictorKind::Historical => Ok(historical(
            layer,
            experts,
            total,
            history,
            profile.history_window,
        )),
        PredictorKind::Noisy => {
            let a = *profile.per_layer_accuracy.get(layer).ok_or_else(|| {
                Error::Dimension(format!("no accuracy configured for layer {layer}"))
            })?;
            let q = match (profile.reassign, ctx.popularity) {
                (Reassign::Popularity, Some(p)) if p.len() == experts => normalized(p),
                _ => vec![1.0 / experts as f64; experts],
            };
            let keep = match profile.keep_rule {
                KeepRule::PerToken => a,
                KeepRule::OverlapCalibrated => calibrated_keep(a, &actual_future.loads, &q),
            };
            let mut rng = rng::stream(
                ctx.seed,
                Stream::Prediction,
                ctx.iteration as u64,
                layer as u64,
            );
            let mut loads = vec![0u64; experts];
            let mut moved = 0u64;
            for (slot, &w) in loads.iter_mut().zip(&actual_future.loads) {
                let kept = binomial(&mut rng, w, keep);
                *slot = kept;
                moved += w - kept;
            }
            // Multinomial re-routing via sequential conditional binomials.
            let mut left = moved;
            let mut mass_left = 1.0;
            for (e, slot) in loads.iter_mut().enumerate() {
                if left == 0 {
                    break;
                }
                let n = if e + 1 == experts || mass_left <= q[e] {
                    left
                } else {
                    binomial(&mut rng, left, (q[e] / mass_left).clamp(0.0, 1.0))
                };
                *slot += n;
                left -= n;
                mass_left -= q[e];
            }
            Ok(Prediction {
                loads: LoadVector::new(layer, loads),
                fallback: false,
            })
        }
    }
}

fn normalized(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return vec![1.0 / p.len() as f64; p.len()];
    }
    p.iter().map(|x| x / s).collect()
}

fn binomial(rng: &mut impl rand::Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

/// Keep probability `p` with `p + (1 - p) * overlap(q, w) = a`, clamped to
/// `[0, 1]`. When even `p = 0` overlaps more than `a`, the floor is returned.
fn calibrated_keep(a: f64, loads: &[u64], q: &[f64]) -> f64 {
    let total: u64 = loads.iter().sum();
    if total == 0 || a >= 1.0 {
        return 1.0;
    }
    let t = total as f64;
    let floor = loads
        .iter()
        .zip(q)
        .map(|(&w, &qe)| (qe * t).min(w as f64))
        .sum::<f64>()
        / t;
    if floor >= 1.0 - 1e-12 {
        return 1.0;
    }
    ((a - floor) / (1.0 - floor)).clamp(0.0, 1.0)
}

fn historical(
    layer: usize,
    experts: usize,
    total: u64,
    history: &[LoadVector],
    window: usize,
) -> Prediction {
    let recent = &history[history.len().saturating_sub(window.max(1))..];
    let mut mean = vec![0.0; experts];
    for lv in recent {
        for (m, &w) in mean.iter_mut().zip(&lv.loads) {
            *m += w as f64;
        }
    }
    if recent.is_empty() || mean.iter().all(|&m| m == 0.0) {
        return Prediction {
            loads: uniform(layer, experts, total),
            fallback: true,
        };
    }
    Prediction {
        loads: LoadVector::new(layer, apportion(&mean, total)),
        fallback: false,
    }
}

/// Overlapped token mass `sum_e min(pred_e, actual_e)` after rescaling the
/// prediction to the actual total.
pub fn overlap_mass(predicted: &LoadVector, actual: &LoadVector) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension(format!(
            "predicted has {} experts, actual {}",
            predicted.len(),
            actual.len()
        )));
    }
    let (pt, at) = (predicted.total() as f64, actual.total() as f64);
    if pt == 0.0 {
        return Ok(0.0);
    }
    let scale = at / pt;
    Ok(predicted
        .loads
        .iter()
        .zip(&actual.loads)
        .map(|(&p, &a)| (p as f64 * scale).min(a as f64))
        .sum())
}

/// Load-overlap accuracy in `[0, 1]`.
pub fn measure_accuracy(predicted: &LoadVector, actual: &LoadVector) -> Result<f64> {
    let mass = overlap_mass(predicted, actual)?;
    let at = actual.total();
    if at == 0 {
        return Ok(if predicted.total() == 0 { 1.0 } else { 0.0 });
    }
    Ok((mass / at as f64).clamp(0.0, 1.0))
}
