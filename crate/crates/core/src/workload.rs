//! Request traces, per-second batching, and skewed token routing.
//!
//! # Trace format
//!
//! One request per line, three unsigned integers separated by commas, tabs or
//! spaces:
//!
//! ```text
//! # arrival_ms,prompt_tokens,output_tokens
//! 0,412,37
//! 180,96,120
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. `prompt_tokens` must
//! be at least 1; `output_tokens` may be 0.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::cost_model::LoadVector;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub arrival_ms: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Tokens processed by every layer in one forward iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationBatch {
    pub iteration: usize,
    pub phase: Phase,
    pub token_count: u64,
}

// ─── Trace I/O ────────────────────────────────────────────────────────────────

pub fn parse_trace(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let text = std::fs::read_to_string(path)?;
    parse_trace_str(&text)
}

/// Parses the line format above and returns requests stably sorted by arrival.
pub fn parse_trace_str(text: &str) -> Result<Vec<Request>> {
    let mut requests = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 3 {
            return Err(Error::TraceParse {
                line: line_no,
                reason: format!(
                    "expected 3 fields (arrival_ms, prompt_tokens, output_tokens), found {}",
                    fields.len()
                ),
            });
        }
        let field = |i: usize, name: &str| -> Result<u64> {
            let f = fields[i];
            if f.starts_with('-') {
                return Err(Error::TraceParse {
                    line: line_no,
                    reason: format!("{name} is negative: {f}"),
                });
            }
            f.parse::<u64>().map_err(|e| Error::TraceParse {
                line: line_no,
                reason: format!("{name} {f:?}: {e}"),
            })
        };
        let req = Request {
            arrival_ms: field(0, "arrival_ms")?,
            prompt_tokens: field(1, "prompt_tokens")?,
            output_tokens: field(2, "output_tokens")?,
        };
        if req.prompt_tokens == 0 {
            return Err(Error::TraceParse {
                line: line_no,
                reason: "prompt_tokens must be >= 1".into(),
            });
        }
        requests.push(req);
    }
    requests.sort_by_key(|r| r.arrival_ms);
    Ok(requests)
}

pub fn format_trace(requests: &[Request]) -> String {
    let mut out = String::from("# arrival_ms,prompt_tokens,output_tokens\n");
    for r in requests {
        let _ = writeln!(
            out,
            "{},{},{}",
            r.arrival_ms, r.prompt_tokens, r.output_tokens
        );
    }
    out
}

// ─── Synthetic traces ─────────────────────────────────────────────────────────

/// Poisson arrivals with log-normal prompt and output lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub count: usize,
    /// Requests per second.
    pub rate: f64,
    pub prompt_median: f64,
    pub prompt_sigma: f64,
    pub output_median: f64,
    pub output_sigma: f64,
    pub max_prompt: u64,
    pub max_output: u64,
    pub seed: u64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            count: 100,
            rate: 5.0,
            prompt_median: 256.0,
            prompt_sigma: 0.8,
            output_median: 32.0,
            output_sigma: 0.6,
            max_prompt: 4096,
            max_output: 256,
            seed: 0,
        }
    }
}

pub fn gen_synthetic_trace(params: &TraceParams) -> Result<Vec<Request>> {
    if params.count == 0 {
        return Err(Error::config("count", "must be >= 1"));
    }
    if !(params.rate.is_finite() && params.rate > 0.0) {
        return Err(Error::config(
            "rate",
            format!("must be > 0, got {}", params.rate),
        ));
    }
    let lengths = |median: f64, sigma: f64, key: &str| {
        if !(median.is_finite() && median > 0.0) || !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::config(key, "median must be > 0 and sigma >= 0"));
        }
        LogNormal::new(median.ln(), sigma).map_err(|e| Error::config(key, e.to_string()))
    };
    let prompt = lengths(params.prompt_median, params.prompt_sigma, "prompt")?;
    let output = lengths(params.output_median, params.output_sigma, "output")?;
    let gap = Exp::new(params.rate).map_err(|e| Error::config("rate", e.to_string()))?;

    let mut rng = rng::stream(params.seed, Stream::Trace, 0, 0);
    let mut t_sec = 0.0f64;
    let mut out = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        t_sec += gap.sample(&mut rng);
        let p: f64 = prompt.sample(&mut rng);
        let o: f64 = output.sample(&mut rng);
        out.push(Request {
            arrival_ms: (t_sec * 1000.0).floor() as u64,
            prompt_tokens: (p.round() as u64).clamp(1, params.max_prompt.max(1)),
            output_tokens: (o.round() as u64).clamp(1, params.max_output.max(1)),
        });
    }
    Ok(out)
}

// ─── Batching ─────────────────────────────────────────────────────────────────

/// Groups requests by wall-clock second. Each non-empty second yields one
/// prefill batch with all its prompt tokens, then one decode batch per output
/// position carrying one token per sequence still generating.
pub fn batch_requests(requests: &[Request]) -> Vec<IterationBatch> {
    let mut batches = Vec::new();
    let mut push = |phase, token_count| {
        let iteration = batches.len();
        batches.push(IterationBatch {
            iteration,
            phase,
            token_count,
        });
    };
    for group in requests.chunk_by(|a, b| a.arrival_ms / 1000 == b.arrival_ms / 1000) {
        push(Phase::Prefill, group.iter().map(|r| r.prompt_tokens).sum());
        let longest = group.iter().map(|r| r.output_tokens).max().unwrap_or(0);
        for pos in 0..longest {
            let active = group.iter().filter(|r| r.output_tokens > pos).count() as u64;
            push(Phase::Decode, active);
        }
    }
    batches
}

// ─── Popularity and routing ───────────────────────────────────────────────────

/// Which experts are hot in which layer: a Zipf law over ranks, with a
/// per-layer rank permutation that may be re-drawn every `drift_period`
/// iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityProfile {
    pub experts: usize,
    pub prefill_exponent: f64,
    pub decode_exponent: f64,
    /// Iterations between re-permutations; 0 keeps ranks fixed.
    pub drift_period: usize,
    /// One permutation shared by all layers.
    pub shared_permutation: bool,
    pub seed: u64,
}

impl PopularityProfile {
    pub fn zipf(experts: usize, exponent: f64, seed: u64) -> Self {
        Self {
            experts,
            prefill_exponent: exponent,
            decode_exponent: exponent,
            drift_period: 0,
            shared_permutation: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::config("experts_per_layer", "must be >= 1"));
        }
        for (key, s) in [
            ("zipf_exponent", self.prefill_exponent),
            ("decode_zipf_exponent", self.decode_exponent),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config(key, format!("must be >= 0, got {s}")));
            }
        }
        Ok(())
    }

    /// `perm[rank] = expert` for `layer` at `iteration`.
    pub fn permutation(&self, layer: usize, iteration: usize) -> Vec<usize> {
        let epoch = iteration.checked_div(self.drift_period).unwrap_or(0);
        let layer_key = if self.shared_permutation {
            u64::MAX
        } else {
            layer as u64
        };
        let mut rng = rng::stream(self.seed, Stream::Permutation, layer_key, epoch as u64);
        let mut perm: Vec<usize> = (0..self.experts).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }

    /// Routing probability of each expert (indexed by expert, sums to 1).
    pub fn weights(&self, layer: usize, iteration: usize, phase: Phase) -> Vec<f64> {
        let s = match phase {
            Phase::Prefill => self.prefill_exponent,
            Phase::Decode => self.decode_exponent,
        };
        let perm = self.permutation(layer, iteration);
        let by_rank: Vec<f64> = (0..self.experts)
            .map(|r| ((r + 1) as f64).powf(-s))
            .collect();
        let total: f64 = by_rank.iter().sum();
        let mut w = vec![0.0; self.experts];
        for (rank, &expert) in perm.iter().enumerate() {
            w[expert] = by_rank[rank] / total;
        }
        w
    }
}

/// Routes every token of `batch` to `top_k` distinct experts drawn without
/// replacement from the layer's popularity law. The random stream is keyed by
/// `(seed, iteration, layer)`.
pub fn route_tokens(
    batch: &IterationBatch,
    layer: usize,
    profile: &PopularityProfile,
    top_k: usize,
    seed: u64,
) -> Result<LoadVector> {
    let e_count = profile.experts;
    if top_k == 0 || top_k > e_count {
        return Err(Error::config(
            "top_k",
            format!("must be in [1, {e_count}], got {top_k}"),
        ));
    }
    let mut loads = vec![0u64; e_count];
    if batch.token_count == 0 {
        return Ok(LoadVector::new(layer, loads));
    }
    if top_k == e_count {
        loads.iter_mut().for_each(|l| *l = batch.token_count);
        return Ok(LoadVector::new(layer, loads));
    }
    let weights = profile.weights(layer, batch.iteration, batch.phase);
    let mut rng = rng::stream(seed, Stream::Routing, batch.iteration as u64, layer as u64);
    let mut chosen = Vec::with_capacity(top_k);
    for _ in 0..batch.token_count {
        chosen.clear();
        let mut remaining = 1.0;
        for _ in 0..top_k {
            let mut u = rng.random::<f64>() * remaining;
            let mut pick = None;
            for (e, &w) in weights.iter().enumerate() {
                if chosen.contains(&e) {
                    continue;
                }
                pick = Some(e);
                if u < w {
                    break;
                }
                u -= w;
            }
            // Rounding can run past the last weight; `pick` then holds the
            // last unchosen expert.
            let e = pick.expect("top_k < experts leaves an unchosen expert");
            remaining -= weights[e];
            chosen.push(e);
            loads[e] += 1;
        }
    }
    Ok(LoadVector::new(layer, loads))
}
