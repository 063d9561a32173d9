//! Per-layer scheduling kernels: routing, greedy splitting, placement.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use moe_sim_core::cost_model::{ClusterSpec, ModelSpec};
use moe_sim_core::placer::{place_experts, update_registry, ReplicaRegistry};
use moe_sim_core::scaler::{scale_experts, ScalerConfig};
use moe_sim_core::workload::{route_tokens, IterationBatch, Phase, PopularityProfile};

fn batch(tokens: u64) -> IterationBatch {
    IterationBatch {
        iteration: 0,
        phase: Phase::Prefill,
        token_count: tokens,
    }
}

fn model(experts: usize) -> ModelSpec {
    ModelSpec {
        experts_per_layer: experts,
        layer_mem_cap: experts as f64 * 330.0,
        ..ModelSpec::default()
    }
}

fn routing(c: &mut Criterion) {
    let mut g = c.benchmark_group("route_tokens");
    for tokens in [64u64, 4096, 65_536] {
        let profile = PopularityProfile::zipf(16, 1.2, 0);
        g.bench_with_input(BenchmarkId::from_parameter(tokens), &tokens, |b, &t| {
            b.iter(|| route_tokens(black_box(&batch(t)), 0, &profile, 2, 1).unwrap())
        });
    }
    g.finish();
}

fn scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("scale_experts");
    for experts in [16usize, 64, 256] {
        let profile = PopularityProfile::zipf(experts, 1.2, 0);
        let loads = route_tokens(&batch(8192), 0, &profile, 2, 1).unwrap();
        let m = model(experts);
        g.bench_with_input(BenchmarkId::from_parameter(experts), &loads, |b, lv| {
            b.iter(|| scale_experts(black_box(lv), &m, &ScalerConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn placement(c: &mut Criterion) {
    let mut g = c.benchmark_group("place_experts");
    for experts in [16usize, 64, 256] {
        let profile = PopularityProfile::zipf(experts, 1.2, 0);
        let loads = route_tokens(&batch(8192), 0, &profile, 2, 1).unwrap();
        let m = model(experts);
        let plan = scale_experts(&loads, &m, &ScalerConfig::default()).unwrap();
        let cluster = ClusterSpec {
            gpu_count: 8,
            ..ClusterSpec::default()
        };
        let cold = ReplicaRegistry::new(10);
        let mut warm = ReplicaRegistry::new(10);
        let first = place_experts(&plan, &cluster, m.expert_mem, &cold, 0).unwrap();
        update_registry(&mut warm, &first.placement, 0);
        g.bench_with_input(BenchmarkId::new("cold", experts), &plan, |b, p| {
            b.iter(|| place_experts(black_box(p), &cluster, m.expert_mem, &cold, 1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("warm", experts), &plan, |b, p| {
            b.iter(|| place_experts(black_box(p), &cluster, m.expert_mem, &warm, 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, routing, scaling, placement);
criterion_main!(benches);
