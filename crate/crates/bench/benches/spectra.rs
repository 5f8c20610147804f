// SPDX-License-Identifier: MIT OR Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spectral_scope::intervention::{head_importance, GradientOptions};
use spectral_scope::stats::{bootstrap_ci, paired_permutation_p, BootstrapStatistic, ResamplingConfig};
use spectral_scope::{aggregate_heads, build_laplacian, spectrum_metrics, Aggregation, LaplacianVariant};
use spectral_scope_bench::layer;

fn spectra(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_spectrum");
    for tokens in [16, 64, 128] {
        let heads = layer(32, tokens, 7);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &heads, |b, heads| {
            b.iter(|| {
                let g = aggregate_heads(heads, Aggregation::MassWeighted).unwrap();
                let s = build_laplacian(&g, LaplacianVariant::Combinatorial).unwrap();
                spectrum_metrics(&s).unwrap()
            })
        });
    }
    group.finish();
}

fn importance(c: &mut Criterion) {
    let heads = vec![layer(32, 32, 3)];
    c.bench_function("head_importance_32x32", |b| {
        b.iter(|| head_importance(&heads, 2, &GradientOptions::default()).unwrap())
    });
}

fn resampling(c: &mut Criterion) {
    let values: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
    let cfg = ResamplingConfig::default();
    c.bench_function("bootstrap_200", |b| {
        b.iter(|| bootstrap_ci(&values, BootstrapStatistic::Mean, &cfg).unwrap())
    });
    c.bench_function("permutation_200", |b| b.iter(|| paired_permutation_p(&values, &cfg).unwrap()));
}

criterion_group!(benches, spectra, importance, resampling);
criterion_main!(benches);
