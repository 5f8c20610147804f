// SPDX-License-Identifier: MIT OR Apache-2.0

mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spectral_scope::capture::{pair_samples, Construction, Role};
use spectral_scope::fixtures::{dense_head, sample_record, uniform_heads, BundleBuilder};
use spectral_scope::forensics::{classify_smoothness, classify_strategy, RegimeRule, StrategySignature, StrategyThresholds};
use spectral_scope::graph::{build_laplacian, signal_metrics, spectrum_metrics};
use spectral_scope::intervention::{ablate_heads, fiedler_gradient, steering_vector, SteeringOptions};
use spectral_scope::nalgebra::DMatrix;
use spectral_scope::stats::{bh_fdr, bootstrap_ci, effect_sizes, paired_permutation_p, BootstrapStatistic, ResamplingConfig};
use spectral_scope::stress::{profile_from_metrics, stress_table};
use spectral_scope::{
    per_layer_metrics, Aggregation, AnalysisConfig, LaplacianVariant, LayerWindow, Metric, PairedSample, TokenGraph,
};

use support::*;

fn graph(n: usize, density: f64, seed: u64) -> Dense {
    random_symmetric(n, density, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn spectrum(w: &DMatrix<f64>, v: LaplacianVariant) -> spectral_scope::LaplacianSpectrum {
    build_laplacian(&TokenGraph::from_weights(w.clone()).unwrap(), v).unwrap()
}

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn self_loops_leave_combinatorial_spectrum_unchanged(n in 2usize..10, seed: u64, lw in 0.0f64..5.0) {
        let w = to_nalgebra(&graph(n, 0.6, seed));
        let mut looped = w.clone();
        for i in 0..n {
            looped[(i, i)] += lw;
        }
        let a = spectrum(&w, LaplacianVariant::Combinatorial);
        let b = spectrum(&looped, LaplacianVariant::Combinatorial);
        prop_assert_eq!(a.eigenvalues, b.eigenvalues);
    }

    #[test]
    fn scaling_scales_combinatorial_and_fixes_normalised(n in 2usize..10, seed: u64, c in 0.1f64..10.0) {
        let w = to_nalgebra(&graph(n, 0.7, seed));
        let a = spectrum(&w, LaplacianVariant::Combinatorial);
        let b = spectrum(&(&w * c), LaplacianVariant::Combinatorial);
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        if w.row_iter().all(|r| r.sum() > 0.0) {
            let a = spectrum(&w, LaplacianVariant::Symmetric);
            let b = spectrum(&(&w * c), LaplacianVariant::Symmetric);
            for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn relabelling_tokens_keeps_the_spectrum(n in 2usize..10, seed: u64) {
        let w = to_nalgebra(&graph(n, 0.6, seed));
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p = DMatrix::from_fn(n, n, |i, j| w[(perm[i], perm[j])]);
        let a = spectrum(&w, LaplacianVariant::Combinatorial);
        let b = spectrum(&p, LaplacianVariant::Combinatorial);
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn fiedler_positive_iff_connected(n in 2usize..12, seed: u64, density in 0.05f64..0.8) {
        let w = graph(n, density, seed);
        let s = spectrum(&to_nalgebra(&w), LaplacianVariant::Combinatorial);
        prop_assert_eq!(s.fiedler_value() > 1e-8, connected(&w));
    }

    #[test]
    fn spectrum_invariants(n in 2usize..12, seed: u64) {
        let w = to_nalgebra(&graph(n, 0.7, seed));
        for v in [LaplacianVariant::Combinatorial, LaplacianVariant::Symmetric] {
            let g = TokenGraph::from_weights(w.clone()).unwrap();
            let Ok(s) = build_laplacian(&g, v) else { continue };
            prop_assert!(s.eigenvalues[0].abs() <= 1e-8);
            prop_assert!(s.eigenvalues.windows(2).all(|p| p[0] <= p[1]));
            let gram = s.eigenvectors.transpose() * &s.eigenvectors;
            prop_assert!((gram - DMatrix::identity(n, n)).amax() <= 1e-8);
            if let Ok(m) = spectrum_metrics(&s) {
                prop_assert!(m.fiedler >= 0.0);
                prop_assert!(m.spectral_entropy >= 0.0 && m.spectral_entropy <= (n as f64).log2() + 1e-12);
                prop_assert!((0.0..=1.0).contains(&m.hfer_spectral));
            }
        }
    }

    #[test]
    fn graph_fourier_energy_is_conserved(n in 2usize..10, d in 1usize..5, seed: u64) {
        let w = to_nalgebra(&graph(n, 0.7, seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        for v in [LaplacianVariant::Combinatorial, LaplacianVariant::Symmetric] {
            let g = TokenGraph::from_weights(w.clone()).unwrap();
            let Ok(s) = build_laplacian(&g, v) else { continue };
            let m = signal_metrics(&s, &x).unwrap();
            prop_assert!((m.hfer_signal + m.low_frequency_ratio - 1.0).abs() <= 1e-10);
            prop_assert!(m.smoothness >= -1e-12);
        }
    }

    #[test]
    fn gradient_is_symmetric_non_negative_hollow(n in 3usize..10, seed: u64) {
        let w = to_nalgebra(&graph(n, 0.9, seed));
        let g = TokenGraph::from_weights(w).unwrap();
        let s = build_laplacian(&g, LaplacianVariant::Combinatorial).unwrap();
        if let Ok(grad) = fiedler_gradient(&g, &s) {
            for i in 0..n {
                prop_assert_eq!(grad[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert!(grad[(i, j)] >= 0.0);
                    prop_assert_eq!(grad[(i, j)], grad[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn ablating_nothing_is_bitwise_identity(h in 1usize..6, n in 2usize..8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads: Vec<_> = (0..h).map(|_| dense_head(n, &mut rng)).collect();
        for mode in [Aggregation::MassWeighted, Aggregation::Uniform] {
            let g = spectral_scope::aggregate_heads(&heads, mode).unwrap();
            let l2 = build_laplacian(&g, LaplacianVariant::Combinatorial).unwrap().fiedler_value();
            prop_assert_eq!(ablate_heads(&heads, &[], mode).unwrap().to_bits(), l2.to_bits());
        }
    }

    #[test]
    fn swapping_roles_negates_deltas(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = AnalysisConfig::default();
        let mut b = BundleBuilder::new("m", 4, 2, 1);
        for (id, role) in [("a", Role::Canonical), ("b", Role::Stressed)] {
            let layers = (0..4).map(|_| (0..2).map(|_| dense_head(5, &mut rng)).collect()).collect();
            b.push(sample_record(id, "en", Construction::Active, role, "p", 5), layers, None);
        }
        let bundle = b.build().unwrap();
        let ma = per_layer_metrics(bundle.sample("a").unwrap(), &config).unwrap();
        let mb = per_layer_metrics(bundle.sample("b").unwrap(), &config).unwrap();
        let pair = PairedSample { pair_id: "p".into(), canonical: "a".into(), stressed: "b".into() };
        let w = LayerWindow::new(1, 4).unwrap();
        for metric in [Metric::Fiedler, Metric::SpectralEntropy, Metric::HferSpectral] {
            let fwd = profile_from_metrics(&pair, &ma, &mb, metric, w).unwrap();
            let back = profile_from_metrics(&pair, &mb, &ma, metric, w).unwrap();
            for (x, y) in fwd.per_layer_delta.iter().zip(&back.per_layer_delta) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn window_mean_is_linear_over_partitions(deltas in prop::collection::vec(-2.0f64..2.0, 2..12), cut_frac in 0.0f64..1.0) {
        let l = deltas.len();
        let cut = 1 + ((l - 1) as f64 * cut_frac) as usize; // first part [1, cut], second [cut+1, l]
        prop_assume!(cut < l);
        let whole = LayerWindow::new(1, l).unwrap().mean_of(&deltas).unwrap();
        let a = LayerWindow::new(1, cut).unwrap().mean_of(&deltas).unwrap();
        let b = LayerWindow::new(cut + 1, l).unwrap().mean_of(&deltas).unwrap();
        let combined = (a * cut as f64 + b * (l - cut) as f64) / l as f64;
        prop_assert!((whole - combined).abs() <= 1e-12);
    }

    #[test]
    fn bh_rejections_grow_with_q(p in prop::collection::vec(0.0f64..=1.0, 1..20), q1 in 0.001f64..1.0, q2 in 0.001f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = bh_fdr(&p, lo).unwrap();
        let b = bh_fdr(&p, hi).unwrap();
        for (x, y) in a.reject.iter().zip(&b.reject) {
            prop_assert!(!x || *y);
        }
        for (adj, raw) in a.adjusted.iter().zip(&p) {
            prop_assert!(adj >= raw);
        }
        let all = bh_fdr(&p, 1.0).unwrap();
        for (r, raw) in all.reject.iter().zip(&p) {
            if *raw < 1.0 {
                prop_assert!(*r);
            }
        }
    }

    #[test]
    fn bootstrap_stays_in_range(values in prop::collection::vec(-100.0f64..100.0, 1..30), seed: u64) {
        let c = ResamplingConfig { n_bootstrap: 300, ..Default::default() }.with_seed(seed);
        let (lo, hi) = bootstrap_ci(&values, BootstrapStatistic::Mean, &c).unwrap();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
    }

    #[test]
    fn effect_sizes_are_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 3..15),
        b in prop::collection::vec(-10.0f64..10.0, 3..15),
    ) {
        let c = ResamplingConfig::default();
        if let (Ok(ab), Ok(ba)) = (effect_sizes(&a, &b, false, &c), effect_sizes(&b, &a, false, &c)) {
            prop_assert!((ab.cohens_d + ba.cohens_d).abs() <= 1e-12 * (1.0 + ab.cohens_d.abs()));
            prop_assert!((ab.hedges_g + ba.hedges_g).abs() <= 1e-12 * (1.0 + ab.hedges_g.abs()));
        }
    }

    #[test]
    fn exhaustive_p_has_dyadic_denominator(deltas in prop::collection::vec(-3i64..=3, 1..11)) {
        let d: Vec<f64> = deltas.iter().map(|&v| v as f64).collect();
        let r = paired_permutation_p(&d, &ResamplingConfig::default()).unwrap();
        let scaled = r.p_value * (1u64 << d.len()) as f64;
        prop_assert!(r.exhaustive);
        prop_assert_eq!(scaled, scaled.round());
        let (hits, total) = exhaustive_p_int(&deltas);
        prop_assert_eq!(r.p_value, hits as f64 / total as f64);
    }

    #[test]
    fn smoothness_labels_are_monotone(s1 in 0.0f64..3.0, s2 in 0.0f64..3.0) {
        let r = RegimeRule::default();
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(classify_smoothness(lo, &r).unwrap() <= classify_smoothness(hi, &r).unwrap());
    }

    #[test]
    fn strategy_list_is_total(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0) {
        let sig = StrategySignature { lambda2_en_baseline: a, delta_lambda2: b, delta_hfer: c, delta_entropy: d };
        let t = StrategyThresholds::default();
        prop_assert_eq!(classify_strategy(&sig, &t), classify_strategy(&sig, &t));
    }

    #[test]
    fn steering_vector_scales_linearly(seed: u64, c in -4.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden: Vec<Vec<DMatrix<f64>>> = (0..2)
            .map(|_| (0..3).map(|_| DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0))).collect())
            .collect();
        let build = |scale: f64| {
            let mut b = BundleBuilder::new("m", 2, 1, 4);
            for (k, role) in [Role::Canonical, Role::Stressed].into_iter().enumerate() {
                let h: Vec<DMatrix<f64>> = hidden[k].iter().map(|m| m * scale).collect();
                b.push(sample_record(&format!("s{k}"), "en", Construction::Active, role, "p", 3), vec![uniform_heads(1, 3); 2], Some(h));
            }
            b.build().unwrap()
        };
        let v1 = steering_vector(&build(1.0), 1, &[], &SteeringOptions::default()).unwrap();
        let vc = steering_vector(&build(c), 1, &[], &SteeringOptions::default()).unwrap();
        // Blobs are binary32, so scaled inputs are rounded independently.
        for (x, y) in v1.values.iter().zip(&vc.values) {
            prop_assert!((x * c - y).abs() <= 1e-6 * (1.0 + y.abs()));
        }
    }
}

fn pairing_bundle(order: &[usize]) -> spectral_scope::CaptureBundle {
    let records = [
        ("c1", Role::Canonical, "p1"),
        ("s1", Role::Stressed, "p1"),
        ("c2", Role::Canonical, "p2"),
        ("s2a", Role::Stressed, "p2"),
        ("s2b", Role::Stressed, "p2"),
        ("lonely", Role::Stressed, "p3"),
    ];
    let mut b = BundleBuilder::new("m", 1, 1, 1);
    for &i in order {
        let (id, role, pair) = records[i];
        b.push(sample_record(id, "en", Construction::Active, role, pair, 3), vec![uniform_heads(1, 3)], None);
    }
    b.build().unwrap()
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn pairing_ignores_manifest_order(order in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let reference = pair_samples(&pairing_bundle(&[0, 1, 2, 3, 4, 5])).unwrap();
        prop_assert_eq!(pair_samples(&pairing_bundle(&order)).unwrap(), reference);
    }
}

#[test]
fn monte_carlo_permutation_tracks_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for n in [10usize, 11, 12, 13] {
        let b = (1usize << n) / 2;
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..1.0)).collect();
        let exact = paired_permutation_p(&deltas, &ResamplingConfig { n_permutations: 1 << 14, ..Default::default() }).unwrap();
        assert!(exact.exhaustive);
        let mc_cfg = ResamplingConfig { n_permutations: b, seed: 5, ..Default::default() };
        let mc = paired_permutation_p(&deltas, &mc_cfg).unwrap();
        assert!(!mc.exhaustive);
        let se = (exact.p_value * (1.0 - exact.p_value) / b as f64).sqrt().max(1.0 / (b + 1) as f64);
        assert!((mc.p_value - exact.p_value).abs() <= 3.0 * se, "n={n}: {} vs {}", mc.p_value, exact.p_value);
    }
}

#[test]
fn stress_tables_are_deterministic_under_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = BundleBuilder::new("m", 3, 2, 1);
    for p in 0..5 {
        for (tag, role) in [("c", Role::Canonical), ("s", Role::Stressed)] {
            let layers = (0..3).map(|_| (0..2).map(|_| dense_head(6, &mut rng)).collect()).collect();
            let construction = if role == Role::Canonical { Construction::Active } else { Construction::Passive };
            b.push(sample_record(&format!("{p}{tag}"), "en", construction, role, &format!("p{p}"), 6), layers, None);
        }
    }
    let bundle = b.build().unwrap();
    let cfg = ResamplingConfig { seed: 11, ..Default::default() };
    let w = LayerWindow::new(1, 3).unwrap();
    let a = stress_table(&bundle, Metric::Fiedler, &AnalysisConfig::default(), w, &cfg).unwrap();
    let b = stress_table(&bundle, Metric::Fiedler, &AnalysisConfig::default(), w, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.cells[0].ci.is_some());
}
