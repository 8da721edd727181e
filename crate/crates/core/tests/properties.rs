use proptest::prelude::*;

use sift_core::archive::{read_archive, write_archive};
use sift_core::merge::{direct_merge, interference_free_merge, TaskVector};
use sift_core::optim::{gradient_projection, momentum_update, removed_component};
use sift_core::spectral::{
    compact_svd, cosine_alignment, effective_rank, msign_exact, DEFAULT_RANK_TOL,
};
use sift_core::telemetry::{
    self, conflict_count_margins, sparsity_stats, AlignmentRecord, LossRecord, RankRecord,
};
use sift_core::{sift_direction, ExportFormat, Matrix, Method, ModelState, OptimizerConfig, RunTelemetry};

fn matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0..10.0f64, r * c)
            .prop_map(move |data| Matrix::new(r, c, data).unwrap())
    })
}

fn matrix_pair(max_dim: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        let v = || prop::collection::vec(-10.0..10.0f64, r * c);
        (v(), v()).prop_map(move |(a, b)| {
            (Matrix::new(r, c, a).unwrap(), Matrix::new(r, c, b).unwrap())
        })
    })
}

/// Any finite double, including subnormals and extremes.
fn finite_f64() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |x| x.is_finite())
}

fn telemetry_strategy() -> impl Strategy<Value = RunTelemetry> {
    (1..6usize, 1..5usize).prop_flat_map(|(steps, blocks)| {
        let n = steps * blocks;
        (
            prop::collection::vec((finite_f64(), any::<bool>()), n),
            prop::collection::vec((finite_f64(), finite_f64()), steps + 1),
            prop::option::of(prop::collection::vec((0..9usize, any::<bool>()), n)),
        )
            .prop_map(move |(taus, losses, ranks)| {
                let mut t = RunTelemetry::new(Method::Sift, &OptimizerConfig::default());
                t.alignment = taus
                    .into_iter()
                    .enumerate()
                    .map(|(i, (tau, act))| AlignmentRecord {
                        step: i / blocks,
                        block_index: i % blocks,
                        block_name: format!("b,\"{}\"", i % blocks),
                        tau,
                        activated: act && tau < -0.1,
                    })
                    .collect();
                t.losses = losses
                    .into_iter()
                    .enumerate()
                    .map(|(step, (f_loss, g_loss))| LossRecord { step, f_loss, g_loss })
                    .collect();
                t.rank_trace = ranks.map(|r| {
                    r.into_iter()
                        .enumerate()
                        .map(|(i, (rank, zero))| RankRecord {
                            step: i / blocks,
                            block_index: i % blocks,
                            alpha: 0.9,
                            effective_rank: if zero { 0 } else { rank },
                            zero_momentum: zero,
                        })
                        .collect()
                });
                t
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(m in matrix(7)) {
        prop_assume!(!m.is_zero());
        let f = compact_svd(&m, DEFAULT_RANK_TOL).unwrap();
        let scale = m.frobenius_norm();
        prop_assert!(f.reconstruct().distance(&m) <= 1e-12 * scale.max(1.0));
        prop_assert!(f.u.orthonormality_defect() <= 1e-12);
        prop_assert!(f.v.orthonormality_defect() <= 1e-12);
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn msign_is_scale_invariant_and_idempotent(m in matrix(6), c in 1e-3..1e3f64) {
        prop_assume!(!m.is_zero());
        let s = msign_exact(&m).unwrap();
        prop_assert!(s.max_abs_diff(&msign_exact(&m.scale(c)).unwrap()) <= 1e-10);
        prop_assert!(s.max_abs_diff(&msign_exact(&s).unwrap()) <= 1e-10);
        // Singular values of msign are all one, so ‖·‖_F² is the rank.
        let rank = compact_svd(&m, DEFAULT_RANK_TOL).unwrap().rank() as f64;
        prop_assert!((s.dot(&s) - rank).abs() <= 1e-9);
    }

    #[test]
    fn projection_decomposes_gradient((gf, gg) in matrix_pair(6)) {
        prop_assume!(!gg.is_zero());
        let p = gradient_projection(&gf, &gg).unwrap();
        let r = removed_component(&gf, &gg).unwrap();
        prop_assert!(p.try_add(&r).unwrap().max_abs_diff(&gf) <= 1e-12 * gf.frobenius_norm().max(1.0));
        let scale = gf.frobenius_norm() * gg.frobenius_norm();
        prop_assert!(p.dot(&gg).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn cosine_is_bounded_and_symmetric((a, b) in matrix_pair(6)) {
        prop_assume!(!a.is_zero() && !b.is_zero());
        let ab = cosine_alignment(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, cosine_alignment(&b, &a).unwrap());
        prop_assert!((cosine_alignment(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn momentum_update_is_affine((m, g) in matrix_pair(5), beta in 0.0..1.0f64) {
        let out = momentum_update(&m, &g, beta).unwrap();
        let mut expected = g.clone();
        expected.axpy(beta, &m);
        prop_assert_eq!(out, expected);
    }

    #[test]
    fn sift_direction_is_a_contraction((mf, mg) in matrix_pair(6), k in 1..6usize) {
        prop_assume!(!mf.is_zero() && !mg.is_zero());
        let d = sift_direction(&mf, &mg, k, 5).unwrap();
        prop_assert_eq!(d.shape(), mf.shape());
        // Product of two partial isometries: every singular value ≤ 1.
        if !d.is_zero() {
            let s = compact_svd(&d, DEFAULT_RANK_TOL).unwrap();
            prop_assert!(s.sigma[0] <= 1.0 + 1e-6, "sigma_max {}", s.sigma[0]);
        }
    }

    #[test]
    fn effective_rank_is_monotone(
        mut sigma in prop::collection::vec(1e-3..10.0f64, 1..12),
        a in 0.01..1.0f64,
        b in 0.01..1.0f64,
    ) {
        sigma.sort_by(|x, y| y.total_cmp(x));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = effective_rank(&sigma, lo).unwrap();
        let r_hi = effective_rank(&sigma, hi).unwrap();
        prop_assert!(1 <= r_lo && r_lo <= r_hi && r_hi <= sigma.len());
        prop_assert_eq!(effective_rank(&sigma, 1.0).unwrap(), sigma.len());
    }

    #[test]
    fn telemetry_statistics_are_consistent(t in telemetry_strategy()) {
        let s = sparsity_stats(&t).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.temporal) && (0.0..=1.0).contains(&s.spatial));
        prop_assert_eq!(s.temporal == 0.0, t.activations().is_empty());
        let m = conflict_count_margins(&t, -0.1);
        prop_assert_eq!(m.per_step.iter().sum::<usize>(), m.per_block.iter().sum::<usize>());
        prop_assert!(t.validate(-0.1).is_ok());
    }

    #[test]
    fn telemetry_round_trips_bit_exactly(t in telemetry_strategy(), json in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let format = if json { ExportFormat::Json } else { ExportFormat::Csv };
        telemetry::export(&t, dir.path(), format).unwrap();
        let back = telemetry::import(dir.path(), format).unwrap();
        prop_assert_eq!(back.alignment.len(), t.alignment.len());
        for (x, y) in back.alignment.iter().zip(&t.alignment) {
            prop_assert_eq!(x.tau.to_bits(), y.tau.to_bits());
        }
        for (x, y) in back.losses.iter().zip(&t.losses) {
            prop_assert_eq!(x.f_loss.to_bits(), y.f_loss.to_bits());
            prop_assert_eq!(x.g_loss.to_bits(), y.g_loss.to_bits());
        }
        prop_assert_eq!(back.rank_trace, t.rank_trace);
        prop_assert_eq!(back.alignment, t.alignment);
        prop_assert_eq!(back.config, t.config);
    }

    #[test]
    fn archive_round_trips_bit_exactly(
        blocks in prop::collection::vec(
            (1..5usize, 1..5usize).prop_flat_map(|(r, c)| {
                prop::collection::vec(finite_f64(), r * c)
                    .prop_map(move |d| Matrix::new(r, c, d).unwrap())
            }),
            1..4,
        ),
        step in 0..1000usize,
    ) {
        let named = blocks.into_iter().enumerate().map(|(i, m)| (format!("w{i}"), m)).collect();
        let mut state = ModelState::new(named).unwrap();
        state.step = step;
        let dir = tempfile::tempdir().unwrap();
        write_archive(&state, dir.path()).unwrap();
        let back = read_archive(dir.path()).unwrap();
        for (x, y) in back.matrices().zip(state.matrices()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(x), bits(y));
        }
        prop_assert_eq!(back.layout(), state.layout());
        prop_assert_eq!(back.step, step);
    }

    #[test]
    fn whitened_merge_removes_interference(
        rank_f in 1..3usize,
        rank_g in 1..3usize,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut low_rank = |r: usize| {
            let mut g = |rows, cols| Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
            let (a, b) = (g(8, r), g(r, 6));
            a.matmul(&b)
        };
        let df = TaskVector::new(vec![("w".into(), low_rank(rank_f))]).unwrap();
        let dg = TaskVector::new(vec![("w".into(), low_rank(rank_g))]).unwrap();
        let out = interference_free_merge(&df, &dg).unwrap();
        for r in &out.reports {
            prop_assert!(r.interference_after <= 1e-8, "{r:?}");
            prop_assert!(!r.fallback);
        }
        let direct = direct_merge(&df, &dg).unwrap();
        let swapped = direct_merge(&dg, &df).unwrap();
        prop_assert!(direct.delta(0).max_abs_diff(swapped.delta(0)) == 0.0);
    }
}
