use proptest::prelude::*;

use super::*;

/// One sample per batch, `H = 2` exactly (factor `[1, 1]`).
fn scalar_two() -> QuadraticProblem<f64> {
    QuadraticProblem::contiguous(1, 1, vec![Tensor::new([1, 2], vec![1.0, 1.0]).unwrap()]).unwrap()
}

fn nalgebra_top(h: &Tensor<f64>) -> f64 {
    let d = h.shape()[0];
    let m = nalgebra::DMatrix::from_row_slice(d, d, h.data());
    nalgebra::SymmetricEigen::new(m).eigenvalues.max()
}

#[test]
fn batch_hessian_cases() {
    let eye = |d: usize| Tensor::<f64>::eye(d);
    let p = QuadraticProblem::contiguous(3, 2, vec![eye(3), eye(3), eye(3), eye(3)]).unwrap();
    assert_eq!(batch_hessian(&p, 1).unwrap(), eye(3));
    assert!(batch_hessian(&p, 2).is_err());

    let r = QuadraticProblem::<f64>::random(4, 6, 1, 2, 0, 3).unwrap();
    assert_eq!(batch_hessian(&r, 4).unwrap(), r.hessian(4).map(|v| v * 1.0));

    let r = QuadraticProblem::<f64>::random(4, 6, 3, 2, 0, 4).unwrap();
    let h = batch_hessian(&r, 1).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let mut naive = 0.0;
            for n in 3..6 {
                let g = r.factor(n);
                for c in 0..2 {
                    naive += g.get2(i, c) * g.get2(j, c);
                }
            }
            assert!((h.get2(i, j) - naive / 3.0).abs() < 1e-14);
            assert_eq!(h.get2(i, j), h.get2(j, i));
        }
    }
}

#[test]
fn spectral_stats_cases() {
    let g = Tensor::<f64>::new([2, 1], vec![1.0, 0.0]).unwrap();
    let p = QuadraticProblem::contiguous(2, 1, vec![g.clone(), g]).unwrap();
    let s = spectral_stats(&p).unwrap();
    assert_eq!(
        (s.lambda_max, s.lambda_bar_max, s.lambda_min),
        (1.0, 1.0, 1.0)
    );
    assert_eq!(s.null_basis.len(), 1);
    assert!((s.null_basis[0][1].abs() - 1.0).abs() < 1e-12);

    let s = spectral_stats(&scalar_two()).unwrap();
    assert_eq!(s.lambda_max, 2.0);

    let r = QuadraticProblem::<f64>::random(6, 12, 3, 2, 0, 9).unwrap();
    let s = spectral_stats(&r).unwrap();
    let oracle = s.batch.iter().map(nalgebra_top).fold(0.0, f64::max);
    assert!((s.lambda_max - oracle).abs() <= 1e-8 * oracle);
    assert!((s.lambda_bar_max - nalgebra_top(&s.mean)).abs() <= 1e-8 * oracle);
    assert!(
        s.lambda_max >= s.lambda_bar_max && s.lambda_bar_max >= s.lambda_min && s.lambda_min > 0.0
    );
}

#[test]
fn constructed_null_space_is_found() {
    let r = QuadraticProblem::<f64>::random(7, 16, 4, 3, 2, 1).unwrap();
    let s = spectral_stats(&r).unwrap();
    assert_eq!(s.null_basis.len(), 2);
    assert_eq!(s.range_basis.len(), 5);
}

#[test]
fn scalar_simulation_follows_closed_form() {
    let p = scalar_two();
    let s = spectral_stats(&p).unwrap();
    let opts = SimOptions {
        max_steps: 200,
        record: true,
    };
    let sim = simulate(&p, &s, 0.9, &[1.0], opts, &mut RngStream::new(1)).unwrap();
    assert_eq!(sim.verdict, Verdict::Converged);
    for (t, &(norm, _)) in sim.trace.iter().enumerate().take(20) {
        assert!((norm - 0.8f64.powi(t as i32)).abs() < 1e-12);
    }
    let sim = simulate(&p, &s, 1.1, &[1.0], opts, &mut RngStream::new(1)).unwrap();
    assert_eq!(sim.verdict, Verdict::Diverged);
}

#[test]
fn null_space_component_is_constant() {
    let p = QuadraticProblem::<f64>::random(5, 8, 2, 2, 2, 6).unwrap();
    let s = spectral_stats(&p).unwrap();
    let w0 = [0.3, -1.0, 0.5, 2.0, 0.7];
    let eta = 1.0 / s.lambda_max;
    let opts = SimOptions {
        max_steps: 50,
        record: false,
    };
    let sim = simulate(&p, &s, eta, &w0, opts, &mut RngStream::new(2)).unwrap();
    for v in &s.null_basis {
        assert!((dot(v, &w0) - dot(v, &sim.final_w)).abs() < 1e-12);
    }
}

#[test]
fn theorem_check_boundary() {
    let s = spectral_stats(&scalar_two()).unwrap();
    assert_eq!(theorem_check(&s, 0.99), Prediction::Stable);
    assert_eq!(theorem_check(&s, 1.0), Prediction::UnstablePossible);
}

#[test]
fn theorem_sufficiency_sweep() {
    for trial in 0..100u64 {
        let d = 2 + (trial % 6) as usize;
        let p = QuadraticProblem::<f64>::random(d, 16, 4, d, 0, trial).unwrap();
        let s = spectral_stats(&p).unwrap();
        let eta = 0.9 * 2.0 / s.lambda_max;
        assert_eq!(theorem_check(&s, eta), Prediction::Stable);
        let w0 = vec![1.0; d];
        let sim = simulate(
            &p,
            &s,
            eta,
            &w0,
            SimOptions::default(),
            &mut RngStream::new(trial),
        )
        .unwrap();
        assert_eq!(sim.verdict, Verdict::Converged, "trial {trial}");
    }
}

#[test]
fn tightness_scalar_boundary() {
    let (p, _) = tightness_construct::<f64>(1, 2, 8, 2.0, 5).unwrap();
    let s = spectral_stats(&p).unwrap();
    assert!((s.lambda_max - 2.0).abs() < 1e-12);
    let run = |eta: f64| {
        simulate(
            &p,
            &s,
            eta,
            &[1.0],
            SimOptions::default(),
            &mut RngStream::new(3),
        )
        .unwrap()
        .verdict
    };
    assert_eq!(run(1.0 * (1.0 - 1e-3)), Verdict::Converged);
    assert_eq!(run(1.0 * (1.0 + 1e-3)), Verdict::Diverged);
}

#[test]
fn tight_instance_moves_only_on_its_batch() {
    let (p, k_star) = tightness_construct::<f64>(4, 3, 12, 1.5, 8).unwrap();
    let s = spectral_stats(&p).unwrap();
    for k in 0..p.batches() {
        let zero = s.batch[k].data().iter().all(|&v| v == 0.0);
        assert_eq!(zero, k != k_star);
    }
    assert!((s.lambda_max - 1.5).abs() < 1e-12);
    assert!((s.lambda_bar_max - 1.5 / p.batches() as f64).abs() < 1e-12);
}

#[test]
fn second_moment_trivial_cases() {
    let p = QuadraticProblem::<f64>::random(4, 8, 2, 2, 1, 2).unwrap();
    let s = spectral_stats(&p).unwrap();
    let w = [0.5, -0.25, 1.0, 2.0];
    assert!((second_moment_form(&s, 0.0, &w) - dot(&w, &w)).abs() < 1e-14);
    let v = &s.null_basis[0];
    assert!((second_moment_form(&s, 0.3, v) - 1.0).abs() < 1e-12);
}

#[test]
fn second_moment_matches_monte_carlo() {
    let p = QuadraticProblem::<f64>::random(5, 12, 3, 2, 0, 21).unwrap();
    let s = spectral_stats(&p).unwrap();
    let eta = 1.2 / s.lambda_max;
    let w = [1.0, -0.5, 0.25, 0.8, -1.2];
    let mut stream = RngStream::new(4);
    let draws = 100_000;
    let mut acc = 0.0;
    let mut scratch = vec![0.0; 5];
    for _ in 0..draws {
        let mut x = w.to_vec();
        let k = stream.below(p.batches());
        sgd_apply(&s.batch[k], eta, &mut x, &mut scratch);
        acc += dot(&x, &x);
    }
    let mc = acc / draws as f64;
    let exact = second_moment_form(&s, eta, &w);
    assert!((mc - exact).abs() <= 0.01 * exact);
}

#[test]
fn second_moment_condition_cases() {
    let s = spectral_stats(&scalar_two()).unwrap();
    let (v, holds) = second_moment_condition(&s, 1.01).unwrap();
    assert!((v - 1.0404).abs() < 1e-12);
    assert!(!holds);
    let p = QuadraticProblem::<f64>::random(4, 8, 2, 1, 1, 3).unwrap();
    let s = spectral_stats(&p).unwrap();
    assert!(second_moment_condition(&s, 1e-9).unwrap().1);
    for trial in 0..100u64 {
        let p = QuadraticProblem::<f64>::random(
            3 + (trial % 5) as usize,
            12,
            3,
            2,
            (trial % 2) as usize,
            100 + trial,
        )
        .unwrap();
        let s = spectral_stats(&p).unwrap();
        let eta = (0.05 + 0.9 * (trial as f64 / 100.0)) * 2.0 / s.lambda_max;
        assert!(second_moment_condition(&s, eta).unwrap().1, "trial {trial}");
    }
}

#[test]
fn rate_bound_cases() {
    let p = scalar_two();
    let s = spectral_stats(&p).unwrap();
    assert_eq!(rate_bound(&s, 0.5, 0, &[3.0]).unwrap(), 9.0);
    assert_eq!(rate_bound(&s, 0.5, 1, &[3.0]).unwrap(), 0.0);
    let sim = simulate(
        &p,
        &s,
        0.5,
        &[3.0],
        SimOptions {
            max_steps: 1,
            record: true,
        },
        &mut RngStream::new(0),
    )
    .unwrap();
    assert_eq!(sim.final_w, vec![0.0]);
    assert!(rate_bound(&s, 1.0, 1, &[3.0]).is_err());
}

#[test]
fn first_moment_matches_monte_carlo() {
    let p = QuadraticProblem::<f64>::random(3, 8, 2, 2, 0, 12).unwrap();
    let s = spectral_stats(&p).unwrap();
    let eta = 1.0 / s.lambda_max;
    let w0 = [1.0, -1.0, 0.5];
    let steps = 10;
    let (mean_w, mean_proj) =
        monte_carlo_moments(&p, &s, eta, &w0, steps, 10_000, &RngStream::new(9)).unwrap();
    for t in [1, 5, 10] {
        let expect = first_moment(&s, eta, t, &w0);
        // Per-coordinate Monte-Carlo error is at most sqrt(E‖w_t‖² / n).
        let se = (mean_proj[t] / 10_000.0).sqrt();
        for (a, b) in mean_w[t].iter().zip(&expect) {
            assert!((a - b).abs() <= 4.0 * se, "t = {t}: {a} vs {b}");
        }
    }
}

#[test]
fn monte_carlo_is_order_independent_of_threads() {
    let p = QuadraticProblem::<f64>::random(3, 8, 2, 2, 0, 12).unwrap();
    let s = spectral_stats(&p).unwrap();
    let a = monte_carlo_moments(&p, &s, 0.3, &[1.0, 0.0, 0.0], 5, 600, &RngStream::new(1)).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let b = pool
        .install(|| monte_carlo_moments(&p, &s, 0.3, &[1.0, 0.0, 0.0], 5, 600, &RngStream::new(1)))
        .unwrap();
    assert_eq!(a.1, b.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merging_batches_never_raises_lambda_max(seed in 0u64..10_000, d in 1usize..6, k_log in 1u32..4) {
        let k = 1usize << k_log;
        let p = QuadraticProblem::<f64>::random(d, 2 * k, 2, 2, 0, seed).unwrap();
        let before = spectral_stats(&p).unwrap().lambda_max;
        let merged = p.merge_batches(2).unwrap();
        let after = spectral_stats(&merged).unwrap().lambda_max;
        prop_assert!(after <= before * (1.0 + 1e-12));
    }

    #[test]
    fn projector_is_symmetric_and_idempotent(seed in 0u64..10_000, d in 2usize..7, null in 0usize..2) {
        let p = QuadraticProblem::<f64>::random(d, 8, 2, 2, null.min(d - 1), seed).unwrap();
        let s = spectral_stats(&p).unwrap();
        let pp = crate::tensor::matmul(&s.projector, &s.projector).unwrap();
        for i in 0..d {
            for j in 0..d {
                prop_assert!((s.projector.get2(i, j) - s.projector.get2(j, i)).abs() < 1e-12);
                prop_assert!((pp.get2(i, j) - s.projector.get2(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stable_prediction_implies_convergence(seed in 0u64..10_000, c in 0.1f64..0.95) {
        let p = QuadraticProblem::<f64>::random(4, 8, 2, 4, 0, seed).unwrap();
        let s = spectral_stats(&p).unwrap();
        let eta = c * 2.0 / s.lambda_max;
        let sim = simulate(&p, &s, eta, &[1.0, 1.0, 1.0, 1.0], SimOptions::default(), &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(sim.verdict, Verdict::Converged);
    }
}
