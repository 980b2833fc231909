use drivesim::multipliers::{
    clip_global_norm, multiplier_step, procrustes, solve_multipliers, update_group, GradientMatrix,
    MultiplierSolution, Optimizer, OptimizerConfig, OptimizerKind, UpdateOutcome, DEFAULT_OMEGA,
};
use drivesim::policy::{ParamGroup, ParamStore};
use drivesim::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box-Muller standard normal.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt on three columns.
fn orthonormalize(mut cols: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for j in 0..cols.len() {
        for k in 0..j {
            let d = dot(&cols[j], &cols[k]);
            let prev = cols[k].clone();
            cols[j].iter_mut().zip(&prev).for_each(|(x, p)| *x -= d * p);
        }
        let n = dot(&cols[j], &cols[j]).sqrt();
        cols[j].iter_mut().for_each(|x| *x /= n);
    }
    cols
}

fn random_matrix<R: Rng>(rng: &mut R, n: usize) -> GradientMatrix {
    GradientMatrix::new(std::array::from_fn(|_| (0..n).map(|_| gaussian(rng)).collect())).unwrap()
}

/// Solves the 3×3 system `A x = b` by Gaussian elimination with pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        x[r] = (b[r] - (r + 1..3).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

#[test]
fn orthonormal_columns_give_omega() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [3, 10, 200] {
        let q = orthonormalize((0..3).map(|_| (0..n).map(|_| gaussian(&mut rng)).collect()).collect());
        let g = GradientMatrix::new([q[0].clone(), q[1].clone(), q[2].clone()]).unwrap();
        let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
        assert!((s.sigma - 1.0).abs() < 1e-12);
        for (a, b) in s.lambda.iter().zip(DEFAULT_OMEGA) {
            assert!((a - b).abs() < 1e-12, "{:?}", s.lambda);
        }
    }
}

#[test]
fn random_matrices_satisfy_the_multiplier_equation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(3..120);
        let g = random_matrix(&mut rng, n);
        let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
        assert!(!s.rank_deficient);
        assert!(s.residual <= 1e-8 * s.target_norm, "{} vs {}", s.residual, s.target_norm);

        let pr = procrustes(&g);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot(&pr.g_star[a], &pr.g_star[b]) - want).abs() < 1e-10);
            }
        }
        assert!((s.sigma - s.singular_values.iter().sum::<f64>() / 3.0).abs() < 1e-15);

        // Normal equations ĜᵀĜ λ = σ Ĝᵀ G* ω.
        let c = &g.columns;
        let ata: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| dot(&c[i], &c[j])));
        let target: Vec<f64> = (0..n)
            .map(|r| s.sigma * (0..3).map(|j| pr.g_star[j][r] * DEFAULT_OMEGA[j]).sum::<f64>())
            .collect();
        let atb: [f64; 3] = std::array::from_fn(|i| dot(&c[i], &target));
        let lam = solve3(ata, atb);
        for (a, b) in s.lambda.iter().zip(lam) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{:?} vs {lam:?}", s.lambda);
        }
    }
}

#[test]
fn procrustes_beats_random_orthogonal_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let g = random_matrix(&mut rng, 3);
        let pr = procrustes(&g);
        let dist = |q: &[Vec<f64>]| -> f64 {
            q.iter()
                .zip(&g.columns)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                .sum()
        };
        let best = dist(&pr.g_star);
        for _ in 0..20_000 {
            let q = orthonormalize((0..3).map(|_| (0..3).map(|_| gaussian(&mut rng)).collect()).collect());
            assert!(dist(&q) >= best - 1e-12);
            let flipped: Vec<Vec<f64>> = q.iter().map(|c| c.iter().map(|x| -x).collect()).collect();
            assert!(dist(&flipped) >= best - 1e-12);
        }
    }
}

#[test]
fn parallel_columns_are_flagged_and_stay_finite() {
    let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
    let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
    let c: Vec<f64> = (0..6).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let g = GradientMatrix::new([a, b, c]).unwrap();
    let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
    assert!(s.rank_deficient);
    assert!(s.lambda.iter().all(|l| l.is_finite()));
}

#[test]
fn too_few_rows_is_rejected() {
    let g = GradientMatrix::new([vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!(solve_multipliers(&g, DEFAULT_OMEGA).is_err());
    assert!(GradientMatrix::new([vec![1.0], vec![f64::NAN], vec![0.0]]).is_err());
}

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", ParamGroup::LowLevel, Tensor::vector(values.to_vec()));
    s
}

fn sgd() -> Optimizer {
    Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr: 0.1,
        ..OptimizerConfig::default()
    })
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    for mut opt in [sgd(), Optimizer::new(OptimizerConfig::default())] {
        let mut st = store(&[1.0, -2.0, 3.0, 0.5]);
        let g = GradientMatrix::new([vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]).unwrap();
        let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
        update_group(&mut st, ParamGroup::LowLevel, &g, &s, &mut opt).unwrap();
        assert_eq!(st.flat_values(ParamGroup::LowLevel), vec![1.0, -2.0, 3.0, 0.5]);
    }
}

#[test]
fn orthonormal_gradients_step_along_weighted_sum() {
    let cols = [vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
    let g = GradientMatrix::new(cols).unwrap();
    let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
    let mut st = store(&[0.0; 4]);
    let mut opt = sgd();
    assert_eq!(update_group(&mut st, ParamGroup::LowLevel, &g, &s, &mut opt).unwrap(), UpdateOutcome::Applied);
    let got = st.flat_values(ParamGroup::LowLevel);
    let want = [-0.06, 0.0, -0.03, -0.01];
    assert!(got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), "{got:?}");
}

#[test]
fn weighted_contributions_are_mutually_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_matrix(&mut rng, 40);
    let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
    let pr = procrustes(&g);
    let parts: Vec<Vec<f64>> = (0..3)
        .map(|j| pr.g_star[j].iter().map(|x| s.sigma * DEFAULT_OMEGA[j] * x).collect())
        .collect();
    for a in 0..3 {
        for b in a + 1..3 {
            let cos = dot(&parts[a], &parts[b]) / (dot(&parts[a], &parts[a]) * dot(&parts[b], &parts[b])).sqrt();
            assert!(cos.abs() < 1e-10);
        }
    }
    let combined = g.combine(&s.lambda);
    let sum: Vec<f64> = (0..40).map(|r| parts.iter().map(|p| p[r]).sum()).collect();
    assert!(combined.iter().zip(&sum).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn non_finite_multipliers_skip_the_update() {
    let g = GradientMatrix::new([vec![1.0; 3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
    let bad = MultiplierSolution {
        lambda: [f64::NAN, 0.0, 0.0],
        sigma: 1.0,
        residual: 0.0,
        target_norm: 0.0,
        singular_values: vec![],
        active: [true, false, false],
        rank_deficient: false,
    };
    let mut st = store(&[1.0, 2.0, 3.0]);
    let out = update_group(&mut st, ParamGroup::LowLevel, &g, &bad, &mut sgd()).unwrap();
    assert_eq!(out, UpdateOutcome::Skipped);
    assert_eq!(st.flat_values(ParamGroup::LowLevel), vec![1.0, 2.0, 3.0]);
}

#[test]
fn adamw_first_step_has_learning_rate_magnitude() {
    let cfg = OptimizerConfig {
        lr: 0.01,
        weight_decay: 0.1,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(cfg);
    let mut p = vec![1.0, -1.0, 0.5];
    let d = [3.0, -0.2, 1e-3];
    opt.step(ParamGroup::HighLevel, &mut p, &d);
    let start = [1.0, -1.0, 0.5];
    for k in 0..3 {
        let decayed = start[k] * (1.0 - 0.01 * 0.1);
        let want = decayed - 0.01 * d[k] / (d[k].abs() + 1e-8);
        assert!((p[k] - want).abs() < 1e-12);
    }
    // Second step with the same direction keeps the normalized magnitude.
    let before = p.clone();
    opt.step(ParamGroup::HighLevel, &mut p, &d);
    let step = before[0] * (1.0 - 0.001) - p[0];
    assert!((step - 0.01).abs() < 1e-6);
}

#[test]
fn clipping_bounds_each_objective_over_all_groups() {
    let mut grads = [
        vec![vec![3.0], vec![4.0]],
        vec![vec![0.3], vec![0.4]],
        vec![vec![0.0], vec![0.0]],
    ];
    let norms = clip_global_norm(&mut grads, 1.0);
    assert_eq!(norms, [5.0, 0.5, 0.0]);
    assert!((grads[0][0][0] - 0.6).abs() < 1e-15 && (grads[0][1][0] - 0.8).abs() < 1e-15);
    assert_eq!(grads[1], vec![vec![0.3], vec![0.4]]);
}

#[test]
fn multiplier_step_updates_every_group() {
    let mut st = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for g in ParamGroup::ALL {
        st.add_uniform(format!("{}.w", g.name()), g, &[6], 1.0, &mut rng);
    }
    let before = st.clone();
    let grads: [Vec<Vec<f64>>; 3] = std::array::from_fn(|o| {
        ParamGroup::ALL
            .iter()
            .map(|&g| {
                if o == 2 && g == ParamGroup::Posterior {
                    vec![0.0; 6]
                } else {
                    (0..6).map(|_| gaussian(&mut rng)).collect()
                }
            })
            .collect()
    });
    let mut opt = Optimizer::new(OptimizerConfig::default());
    let steps = multiplier_step(&mut st, grads, DEFAULT_OMEGA, &mut opt).unwrap();
    assert_eq!(steps.len(), 3);
    for s in &steps {
        assert_eq!(s.outcome, UpdateOutcome::Applied);
        assert!(s.solution.residual <= 1e-8 * s.solution.target_norm);
        assert!(s.column_norms.iter().all(|&n| n <= 1.0 + 1e-12));
        assert_ne!(st.flat_values(s.group), before.flat_values(s.group));
    }
    let post = &steps[ParamGroup::Posterior.index()].solution;
    assert_eq!(post.active, [true, true, false]);
    assert_eq!(post.lambda[2], 0.0);
}

proptest! {
    #[test]
    fn equal_unit_column_norms(seed in 0u64..10_000, n in 3usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_matrix(&mut rng, n);
        let pr = procrustes(&g);
        for c in &pr.g_star {
            prop_assert!((dot(c, c).sqrt() - 1.0).abs() < 1e-10);
        }
        let s = solve_multipliers(&g, DEFAULT_OMEGA).unwrap();
        prop_assert!(s.residual <= 1e-8 * s.target_norm);
    }

    #[test]
    fn multipliers_are_scale_equivariant(seed in 0u64..10_000, k in 0.01f64..100.0) {
        // Scaling Ĝ scales σ by k and leaves λ unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_matrix(&mut rng, 8);
        let gk = GradientMatrix::new(g.columns.each_ref().map(|c| c.iter().map(|x| k * x).collect())).unwrap();
        let (a, b) = (solve_multipliers(&g, DEFAULT_OMEGA).unwrap(), solve_multipliers(&gk, DEFAULT_OMEGA).unwrap());
        prop_assert!((b.sigma - k * a.sigma).abs() <= 1e-10 * b.sigma);
        for (x, y) in a.lambda.iter().zip(b.lambda) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
