mod common;

use common::*;
use gridopt::grid_model::Contingency;
use gridopt::ipm_core::*;
use gridopt::kkt_linalg::{ldlt_factor, Inertia, LocalSchurMethod};
use gridopt::opf_problems::{build_opf, build_scopf, NlpProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn iterate(x: Vec<f64>, s: Vec<f64>, lam_g: Vec<f64>, lam_h: Vec<f64>, z_l: Vec<f64>, z_u: Vec<f64>, mu: f64) -> IpmIterate {
    IpmIterate {
        x,
        s,
        lam_g,
        lam_h,
        z_l,
        z_u,
        mu,
    }
}

fn all_blocks_max(r: &KktResiduals) -> f64 {
    [&r.la, &r.lb, &r.lc, &r.ld, &r.le_l, &r.le_u].iter().map(|v| max_abs(v)).fold(0.0, f64::max)
}

fn rel_inf(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn kkt_matrix(sys: &gridopt::kkt_linalg::KktSystem) -> KktMatrix {
    KktMatrix {
        n: sys.n,
        n_g: sys.n_g,
        n_h: sys.n_h,
        matrix: sys.matrix.clone(),
    }
}

fn solve_with(solver: &mut dyn KktSolver, sys: &gridopt::kkt_linalg::KktSystem) -> DVector<f64> {
    solver.factor(&kkt_matrix(sys)).unwrap();
    solver.solve(&sys.rhs).unwrap()
}

#[test]
fn residuals_vanish_at_centered_analytic_point() {
    // min x s.t. x ≥ 1: centered point x = 1 + μ, z = 1.
    let p = linear_above_one();
    let mu = 0.01;
    let it = iterate(vec![1.0 + mu], vec![], vec![], vec![], vec![1.0], vec![0.0], mu);
    let r = kkt_residuals(&p, &it).unwrap();
    assert!(all_blocks_max(&r) <= 1e-10);
}

#[test]
fn residuals_vanish_at_unconstrained_minimum() {
    let mut p = projection_qp();
    p.n_g = 0;
    p.g = |_| Vec::new();
    p.jg = |_| Vec::new();
    let it = iterate(vec![0.0, 0.0], vec![], vec![], vec![], vec![0.0; 2], vec![0.0; 2], 0.0);
    let r = kkt_residuals(&p, &it).unwrap();
    assert_eq!(all_blocks_max(&r), 0.0);
}

#[test]
fn bound_complementarity_scalar() {
    let mut p = linear_above_one();
    p.lo = vec![0.0];
    let it = iterate(vec![2.0], vec![], vec![], vec![], vec![1.0], vec![0.0], 0.5);
    let r = kkt_residuals(&p, &it).unwrap();
    assert!((r.le_l[0] - 1.5).abs() < 1e-15);
    let (dz, _) = recover_dz(&[0.0], &[f64::INFINITY], &it, &r.le_l, &r.le_u, &[0.0]);
    assert!((dz[0] + 0.75).abs() < 1e-15);
}

#[test]
fn recover_dz_zero_at_centered_point() {
    let it = iterate(vec![2.0], vec![], vec![], vec![], vec![0.25], vec![0.0], 0.5);
    let (dz, dzu) = recover_dz(&[0.0], &[f64::INFINITY], &it, &[0.0], &[0.0], &[0.0]);
    assert_eq!(dz[0], 0.0);
    assert_eq!(dzu[0], 0.0);
}

fn mixed_iterate() -> IpmIterate {
    iterate(vec![0.6, 0.7], vec![0.3], vec![0.4], vec![-0.8], vec![0.5, 0.2], vec![0.0, 0.1], 0.05)
}

#[test]
fn symmetrized_step_matches_unsymmetrized_newton_system() {
    let p = mixed_toy();
    let it = mixed_iterate();
    let r = kkt_residuals(&p, &it).unwrap();
    let x = &it.x;
    let h = (p.hess)(x, 1.0, &it.lam_g, &it.lam_h);
    let jg = (p.jg)(x);
    let jh = (p.jh)(x);
    // unknowns: dx0 dx1 ds dlg dlh dzl0 dzl1 dzu0 dzu1
    let mut a = DMatrix::<f64>::zeros(9, 9);
    let mut b = DVector::<f64>::zeros(9);
    for i in 0..2 {
        for j in 0..2 {
            a[(i, j)] = h[i][j];
        }
        a[(i, 3)] = -jg[0][i];
        a[(i, 4)] = -jh[0][i];
        a[(i, 5 + i)] = -1.0;
        a[(i, 7 + i)] = 1.0;
        b[i] = -r.la[i];
    }
    a[(2, 2)] = -it.lam_h[0];
    a[(2, 4)] = -it.s[0];
    b[2] = -r.lb[0];
    a[(3, 0)] = jg[0][0];
    a[(3, 1)] = jg[0][1];
    b[3] = -r.lc[0];
    a[(4, 0)] = -jh[0][0];
    a[(4, 1)] = -jh[0][1];
    a[(4, 2)] = -1.0;
    b[4] = -r.ld[0];
    for i in 0..2 {
        a[(5 + i, i)] = it.z_l[i];
        a[(5 + i, 5 + i)] = x[i] - p.lo[i];
        b[5 + i] = -r.le_l[i];
    }
    a[(7, 7)] = 1.0;
    a[(8, 1)] = -it.z_u[1];
    a[(8, 8)] = p.hi[1] - x[1];
    b[8] = -r.le_u[1];
    let full = a.lu().solve(&b).unwrap();

    let sys = assemble_kkt(&p, &it).unwrap();
    assert_eq!((&sys.matrix - sys.matrix.transpose()).amax(), 0.0);
    let sol = solve_with(&mut DirectFullSolver::new(1e-12), &sys);
    let d = direction_from_solution(&p, &it, &sol).unwrap();
    let got = [d.dx[0], d.dx[1], d.ds[0], d.dlam_g[0], d.dlam_h[0], d.dz_l[0], d.dz_l[1], d.dz_u[0], d.dz_u[1]];
    for k in 0..9 {
        assert!((got[k] - full[k]).abs() <= 1e-10 * (1.0 + full[k].abs()), "entry {k}: {} vs {}", got[k], full[k]);
    }
}

#[test]
fn no_inequalities_gives_two_block_system() {
    let p = projection_qp();
    let it = iterate(vec![0.2, 0.3], vec![], vec![0.1], vec![], vec![0.0; 2], vec![0.0; 2], 0.1);
    let sys = assemble_kkt(&p, &it).unwrap();
    assert_eq!(sys.matrix.nrows(), 3);
    assert_eq!((&sys.matrix - sys.matrix.transpose()).amax(), 0.0);
}

fn case9_after_one_iteration(p: &dyn NlpProblem) -> IpmIterate {
    let opts = IpmOptions {
        max_iter: 1,
        ..IpmOptions::default()
    };
    let r = solve(p, &opts, &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::MaxIter);
    r.iterate
}

fn backends_agree_on(p: &dyn NlpProblem) {
    let it = case9_after_one_iteration(p);
    let sys = assemble_kkt(p, &it).unwrap();
    let reference = solve_with(&mut DirectFullSolver::new(1e-12), &sys);
    let reduced = solve_with(&mut DirectSlackReducedSolver::new(1e-12), &sys);
    assert!(rel_inf(&reduced, &reference) <= 1e-8);
    for method in [LocalSchurMethod::Backsolve, LocalSchurMethod::AugmentedPartial] {
        let mut s = SchurKktSolver::new(p.layout().unwrap(), p.n(), p.n_g(), p.n_h(), method, 2, 1e-12).unwrap();
        let x = solve_with(&mut s, &sys);
        assert!(rel_inf(&x, &reference) <= 1e-8, "{method:?}");
    }
}

#[test]
fn backends_agree_on_case9_opf() {
    backends_agree_on(&build_opf(&load("case9")).unwrap());
}

#[test]
fn backends_agree_on_case9_scopf() {
    let p = build_scopf(&load("case9"), &[Contingency::line(1), Contingency::line(4)]).unwrap();
    backends_agree_on(&p);
}

#[test]
fn fraction_to_boundary_examples() {
    assert!((max_step(&[1.0], &[-2.0], 0.995) - 0.4975).abs() < 1e-15);
    assert_eq!(max_step(&[1.0, 2.0], &[0.5, 3.0], 0.99), 1.0);
    let b = BoundInfo::new(vec![0.0], vec![f64::INFINITY]).unwrap();
    let it = iterate(vec![1.0], vec![2.0], vec![], vec![-1.0], vec![1.0], vec![0.0], 0.1);
    let d = Direction {
        dx: vec![-2.0],
        ds: vec![1.0],
        dlam_g: vec![],
        dlam_h: vec![4.0],
        dz_l: vec![0.0],
        dz_u: vec![0.0],
    };
    let (ap, ad) = fraction_to_boundary(&it, &b, &d, 0.995);
    assert!((ap - 0.4975).abs() < 1e-15);
    assert!((ad - 0.995 / 4.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn fraction_to_boundary_is_maximal(
        v in prop::collection::vec(0.01f64..10.0, 1..8),
        dv in prop::collection::vec(-10.0f64..10.0, 8),
        tau in 0.9f64..0.999,
    ) {
        let dv = &dv[..v.len()];
        let a = max_step(&v, dv, tau);
        prop_assert!(a > 0.0 && a <= 1.0);
        for (x, d) in v.iter().zip(dv) {
            prop_assert!(x + a * d >= (1.0 - tau) * x - 1e-12);
        }
        if a < 1.0 {
            let b = a * 1.0001;
            prop_assert!(v.iter().zip(dv).any(|(x, d)| x + b * d < (1.0 - tau) * x));
        }
    }

    #[test]
    fn filter_never_holds_dominated_entries(pts in prop::collection::vec((0.0f64..10.0, -10.0f64..10.0), 1..30)) {
        let mut f = Filter::new(1e4);
        for (t, p) in pts {
            f.add(t, p);
            prop_assert!(!f.is_acceptable(t, p));
        }
        let e = f.entries();
        for i in 0..e.len() {
            for j in 0..e.len() {
                if i != j {
                    prop_assert!(!(e[i].0 <= e[j].0 && e[i].1 <= e[j].1));
                }
            }
        }
    }
}

#[test]
fn full_newton_step_on_convex_qp_is_accepted_first() {
    let p = projection_qp();
    let r = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::Optimal);
    assert_eq!(r.log[1].alpha, 1.0);
    assert_eq!(r.log[1].backtracks, 0);
    assert!((r.iterate.x[0] - 0.5).abs() < 1e-10 && (r.iterate.x[1] - 0.5).abs() < 1e-10);
}

#[test]
fn dominated_trial_is_rejected_and_halved() {
    let mut f = Filter::new(1e4);
    f.add(0.5, 0.5);
    let params = LineSearchParams::new(1e-4, 10);
    let cur = LsPoint { theta: 1.0, phi: 1.0 };
    let out = filter_line_search(cur, -1.0, 1.0, &mut f, &params, |a| {
        let pt = if a == 1.0 { LsPoint { theta: 0.6, phi: 0.6 } } else { LsPoint { theta: 0.1, phi: -1.0 } };
        Some((pt, a))
    });
    match out {
        LineSearchOutcome::Accepted { alpha, trials, .. } => {
            assert_eq!(alpha, 0.5);
            assert_eq!(trials, 2);
        }
        _ => panic!("expected acceptance"),
    }
}

#[test]
fn ascent_without_violation_needs_restoration() {
    let mut f = Filter::new(1e4);
    let params = LineSearchParams::new(1e-4, 10);
    let cur = LsPoint { theta: 0.0, phi: 0.0 };
    let out = filter_line_search(cur, 1.0, 1.0, &mut f, &params, |a| Some((LsPoint { theta: a * a, phi: a }, ())));
    assert_eq!(out, LineSearchOutcome::RestorationNeeded { trials: 11 });
}

#[test]
fn failed_evaluations_count_as_rejections() {
    let mut f = Filter::new(1e4);
    let params = LineSearchParams::new(1e-4, 10);
    let cur = LsPoint { theta: 1.0, phi: 0.0 };
    let out = filter_line_search(cur, -1.0, 1.0, &mut f, &params, |a| {
        if a > 0.3 {
            None
        } else {
            Some((LsPoint { theta: 0.5, phi: 0.0 }, ()))
        }
    });
    assert!(matches!(out, LineSearchOutcome::Accepted { alpha, .. } if alpha == 0.25));
}

fn inertia_of(m: &DMatrix<f64>) -> Result<Inertia, gridopt::kkt_linalg::LinalgError> {
    ldlt_factor(m, 1e-12).map(|f| f.inertia)
}

fn paper_form(w: &DMatrix<f64>, jg: &DMatrix<f64>, dw: f64, dc: f64) -> DMatrix<f64> {
    let (n, m) = (w.nrows(), jg.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&(-(w + DMatrix::identity(n, n) * dw)));
    k.view_mut((n, 0), (m, n)).copy_from(jg);
    k.view_mut((0, n), (n, m)).copy_from(&jg.transpose());
    for i in 0..m {
        k[(n + i, n + i)] = dc;
    }
    k
}

#[test]
fn correct_inertia_accepts_good_matrix_at_once() {
    let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
    let jg = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let mut sched = DeltaSchedule::from_options(&IpmOptions::default());
    let out = correct_inertia(|dw, dc| paper_form(&w, &jg, dw, dc), inertia_of, 2, 1, 0, &mut sched, 0.1).unwrap();
    assert_eq!((out.delta_w, out.delta_c, out.factorizations), (0.0, 0.0, 1));
}

#[test]
fn correct_inertia_wrong_sign_eigenvalue() {
    let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -0.5]));
    let jg = DMatrix::zeros(0, 2);
    let mut sched = DeltaSchedule::from_options(&IpmOptions::default());
    let out = correct_inertia(|dw, dc| paper_form(&w, &jg, dw, dc), inertia_of, 2, 0, 0, &mut sched, 0.1).unwrap();
    let schedule: Vec<f64> = (0..12).map(|k| 1e-4 * 8f64.powi(k)).collect();
    let first_big = schedule.iter().copied().find(|&d| d >= 0.5).unwrap();
    assert!((out.delta_w - first_big).abs() < 1e-12);
    assert_eq!(out.inertia, Inertia::new(2, 0, 0));
    assert_eq!(sched.last_delta_w, out.delta_w);
}

#[test]
fn correct_inertia_duplicate_constraint_needs_dual_regularization() {
    let w = DMatrix::<f64>::identity(2, 2);
    let jg = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let mut sched = DeltaSchedule::from_options(&IpmOptions::default());
    let out = correct_inertia(|dw, dc| paper_form(&w, &jg, dw, dc), inertia_of, 2, 2, 0, &mut sched, 0.1).unwrap();
    assert!(out.delta_c > 0.0);
    assert_eq!(out.inertia, Inertia::new(2, 2, 0));
}

#[test]
fn curvature_test_examples() {
    let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
    assert!(curvature_test(&w, 0.0, &DVector::from_vec(vec![1.0, 0.0]), 0.1));
    assert!(!curvature_test(&w, 0.0, &DVector::from_vec(vec![0.0, 1.0]), 0.1));
    let eye = DMatrix::<f64>::identity(3, 3);
    assert!(curvature_test(&eye, 0.0, &DVector::from_vec(vec![0.3, -2.0, 5.0]), 0.5));
}

#[test]
fn monotone_barrier_examples() {
    assert!((update_barrier_monotone(0.1, 1e-8, 0.2, 1.5) - 0.02).abs() < 1e-15);
    assert_eq!(update_barrier_monotone(1e-9, 1e-8, 0.2, 1.5), 1e-9);
    assert!((update_barrier_monotone(0.01, 1e-8, 0.2, 1.5) - 0.001).abs() < 1e-15);
}

#[test]
fn mehrotra_examples() {
    assert!((mehrotra_sigma(1.0, 0.1, 100.0) - 1e-3).abs() < 1e-15);
    assert_eq!(mehrotra_sigma(2.0, 2.0, 100.0), 1.0);
    assert_eq!(mehrotra_sigma(1.0, 5.0, 100.0), 100.0);
}

#[test]
fn quality_function_golden_section() {
    let (s, calls) = quality_function_sigma(|s| ((s - 3.0).powi(2), 0.0, 0.0), 0.01, 100.0);
    assert!((s - 3.0).abs() <= (100.0 - 0.01) * 0.618f64.powi(12));
    assert!(calls <= 14);
    let (s, calls) = quality_function_sigma(|s| (s, 0.0, 0.0), 0.01, 100.0);
    assert!(s <= 0.01 + 100.0 * 0.618f64.powi(12));
    assert!(calls <= 14);
}

fn scaled_gradient_toy(slope: f64) -> f64 {
    let mut p = linear_above_one();
    p.n_g = 1;
    p.g = |_| vec![0.0];
    p.jg = |_| vec![vec![0.0]];
    let sc = match slope {
        s if s == 50.0 => {
            p.df = |_| vec![50.0];
            compute_scaling(&p, &[2.0], 100.0).unwrap()
        }
        _ => {
            p.df = |_| vec![1000.0];
            compute_scaling(&p, &[2.0], 100.0).unwrap()
        }
    };
    assert_eq!(sc.s_g, vec![1.0]);
    sc.s_f
}

#[test]
fn scaling_examples() {
    assert_eq!(scaled_gradient_toy(50.0), 1.0);
    assert!((scaled_gradient_toy(1000.0) - 0.1).abs() < 1e-15);
}

#[test]
fn optimality_error_examples() {
    let r = KktResiduals {
        la: vec![0.3, -0.1],
        lb: vec![0.2],
        lc: vec![0.05],
        ld: vec![0.01],
        le_l: vec![0.4, 0.0],
        le_u: vec![0.0, 0.0],
    };
    let small = iterate(vec![1.0, 1.0], vec![1.0], vec![1.0], vec![-1.0], vec![1.0, 1.0], vec![0.0; 2], 0.1);
    assert_eq!(optimality_error(&small, &r, 100.0, true), optimality_error(&small, &r, 100.0, false));
    assert_eq!(dual_scaling(&small, 100.0), (1.0, 1.0));
    let big = iterate(vec![1.0, 1.0], vec![1.0], vec![0.0], vec![0.0], vec![2000.0, 2000.0], vec![0.0; 2], 0.1);
    assert!((dual_scaling(&big, 100.0).1 - 20.0).abs() < 1e-12);
    let zero = KktResiduals {
        la: vec![0.0; 2],
        lb: vec![0.0],
        lc: vec![0.0],
        ld: vec![0.0],
        le_l: vec![0.0; 2],
        le_u: vec![0.0; 2],
    };
    assert_eq!(optimality_error(&big, &zero, 100.0, true), 0.0);
}

#[test]
fn one_dimensional_bound_problem() {
    let r = solve(&square_above_one(), &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::Optimal);
    assert!(r.iterations <= 15);
    assert!((r.iterate.x[0] - 1.0).abs() < 1e-7);
    assert!((r.iterate.z_l[0] - 2.0).abs() < 1e-6);
    assert!((r.objective - 1.0).abs() < 1e-7);
}

#[test]
fn hs071_all_strategies() {
    let p = hs071();
    for barrier in [BarrierStrategy::Monotone, BarrierStrategy::Mehrotra, BarrierStrategy::QualityFunction] {
        for inertia_mode in [InertiaMode::InertiaDetection, InertiaMode::CurvatureTest] {
            for backend in [Backend::DirectFull, Backend::DirectSlackReduced] {
                let opts = IpmOptions {
                    barrier,
                    inertia_mode,
                    ..IpmOptions::default()
                };
                let r = solve(&p, &opts, &backend);
                assert_eq!(r.status, IpmStatus::Optimal, "{barrier:?} {inertia_mode:?} {backend:?}");
                assert!((r.objective - 17.014017289).abs() < 1e-6, "{}", r.objective);
            }
        }
    }
}

#[test]
fn hs071_quasi_newton() {
    let opts = IpmOptions {
        hessian: HessianMode::Lbfgs { history: 6 },
        ..IpmOptions::default()
    };
    let r = solve(&hs071(), &opts, &Backend::DirectFull);
    assert!(r.status.is_success(), "{:?}", r.status);
    assert!((r.objective - 17.014017289).abs() < 1e-5);
}

#[test]
fn infeasible_problem_reports_failure() {
    let mut p = projection_qp();
    p.g = |x| vec![x[0] * x[0] + 1.0];
    p.jg = |x| vec![vec![2.0 * x[0], 0.0]];
    p.hess = |_, s, lg, _| vec![vec![s - 2.0 * lg[0], 0.0], vec![0.0, s]];
    p.x0 = vec![0.5, 0.0];
    let opts = IpmOptions {
        max_iter: 200,
        ..IpmOptions::default()
    };
    let r = solve(&p, &opts, &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::RestorationFailure);
    assert_eq!(r.stats.restorations, 1);
}

#[test]
fn case9_opf_converges() {
    let p = build_opf(&load("case9")).unwrap();
    let r = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::Optimal);
    assert!(r.error <= 1e-6);
    assert!(rel_err(r.objective, 5296.686523629813) < 1e-6);
    let mus: Vec<f64> = r.log.iter().map(|l| l.mu).collect();
    assert!(mus.windows(2).all(|w| w[1] <= w[0]));
    assert!(mus.iter().all(|&m| m >= 1e-9));
    let csv = iteration_csv(&r.log);
    assert!(csv.starts_with("iter,obj,inf_pr,inf_du,mu,alpha,backtracks,delta_w\n"));
    assert_eq!(csv.lines().count(), r.log.len() + 1);
}

#[test]
fn case9_final_point_is_interior() {
    let p = build_opf(&load("case9")).unwrap();
    let r = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    let (lo, hi) = p.bounds();
    let it = &r.iterate;
    for i in 0..p.n() {
        if lo[i] < hi[i] {
            assert!(it.x[i] > lo[i] && it.x[i] < hi[i]);
            if lo[i].is_finite() {
                assert!(it.z_l[i] > 0.0);
            }
        }
    }
    assert!(it.s.iter().all(|&s| s > 0.0));
    assert!(it.lam_h.iter().all(|&l| l < 0.0));
}

#[test]
fn case118_opf_objective() {
    let p = build_opf(&load("case118")).unwrap();
    let r = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::Optimal);
    assert!(rel_err(r.objective, 1.30e5) < 0.005);
    assert!(rel_err(r.objective, 129660.68639034452) < 1e-6);
}

#[test]
fn scopf_backends_reach_same_objective() {
    let p = build_scopf(&load("case9"), &[Contingency::line(1), Contingency::line(4)]).unwrap();
    let reference = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(reference.status, IpmStatus::Optimal);
    for backend in [
        Backend::DirectSlackReduced,
        Backend::SchurArrowhead {
            method: LocalSchurMethod::Backsolve,
            workers: 2,
        },
        Backend::SchurArrowhead {
            method: LocalSchurMethod::AugmentedPartial,
            workers: 3,
        },
    ] {
        let r = solve(&p, &IpmOptions::default(), &backend);
        assert_eq!(r.status, IpmStatus::Optimal, "{backend:?}");
        assert!(rel_err(r.objective, reference.objective) <= 1e-6, "{backend:?}");
    }
}

#[test]
fn objective_scaling_barely_changes_iterations() {
    let p = build_opf(&load("case9")).unwrap();
    let base = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    let scaled = ObjectiveScaled { inner: &p, factor: 1e6 };
    let r = solve(&scaled, &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::Optimal);
    assert!(rel_err(r.objective / 1e6, base.objective) < 1e-6);
    assert!((r.iterations as i64 - base.iterations as i64).abs() <= 2, "{} vs {}", r.iterations, base.iterations);
}

#[test]
fn warm_start_from_own_solution() {
    let p = build_opf(&load("case9")).unwrap();
    let cold = solve(&p, &IpmOptions::default(), &Backend::DirectFull);
    let start = warm_start(&p, &cold.iterate, None, cold.iterate.mu, true).unwrap();
    let r = solve_from(&p, &IpmOptions::default(), &Backend::DirectFull, Some(&start));
    assert_eq!(r.status, IpmStatus::Optimal);
    assert!(r.iterations <= 3, "{}", r.iterations);
}

#[test]
fn warm_start_pushes_bound_values_inside() {
    let p = hs071();
    let prev = iterate(vec![1.0, 5.0, 3.0, 0.5], vec![0.0], vec![1.0], vec![-1.0], vec![1.0; 4], vec![1.0; 4], 0.1);
    let ws = warm_start(&p, &prev, None, 1e-3, false).unwrap();
    assert_eq!(ws.x, vec![1.0 + 0.01, 5.0 - 0.01, 3.0, 1.0 + 0.01]);
    assert!(ws.s[0] > 0.0);
    assert_eq!(ws.lam_g, vec![0.0]);
    assert_eq!(ws.mu, 1e-3);
}

#[test]
fn warm_start_into_grown_scopf() {
    let g = load("case9");
    let small = build_scopf(&g, &[Contingency::line(1)]).unwrap();
    let big = build_scopf(&g, &[Contingency::line(1), Contingency::line(4)]).unwrap();
    let prev = solve(&small, &IpmOptions::default(), &Backend::DirectFull);
    assert_eq!(prev.status, IpmStatus::Optimal);
    let (ls, lb) = (small.layout().unwrap(), big.layout().unwrap());
    let mut map = WarmStartMap {
        x: vec![None; big.n()],
        g: vec![None; big.n_g()],
        h: vec![None; big.n_h()],
    };
    for k in 0..2 {
        for (a, b) in lb.blocks[k].x.iter().zip(&ls.blocks[k].x) {
            map.x[*a] = Some(*b);
        }
        for (a, b) in lb.blocks[k].g_rows.iter().zip(&ls.blocks[k].g_rows) {
            map.g[*a] = Some(*b);
        }
        for (a, b) in lb.blocks[k].h_rows.iter().zip(&ls.blocks[k].h_rows) {
            map.h[*a] = Some(*b);
        }
    }
    for (a, b) in lb.global_x.iter().zip(&ls.global_x) {
        map.x[*a] = Some(*b);
    }
    let ws = warm_start(&big, &prev.iterate, Some(&map), 1e-4, false).unwrap();
    let (lo, hi) = big.bounds();
    let mut default_x = big.initial_point();
    BoundInfo::new(lo, hi).unwrap().push_interior(&mut default_x, 1e-2, 1e-2);
    for &i in &lb.blocks[2].x {
        assert_eq!(ws.x[i], default_x[i]);
    }
    assert!(ws.lam_g.iter().all(|&v| v == 0.0));
    let r = solve_from(&big, &IpmOptions::default(), &Backend::DirectFull, Some(&ws));
    assert_eq!(r.status, IpmStatus::Optimal);

    let bad = WarmStartMap {
        x: vec![Some(10_000); big.n()],
        g: map.g.clone(),
        h: map.h.clone(),
    };
    assert!(matches!(warm_start(&big, &prev.iterate, Some(&bad), 1e-4, false), Err(IpmError::MappingError(_))));
}

#[test]
fn options_parse_and_validate() {
    let mut o = IpmOptions::default();
    o.set("barrier", "mehrotra").unwrap();
    o.set("tol", "1e-7").unwrap();
    o.set("lbfgs_history", "8").unwrap();
    assert_eq!(o.barrier, BarrierStrategy::Mehrotra);
    assert_eq!(o.tol, 1e-7);
    assert_eq!(o.hessian, HessianMode::Lbfgs { history: 8 });
    assert!(o.set("kappa_mu", "1.5").is_err());
    assert!(o.set("nonsense", "1").is_err());
    let bad = IpmOptions {
        theta_mu: 2.5,
        ..IpmOptions::default()
    };
    let r = solve(&square_above_one(), &bad, &Backend::DirectFull);
    assert_eq!(r.status, IpmStatus::StepFailure);
}

#[test]
fn schur_backend_requires_layout() {
    let r = solve(
        &hs071(),
        &IpmOptions::default(),
        &Backend::SchurArrowhead {
            method: LocalSchurMethod::Backsolve,
            workers: 1,
        },
    );
    assert_eq!(r.status, IpmStatus::StepFailure);
    assert!(r.message.is_some());
}

#[test]
fn restoration_recovers_after_rejected_steps() {
    let opts = IpmOptions {
        max_backtracks: 0,
        ..IpmOptions::default()
    };
    let r = solve(&mixed_toy(), &opts, &Backend::DirectFull);
    assert!(r.stats.restorations > 0);
    assert_eq!(r.status, IpmStatus::Optimal);
    let reference = solve(&mixed_toy(), &IpmOptions::default(), &Backend::DirectFull);
    assert!((r.objective - reference.objective).abs() < 1e-8);
}
