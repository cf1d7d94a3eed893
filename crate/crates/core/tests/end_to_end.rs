use std::io::Cursor;

use stochinv::bench::{run_benchmark, write_csv};
use stochinv::io::{read_matrix_market, read_ridge_hessian, write_matrix_market_to};
use stochinv::{
    method_rate, run_inverter, BenchmarkSpec, InverterConfig, Matrix, MatrixSource, Method, MethodSpec,
    ProbabilityRule, Termination,
};

#[test]
fn matrix_market_round_trip_feeds_the_inverter() {
    let a = stochinv::io::gen_synthetic(15, 3).unwrap();
    let mut buf = Vec::new();
    write_matrix_market_to(&mut buf, a.data(), true).unwrap();
    let back = read_matrix_market(Cursor::new(buf)).unwrap();
    assert!((back.data() - a.data()).amax() <= 1e-12 * a.data().amax());
    assert!(back.is_spd());

    let mut config = InverterConfig::new(Method::AdaRbfgsCols);
    config.tol = 1e-4;
    let run = run_inverter(&back, &config).unwrap();
    assert_eq!(run.termination, Termination::ToleranceReached);
}

#[test]
fn ridge_hessian_rate_matches_its_spectrum() {
    // AᵀA = diag(1, 4), so with λ = 1 the Hessian is diag(2, 5)
    let a = read_ridge_hessian(Cursor::new("+1 1:1\n-1 2:2\n"), 1.0).unwrap();
    assert_eq!(a.data(), &Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 5.0]));
    let mut config = InverterConfig::new(Method::Bfgs);
    config.q = Some(1);
    config.probabilities = Some(ProbabilityRule::Convenient);
    // p_i ∝ A_ii and the weighted E[Z] is diag(p), so ρ = 1 − λ_min(A)/Tr(A) = 5/7
    let report = method_rate(&a, &config).unwrap();
    assert!((report.rho - 5.0 / 7.0).abs() < 1e-12, "{}", report.rho);
}

#[test]
fn every_sketched_method_makes_progress_on_a_benign_problem() {
    let n = 24;
    let g = stochinv::sketch::gaussian_matrix(n, n, &mut stochinv::sketch::trial_stream(1, 0));
    let spd = stochinv::ProblemMatrix::spd(g.tr_mul(&g) / n as f64 + Matrix::identity(n, n)).unwrap();
    for method in Method::ALL {
        let mut config = InverterConfig::new(method);
        config.max_iters = 3000;
        let run = run_inverter(&spd, &config).unwrap();
        assert_eq!(run.termination, Termination::ToleranceReached, "{method}");
        assert!(run.state.final_residual() <= 1e-2, "{method}");
    }
}

#[test]
fn multi_trial_benchmark_is_reproducible() {
    let mut spec = BenchmarkSpec::new(
        MatrixSource::Synthetic { n: 20, seed: 4 },
        vec![
            MethodSpec::new(Method::Sym),
            MethodSpec::new(Method::AdaRbfgsGauss),
        ],
    );
    spec.trials = 3;
    spec.record_time = false;
    let a = spec.source.load().unwrap();
    let csv = |spec: &BenchmarkSpec| {
        let mut out = Vec::new();
        write_csv(&mut out, &run_benchmark(spec, &a).unwrap()).unwrap();
        String::from_utf8(out).unwrap()
    };
    let first = csv(&spec);
    assert_eq!(first, csv(&spec));
    for label in ["sym#0", "sym#2", "adarbfgs-gauss#1"] {
        assert!(first.contains(&format!("\n{label},0,1e0,")), "{label}");
    }
}
