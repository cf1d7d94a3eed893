use std::fs;
use std::process::{Command, Output};

fn stochinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochinv"))
        .args(args)
        .env_remove("STOCHINV_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_writes_a_loadable_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mtx");
    let out = stochinv(&["gen", "--n", "12", "--seed", "4", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    let a = stochinv::io::load_matrix_market(&path).unwrap();
    let expected = stochinv::io::gen_synthetic(12, 4).unwrap();
    assert!((a.data() - expected.data()).amax() <= 1e-12 * expected.data().amax());
    assert!(a.is_symmetric());
}

#[test]
fn rate_of_the_two_by_two_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mtx");
    fs::write(
        &path,
        "%%MatrixMarket matrix coordinate real symmetric\n2 2 3\n1 1 2\n2 1 1\n2 2 2\n",
    )
    .unwrap();
    let out = stochinv(&[
        "rate",
        "--matrix",
        path.to_str().unwrap(),
        "--method",
        "kaczmarz",
        "--q",
        "1",
        "--probabilities",
        "convenient",
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(
        stdout(&out).contains("rho          0.900000000000"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn rate_refuses_unsketched_methods() {
    let out = stochinv(&["rate", "--matrix", "identity:3", "--method", "mr"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invert_reaches_tolerance_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let x = dir.path().join("x.mtx");
    let out = stochinv(&[
        "invert",
        "--matrix",
        "synthetic:40:2",
        "--method",
        "adarbfgs-cols",
        "--tol",
        "1e-3",
        "--out-csv",
        csv.to_str().unwrap(),
        "--out",
        x.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("status       converged"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("method,iter,residual,flops,seconds\nadarbfgs-cols,0,1e0,0,"));
    let a = stochinv::io::gen_synthetic(40, 2).unwrap();
    let xm = stochinv::io::load_matrix_market(&x).unwrap();
    let start = stochinv::driver::residual(a.data(), &stochinv::Matrix::identity(40, 40));
    // the written iterate is rounded to the printed precision
    assert!(stochinv::driver::residual(a.data(), xm.data()) <= 1.001e-3 * start);
}

#[test]
fn bench_emits_deterministic_csv_and_an_svg() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let csv = dir.path().join(format!("{name}.csv"));
        let svg = dir.path().join(format!("{name}.svg"));
        let out = stochinv(&[
            "bench",
            "--matrix",
            "synthetic:30:1",
            "--method",
            "adarbfgs-cols",
            "--method",
            "mr",
            "--method",
            "sym",
            "--weight",
            "inv-a",
            "--seed",
            "9",
            "--no-timing",
            "--out-csv",
            csv.to_str().unwrap(),
            "--out-svg",
            svg.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
        (fs::read(csv).unwrap(), fs::read_to_string(svg).unwrap())
    };
    let (first, svg) = run("a");
    let (second, _) = run("b");
    assert_eq!(first, second);
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("polyline"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mtx");
    let out = Command::new(env!("CARGO_BIN_EXE_stochinv"))
        .args(["gen", "--n", "5", "--out", path.to_str().unwrap()])
        .env("STOCHINV_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    let a = stochinv::io::load_matrix_market(&path).unwrap();
    let expected = stochinv::io::gen_synthetic(5, 77).unwrap();
    assert!((a.data() - expected.data()).amax() <= 1e-12 * expected.data().amax());
}

#[test]
fn newton_schulz_from_identity_diverges() {
    let out = stochinv(&[
        "bench",
        "--matrix",
        "synthetic:50",
        "--method",
        "newton-schulz",
        "--init",
        "identity",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).contains("diverged"));
}

#[test]
fn exit_codes() {
    assert_eq!(
        stochinv(&["invert", "--matrix", "/no/such/file.mtx", "--method", "bfgs"])
            .status
            .code(),
        Some(4)
    );
    assert_eq!(
        stochinv(&["invert", "--matrix", "synthetic:1", "--method", "bfgs"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        stochinv(&["invert", "--matrix", "identity:3", "--method", "nope"])
            .status
            .code(),
        Some(2)
    );
    // bfgs needs an SPD matrix
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.mtx");
    fs::write(
        &path,
        "%%MatrixMarket matrix array real general\n2 2\n1\n3\n2\n4\n",
    )
    .unwrap();
    assert_eq!(
        stochinv(&["invert", "--matrix", path.to_str().unwrap(), "--method", "bfgs"])
            .status
            .code(),
        Some(2)
    );
    // a singular matrix fails numerically
    fs::write(
        &path,
        "%%MatrixMarket matrix array real general\n2 2\n1\n1\n1\n1\n",
    )
    .unwrap();
    let out = stochinv(&[
        "invert",
        "--matrix",
        path.to_str().unwrap(),
        "--method",
        "row",
        "--max-iters",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn sparse_input_triggers_a_density_warning() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sparse.mtx");
    let n = 200;
    let mut text = format!("%%MatrixMarket matrix coordinate real symmetric\n{n} {n} {n}\n");
    for i in 1..=n {
        text.push_str(&format!("{i} {i} 2\n"));
    }
    fs::write(&path, text).unwrap();
    let out = stochinv(&[
        "invert",
        "--matrix",
        path.to_str().unwrap(),
        "--method",
        "kaczmarz",
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}
