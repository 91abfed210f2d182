use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use equiflow::export::{sun_log_q, trapezoid};
use equiflow::flow::FlowConfig;
use equiflow::linalg::{det, CMatrix, Complex};
use equiflow::potentials::{init_params, random_params, serialize_params, Arch};
use equiflow::sun::weyl_quadrature;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equiflow")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn write_checkpoint(dir: &Path, name: &str, model: &equiflow::potentials::Model) -> String {
    let p = dir.join(name);
    fs::write(&p, serialize_params(model)).unwrap();
    p.to_str().unwrap().to_string()
}

fn ppm_dims(path: &Path) -> (usize, usize) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..20]).to_string();
    let mut it = text.split_whitespace();
    assert_eq!(it.next(), Some("P6"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let h: usize = it.next().unwrap().parse().unwrap();
    (w, h)
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["train", "--preset", "nope"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["grid"])), 2);
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nmanifold = su2\ntoy_set = 3\nbatch = 8\niterations = 4\nlr_milestones = 2\n").unwrap();
    let metrics = |sub: &str| {
        let out = dir.path().join(sub).join("nested");
        let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["final.ckpt", "best.ckpt", "metrics.csv"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let (header, rows) = read_csv(&out.join("metrics.csv"));
        assert_eq!(header, ["iter", "loss", "grad_norm", "lr", "seconds"]);
        assert_eq!(rows.len(), 4);
        assert!((rows[3][3] - 0.001).abs() < 1e-15);
        rows.into_iter().map(|r| r[..4].to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(metrics("a"), metrics("b"));
}

#[test]
fn identity_su2_grid_is_haar_marginal() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "id.ckpt", &init_params(&Arch::deepset(2), 0));
    let out = dir.path().join("grid");
    let o = run(&["grid", "--checkpoint", &ck, "--out", out.to_str().unwrap(), "--resolution", "401"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("grid.csv"));
    assert_eq!(header, ["theta", "model_density", "target_density"]);
    assert_eq!(rows.len(), 401);
    assert!((rows[0][0] + PI).abs() < 1e-15 && (rows[400][0] - PI).abs() < 1e-15);
    for r in &rows {
        assert!((r[1] - r[0].sin().powi(2) / PI).abs() <= 1e-3);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    for col in [1, 2] {
        let ys: Vec<f64> = rows.iter().map(|r| r[col]).collect();
        assert!((trapezoid(&xs, &ys) - 1.0).abs() <= 1e-2);
    }
    assert_eq!(ppm_dims(&out.join("grid.ppm")), (401, 50));
}

#[test]
fn sphere_and_su3_grids() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "s.ckpt", &random_params(&Arch::zmlp(), 4));
    let out = dir.path().join("s");
    let o = run(&["grid", "--checkpoint", &ck, "--out", out.to_str().unwrap(), "--resolution", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("grid.csv"));
    assert_eq!(header, ["lat", "lon", "model_density"]);
    let cell = (PI / 64.0) * (2.0 * PI / 64.0);
    let mass: f64 = rows.iter().map(|r| r[2] * r[0].to_radians().cos() * cell).sum();
    assert!((mass - 1.0).abs() <= 1e-2, "{mass}");
    assert_eq!(ppm_dims(&out.join("grid.ppm")), (64, 64));

    let ck3 = write_checkpoint(dir.path(), "u3.ckpt", &random_params(&Arch::deepset(3), 4));
    let out3 = dir.path().join("u3");
    let o = run(&["grid", "--checkpoint", &ck3, "--out", out3.to_str().unwrap(), "--resolution", "48"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out3.join("grid.csv"));
    assert_eq!(header, ["theta1", "theta2", "model_density"]);
    assert_eq!(rows.len(), 48 * 48);
    let mass: f64 = rows.iter().map(|r| r[2]).sum::<f64>() * (2.0 * PI / 48.0).powi(2);
    assert!((mass - 1.0).abs() <= 1e-2, "{mass}");
    assert_eq!(ppm_dims(&out3.join("grid.ppm")), (48, 48));
}

#[test]
fn grid_rejects_mismatched_manifold() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "s.ckpt", &init_params(&Arch::zmlp(), 0));
    let o = run(&["grid", "--checkpoint", &ck, "--preset", "su2-set3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn samples_are_special_unitary_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "u3.ckpt", &random_params(&Arch::deepset(3), 2));
    let sample = |sub: &str| {
        let out = dir.path().join(sub);
        let o = run(&["sample", "--checkpoint", &ck, "--out", out.to_str().unwrap(), "--count", "50", "--seed", "9"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("samples.csv")).unwrap()
    };
    let a = sample("a");
    assert_eq!(a, sample("b"));
    let (header, rows) = read_csv(&dir.path().join("a").join("samples.csv"));
    assert_eq!(header.len(), 19);
    assert_eq!(header.last().unwrap(), "log_q");
    assert_eq!(rows.len(), 50);
    for r in rows {
        let u = CMatrix::from_fn(3, |i, j| Complex::new(r[2 * (3 * i + j)], r[2 * (3 * i + j) + 1]));
        let g = u.adjoint().dot(&u);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - Complex::new(e, 0.0)).abs() < 1e-10);
            }
        }
        assert!((det(&u) - Complex::new(1.0, 0.0)).abs() < 1e-10);
    }
}

#[test]
fn sample_log_ratio_matches_quadrature_kl() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_params(&Arch::deepset(2), 3);
    let ck = write_checkpoint(dir.path(), "u2.ckpt", &model);
    let out = dir.path().join("s");
    let o = run(&["sample", "--checkpoint", &ck, "--out", out.to_str().unwrap(), "--count", "10000", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out.join("samples.csv"));
    // Set 3 target: (9/2) Re tr U.
    let vals: Vec<f64> = rows.iter().map(|r| 4.5 * (r[0] + r[6]) - r[8]).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();

    let model = Arc::new(model);
    let flow = FlowConfig::default();
    let exact = weyl_quadrature(2, 1024, |a| {
        let lq = sun_log_q(&model, a, &flow).unwrap();
        lq.exp() * (4.5 * (2.0 * a[0].cos()) - lq)
    })
    .unwrap();
    assert!((mean - exact).abs() <= 3.0 * se, "mean {mean} exact {exact} se {se}");
}

#[test]
fn identity_interval_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path(), "s.ckpt", &init_params(&Arch::zmlp(), 0));
    let out = dir.path().join("i");
    let o = run(&["interval", "--checkpoint", &ck, "--out", out.to_str().unwrap(), "--resolution", "201"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("interval.csv"));
    assert_eq!(header, ["z", "density"]);
    assert_eq!(rows.len(), 201);
    for r in &rows {
        assert!((r[1] - 0.5).abs() <= 1e-3);
    }
    let u2 = write_checkpoint(dir.path(), "u2.ckpt", &init_params(&Arch::deepset(2), 0));
    assert_eq!(code(&run(&["interval", "--checkpoint", &u2, "--out", out.to_str().unwrap()])), 2);
}

#[test]
fn haar_suite_passes() {
    let o = run(&["check", "haar"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() == 2);
}
