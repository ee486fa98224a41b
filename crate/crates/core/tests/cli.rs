use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn riskctl(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskctl"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn coeffs_baseline_row_count() {
    let tmp = tempfile::tempdir().unwrap();
    let o = riskctl(&["coeffs"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("coeffs.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "t,gamma,phi,k,rho");
    // 256 SDE steps refined 10× → 2561 nodes.
    assert_eq!(lines.len(), 1 + 2561);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
}

#[test]
fn coeffs_degenerate_gamma_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a0.cfg", "A = 0\nn_steps = 32\n");
    let o = riskctl(&["coeffs"], &tmp.path().join("out"), Some(&cfg));
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("out/coeffs.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let gamma: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(gamma, 0.0);
    }
}

#[test]
fn malformed_key_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", "thetaa = 1\n");
    let o = riskctl(&["coeffs"], tmp.path(), Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("thetaa"));
}

#[test]
fn degenerate_stock_volatility_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "flat.cfg", "sigma = 0, 0\n");
    let o = riskctl(&["coeffs"], tmp.path(), Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn coefficient_blow_up_is_reported() {
    // Γ stays bounded for admissible inputs, but an explosive factor over a
    // long horizon overflows the linear equations.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "explode.cfg", "T = 100\nB = 10\nn_steps = 64\n");
    let o = riskctl(&["coeffs"], &tmp.path().join("out"), Some(&cfg));
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blow-up"));
    assert!(!tmp.path().join("out/coeffs.csv").exists());
}

#[test]
fn verify_baseline_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = riskctl(&["verify"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = std::fs::read_to_string(tmp.path().join("relations.txt")).unwrap();
    assert!(!text.contains("FAIL"));
    assert!(text.lines().last().unwrap().ends_with("PASS"));
}

#[test]
fn verify_detects_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let o = riskctl(&["verify", "--fault", "swap-gamma-rho"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(1));
    let text = std::fs::read_to_string(tmp.path().join("relations.txt")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("hjb_along_paths FAIL")));
}

#[test]
fn verify_degenerate_has_zero_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a0.cfg", "A = 0\n");
    let o = riskctl(&["verify"], tmp.path(), Some(&cfg));
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(tmp.path().join("relations.txt")).unwrap();
    for name in ["adjoint_p_equals_v_x", "adjoint_q_equals_v_xx_sigma", "comparison_gamma_le_rho", "comparison_equality", "minimum_condition"] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        assert!(line.contains("PASS violation=0.0000000000000000e0"), "{line}");
    }
}

#[test]
fn quick_experiment_creates_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("does/not/exist");
    let start = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_riskctl"))
        .args(["experiment", "--paths", "1000", "--seed", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    for f in ["coeffs.csv", "relations.txt", "optimality.csv", "estimates.csv", "theta_sweep.csv", "report.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("n_paths = 1000\n") && report.contains("seed = 3\n"));
    let est = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(est.lines().next().unwrap(), "label,mu,n_paths,value,std_error");
}

#[test]
fn hjb_scan_lattice() {
    let tmp = tempfile::tempdir().unwrap();
    let o = riskctl(&["hjb-scan"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("hjb_scan.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "t,x,residual,u_star");
    assert_eq!(lines.len(), 401);
}

#[test]
fn unknown_fault_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = riskctl(&["verify", "--fault", "nope"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(2));
}
