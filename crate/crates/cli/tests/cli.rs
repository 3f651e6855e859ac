use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_survey-disagg"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn csv_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

const SHORT: &str = "[mcmc]\niters = 200\nburnin = 50\nthin = 1\n";

fn simulate_into(dir: &Path) {
    let cfg = write_config(dir, SHORT);
    let o = run(&["--config", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(), "simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_writes_fingerprinted_files_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate_into(a.path());
    simulate_into(b.path());
    for f in ["geometry.csv", "hierarchy.csv", "population.csv", "estimates.csv", "truth.csv", "supports.csv", "support_truth.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
        assert!(x.starts_with(b"# fingerprint="), "{f} lacks a fingerprint");
    }
    let est = csv_lines(&a.path().join("estimates.csv"));
    assert_eq!(est[1], "area_id,period_len,end_year,estimate,std_error,raw_sample_size");
    // 100 tracts x 6 five-year windows + 4 regions x 10 years
    assert_eq!(est.len() - 2, 640);
    let truth = csv_lines(&a.path().join("support_truth.csv"));
    assert_eq!(truth.len() - 2, 160);
}

#[test]
fn bad_setting_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[simulation]\nsetting = 5\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap(), "simulate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("setting"));
    let o = run(&["--model", "poisson", "--out-dir", d.path().to_str().unwrap(), "simulate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fit_predict_validate_summarize() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    simulate_into(d.path());
    let cfg = d.path().join("cfg.toml");
    let cfg = cfg.to_str().unwrap();

    // a 200-iteration chain cannot reach the default ESS floor
    let o = run(&["--config", cfg, "--out-dir", dir, "fit"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau2"));
    let summary = csv_lines(&d.path().join("summary.csv"));
    assert_eq!(summary[1], "param,mean,sd,q025,q25,q50,q75,q975,ess,geweke_z");
    // ten yearly trends and six scalar parameters
    assert_eq!(summary.len() - 2, 16);
    assert!(d.path().join("acceptance.csv").exists());

    let draws = d.path().join("draws.bin");
    let o = run(&["--out-dir", dir, "predict", "--draws", draws.to_str().unwrap(), "--supports", d.path().join("supports.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let preds = csv_lines(&d.path().join("predictions.csv"));
    assert_eq!(preds.len() - 2, 160);
    for line in &preds[2..] {
        let f: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(f[0] > 0.0 && f[0] < 1.0 && f[2] >= 0.0 && f[3] <= 1.0);
    }
    let first = std::fs::read(d.path().join("prediction_draws.bin")).unwrap();
    run(&["--out-dir", dir, "predict", "--draws", draws.to_str().unwrap(), "--supports", d.path().join("supports.csv").to_str().unwrap()]);
    assert_eq!(first, std::fs::read(d.path().join("prediction_draws.bin")).unwrap());

    let o = run(&[
        "--out-dir",
        dir,
        "validate",
        "--predictions",
        d.path().join("prediction_draws.bin").to_str().unwrap(),
        "--truth",
        d.path().join("support_truth.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scores = csv_lines(&d.path().join("scores.csv"));
    assert_eq!(scores[1], "model,n,bias,mspe,mape,pi_coverage_50,pi_coverage_95");
    assert!(scores[2].starts_with("proposed,160,"));

    let o = run(&["--out-dir", dir, "summarize", "--draws", draws.to_str().unwrap(), "--target", "pi[T00,2005]", "--reference", "pi[T00,2005]=0.6,0.05"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dens = csv_lines(&d.path().join("density_pi_T00_2005_.csv"));
    assert_eq!(dens[1], "x,kde,reference");
    assert!(dens[2].starts_with("0.0,") && dens.last().unwrap().starts_with("1.0,"));
    assert!(d.path().join("hist_pi_T00_2005_.csv").exists() && d.path().join("trace_pi_T00_2005_.csv").exists());
    let o = run(&["--out-dir", dir, "summarize", "--draws", draws.to_str().unwrap(), "--target", "nothing"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_cells_and_bad_joins_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    simulate_into(d.path());
    let cfg = d.path().join("cfg.toml");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out-dir", dir, "--seed", "9", "fit"]);
    assert!(matches!(code(&o), 0 | 4));
    let draws = d.path().join("draws.bin");
    let bad = d.path().join("bad_supports.csv");
    std::fs::write(&bad, "support_name,tract_id,year,weight\nx,T00,1999,1.0\n").unwrap();
    let o = run(&["--out-dir", dir, "predict", "--draws", draws.to_str().unwrap(), "--supports", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing cells"));

    let o = run(&["--out-dir", dir, "predict", "--draws", draws.to_str().unwrap(), "--supports", d.path().join("supports.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let truth = d.path().join("partial_truth.csv");
    std::fs::write(&truth, "support_name,value\nunknown,0.3\n").unwrap();
    let o = run(&["--out-dir", dir, "validate", "--predictions", d.path().join("prediction_draws.bin").to_str().unwrap(), "--truth", truth.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
