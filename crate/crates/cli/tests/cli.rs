use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rfsim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rfsim"));
    c.env_remove("RFSIM_THREADS");
    c
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    rfsim()
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = rfsim().arg("run").arg(&path).arg("--validate-only").output().unwrap();
            assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn empty_width_grid_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "kind = \"width_sweep\"\n\n[envelope]\nperiod = 25.0\n\n[grids]\nwidths = []\n",
    );
    let out = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 7"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn schema_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "kind = \"decay\"\n[emitter]\nt1 = \"long\"\n");
    let out = run(&cfg, &dir.path().join("out"), &["--validate-only"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn numerical_guard_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "coarse.toml",
        "kind = \"hbt\"\n[envelope]\nwidth = 0.1\nperiod = 12.5\nextinction_floor = 0.0\n[grids]\nh = 0.05\n",
    );
    let out = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&dir.path().join("nope.toml"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "vis.toml",
        "kind = \"visibility\"\nthreads = 3\n[visibility]\ng2_perp = 0.5\ng2_par = 0.12\n",
    );
    let summary = |out: &Path| fs::read_to_string(out.join("summary.txt")).unwrap();

    assert!(run(&cfg, &dir.path().join("a"), &[]).status.success());
    assert!(summary(&dir.path().join("a")).contains("threads: 3"));

    let out = rfsim()
        .env("RFSIM_THREADS", "2")
        .args(["run", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("b"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(summary(&dir.path().join("b")).contains("threads: 2"));

    let out = rfsim()
        .env("RFSIM_THREADS", "2")
        .args(["run", cfg.to_str().unwrap(), "--threads", "1", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(summary(&dir.path().join("c")).contains("threads: 1"));

    let out = rfsim()
        .env("RFSIM_THREADS", "many")
        .args(["run", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rabi_runs_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("rabi_flat.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--threads", "2"]).status.success());
    assert!(run(&cfg, &c, &["--seed", "99"]).status.success());
    for f in ["rabi.csv", "fit.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("rabi.csv")).unwrap(), fs::read(c.join("rabi.csv")).unwrap());
    let manifest = fs::read_to_string(c.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 99"));
    assert!(manifest.contains("config_sha256 = "));
}

#[test]
fn hbt_outputs_and_threads_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "hbt.toml",
        "kind = \"hbt\"\n[emitter]\nt1 = 0.79\n[envelope]\nwidth = 0.1\nrate_mhz = 80\nextinction_floor = 0.0\n\
         [grids]\nirf_fwhm = 0.15\n[sweep]\naxis = \"width\"\nvalues = [0.1]\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&cfg, &a, &["--threads", "1"]).status.success());
    assert!(run(&cfg, &b, &["--threads", "3"]).status.success());
    for f in ["g2.csv", "peaks.csv", "g2_irf.csv", "sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // a single-value sweep reproduces the direct run
    let peaks = fs::read_to_string(a.join("peaks.csv")).unwrap();
    let g2_zero = peaks
        .lines()
        .find(|l| l.starts_with("0,"))
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .unwrap();
    let sweep = fs::read_to_string(a.join("sweep.csv")).unwrap();
    let row: Vec<&str> = sweep.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "0.1");
    assert_eq!(row[1], g2_zero);
    assert_eq!(row[3], "ok");
}

#[test]
fn sweep_rows_fail_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    // a 20 ns pulse does not fit the 12.5 ns period
    let cfg = write_config(
        dir.path(),
        "sweep.toml",
        "kind = \"width_sweep\"\n[envelope]\nperiod = 12.5\nextinction_floor = 0.0\n[grids]\nwidths = [20.0, 0.05]\n",
    );
    let out = run(&cfg, &dir.path().join("out"), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/width_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t1_ns,width_ns,g2_zero,quasi_cw,status");
    assert!(lines[1].starts_with("0.79,0.05,") && lines[1].ends_with(",ok"), "{}", lines[1]);
    assert!(lines[2].starts_with("0.79,20,,,") && !lines[2].ends_with(",ok"), "{}", lines[2]);
}
