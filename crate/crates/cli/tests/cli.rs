use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advreg::dataset::{load_cases, load_sims, Manifest};
use advreg::eval::{dsc, Report};
use advreg::training::read_metrics;
use advreg::transform::{best_fit_affine, warp};
use advreg::volume::centroid;

fn advreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advreg")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = advreg(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_single_case_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["phantom", "--out", "a", "--cases", "1", "--seed", "4", "--grid", "16", "--spacing", "4"]);
    ok(t.path(), &["phantom", "--out", "b", "--cases", "1", "--seed", "4", "--grid", "16", "--spacing", "4"]);
    let cases: Vec<_> = fs::read_dir(t.path().join("a/cases")).unwrap().collect();
    assert_eq!(cases.len(), 1);
    for f in ["moving.vol", "fixed.vol", "labels.vol", "landmarks.vol", "truth.vol"] {
        assert!(t.path().join("a/cases/p000").join(f).exists(), "{f}");
    }
    assert_eq!(tree(&t.path().join("a")), tree(&t.path().join("b")));

    let again = advreg(t.path(), &["phantom", "--out", "a", "--cases", "1", "--seed", "5", "--grid", "16", "--spacing", "4"]);
    assert_eq!(code(&again), 3);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(t.path(), &["phantom", "--out", "a", "--cases", "1", "--seed", "5", "--grid", "16", "--spacing", "4", "--force"]);
    assert_ne!(tree(&t.path().join("a")), tree(&t.path().join("b")));
}

#[test]
fn phantom_sixteen_cases_are_consistent() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["phantom", "--out", "d", "--cases", "16", "--grid", "32", "--seed", "2"]);
    let m = Manifest::load(&t.path().join("d/manifest")).unwrap();
    assert_eq!(m.entries.len(), 16);
    let cases = load_cases(&t.path().join("d")).unwrap();
    for c in [&cases[0], &cases[9]] {
        let truth = c.truth.as_ref().unwrap();
        assert!(dsc(&warp(&c.moving_gland, truth), &c.fixed_gland).unwrap() >= 0.98);
        for (ml, fl) in c.moving_landmarks.iter().zip(&c.fixed_landmarks) {
            let a = centroid(&warp(ml, truth)).unwrap();
            let b = centroid(fl).unwrap();
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            assert!(d < 0.5 * c.grid().spacing()[0], "{}: {d}", c.id);
        }
    }
}

#[test]
fn invalid_phantom_grid_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&advreg(t.path(), &["phantom", "--out", "d", "--grid", "0"])), 3);
    assert_eq!(code(&advreg(t.path(), &["phantom", "--out", "d", "--spacing=-1"])), 3);
    assert_eq!(code(&advreg(t.path(), &["phantom", "--out", "d", "--grid", "x"])), 2);
}

#[test]
fn empty_simulation_set_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let o = advreg(t.path(), &["sim", "--out", "s", "--per-patient", "0"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty simulation set"));
}

#[test]
fn default_simulation_set_is_prepared_and_standardized() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["sim", "--out", "s", "--seed", "3"]);
    let (fields, stats) = load_sims(&t.path().join("s")).unwrap();
    assert_eq!(fields.len(), 512);
    let n = fields.len() * fields[0].grid().len();
    for c in 0..3 {
        let vals: Vec<f64> = fields.iter().flat_map(|f| stats.apply(f).components()[c].clone()).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "component {c}: {mean} {var}");
    }
    for f in &fields {
        let a = best_fit_affine(f, None).unwrap().affine;
        let arr = a.to_array();
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let dev = arr.iter().zip(id).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "best-fit deviation {dev}");
    }
}

#[test]
fn register_accepts_only_model_and_image_paths() {
    let t = tempfile::tempdir().unwrap();
    let help = String::from_utf8(ok(t.path(), &["register", "--help"]).stdout).unwrap();
    let mut flags: Vec<&str> =
        help.split_whitespace().filter(|w| w.starts_with("--")).map(|w| w.trim_end_matches(',')).collect();
    flags.sort();
    flags.dedup();
    assert_eq!(flags, ["--fixed", "--force", "--help", "--model", "--moving", "--output"]);
    for bad in ["--labels", "--sims", "--landmarks"] {
        let o = advreg(t.path(), &["register", "--model", "m", "--moving", "a", "--fixed", "b", "--output", "o", bad, "x"]);
        assert_eq!(code(&o), 2);
    }
}

#[test]
fn oracle_evaluation_is_accurate() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["phantom", "--out", "d", "--cases", "3", "--seed", "8"]);
    ok(t.path(), &["evaluate", "--data", "d", "--oracle", "--identity", "--out", "r"]);
    let rep = Report::load(&t.path().join("r/report.json")).unwrap();
    let oracle = rep.records.iter().filter(|r| r.mode == "oracle").collect::<Vec<_>>();
    assert_eq!(oracle.len(), 3);
    assert!(oracle.iter().all(|r| r.tre < 0.5 * 2.0), "{oracle:?}");
    for f in ["report.txt", "tre.svg", "dsc.svg"] {
        assert!(t.path().join("r").join(f).exists());
    }
    assert_eq!(code(&advreg(t.path(), &["evaluate", "--data", "d", "--oracle", "--out", "r"])), 3);
    assert_eq!(code(&advreg(t.path(), &["evaluate", "--data", "d", "--out", "r2"])), 3);
    assert_eq!(code(&advreg(t.path(), &["evaluate", "--data", "d", "--model", "x=missing", "--out", "r3"])), 4);
}

#[test]
fn bending_baseline_trains_registers_and_plots() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(p, &["phantom", "--out", "d", "--cases", "2", "--grid", "16", "--spacing", "4", "--seed", "1"]);
    fs::write(p.join("train.cfg"), "total_steps = 5\ngrid_shape = 16 16 16\ngrid_spacing = 4\nlevels = 3\n").unwrap();
    let args = [
        "train", "--config", "train.cfg", "--data", "d", "--mode", "bending", "--weight", "0.5", "--steps", "2", "--out",
        "run",
    ];
    ok(p, &args);
    let recs = read_metrics(&p.join("run/metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.regularizer.is_some() && r.dis.is_none()));
    let cfg = fs::read_to_string(p.join("run/config")).unwrap();
    assert!(cfg.contains("baseline_weight = 0.5") && cfg.contains("regularizer_mode = bending"));
    assert_eq!(code(&advreg(p, &args)), 3);

    let reg = [
        "register", "--model", "run/checkpoint", "--moving", "d/cases/p000/moving.vol", "--fixed",
        "d/cases/p000/fixed.vol", "--output", "reg",
    ];
    ok(p, &reg);
    for f in ["local.vol", "composed.vol", "warped.vol", "affine.txt"] {
        assert!(p.join("reg").join(f).exists());
    }
    let first = fs::read(p.join("reg/warped.vol")).unwrap();
    assert_eq!(code(&advreg(p, &reg)), 3);
    let mut forced = reg.to_vec();
    forced.push("--force");
    ok(p, &forced);
    assert_eq!(first, fs::read(p.join("reg/warped.vol")).unwrap());

    ok(p, &["evaluate", "--data", "d", "--model", "bending=run/checkpoint", "--identity", "--out", "ev"]);
    ok(p, &["plot", "--metrics", "run/metrics.jsonl", "--report", "ev/report.json", "--out", "plots"]);
    for f in ["metrics.svg", "tre.svg", "dsc.svg"] {
        assert!(fs::read_to_string(p.join("plots").join(f)).unwrap().starts_with("<svg"));
    }
    assert_eq!(code(&advreg(p, &["plot", "--metrics", "run/metrics.jsonl", "--out", "plots"])), 3);
}

#[test]
fn train_config_errors_are_validation_failures() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    assert_eq!(code(&advreg(p, &["train", "--out", "o", "--set", "learning_rate=0"])), 3);
    assert_eq!(code(&advreg(p, &["train", "--out", "o", "--set", "no_such_key=1"])), 3);
    assert_eq!(code(&advreg(p, &["train", "--out", "o", "--mode", "sideways"])), 3);
    assert_eq!(code(&advreg(p, &["train", "--out", "o", "--data", "missing"])), 4);
    assert!(!p.join("o").exists());
}

#[test]
fn preset_files_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for name in ["desk.cfg", "paper.cfg"] {
        let text = fs::read_to_string(root.join(name)).unwrap();
        advreg::training::TrainConfig::parse(&text).unwrap();
    }
}
