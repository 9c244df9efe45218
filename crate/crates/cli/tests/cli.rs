//! End-to-end tests driving the dcpv binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcpv_core::cancelable::FeatureVector;
use dcpv_core::features::write_features;
use dcpv_core::rng::SplitMix64;

fn dcpv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcpv"))
        .args(args)
        .output()
        .expect("spawn dcpv")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small deterministic corpus: 6 subjects x 4 samples in R^64.
fn write_corpus(path: &Path) {
    let mut rng = SplitMix64::new(0x70D0);
    let dim = 64usize;
    let scale = 0.15 / (dim as f64).sqrt();
    let mut rows = Vec::new();
    for c in 0..6 {
        let center: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        for s in 0..4 {
            let values: Vec<f64> = center
                .iter()
                .map(|v| v / norm + rng.next_gaussian() * scale)
                .collect();
            rows.push(FeatureVector::new(format!("u{c:02}"), format!("{s}"), values).unwrap());
        }
    }
    write_features(path, &rows).unwrap();
}

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    features: PathBuf,
    store: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let features = root.join("features.csv");
        write_corpus(&features);
        let store = root.join("store.txt");
        Env {
            _dir: dir,
            root,
            features,
            store,
        }
    }

    fn enroll(&self) {
        let out = dcpv(&[
            "enroll",
            "--features",
            self.features.to_str().unwrap(),
            "--k1",
            "12345",
            "--k2",
            "67890",
            "--store",
            self.store.to_str().unwrap(),
            "--mp",
            "48",
            "--r",
            "2",
        ]);
        assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    }
}

#[test]
fn keygen_writes_two_seeds() {
    let env = Env::new();
    let keys = env.root.join("keys.txt");
    let out = dcpv(&["keygen", "--out", keys.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0);
    let text = fs::read_to_string(&keys).unwrap();
    let mut lines = text.lines();
    let k1: u64 = lines
        .next()
        .unwrap()
        .strip_prefix("k1=")
        .unwrap()
        .parse()
        .unwrap();
    let k2: u64 = lines
        .next()
        .unwrap()
        .strip_prefix("k2=")
        .unwrap()
        .parse()
        .unwrap();
    assert_ne!(k1, k2);

    // a second invocation yields fresh material
    let keys2 = env.root.join("keys2.txt");
    assert_eq!(
        exit_code(&dcpv(&["keygen", "--out", keys2.to_str().unwrap()])),
        0
    );
    assert_ne!(text, fs::read_to_string(&keys2).unwrap());
}

#[test]
fn enroll_then_verify_accepts_genuine() {
    let env = Env::new();
    env.enroll();
    let out = dcpv(&[
        "verify",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "12345",
        "--id",
        "u02",
        "--store",
        env.store.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("decision=ACCEPT"), "{text}");
    let distance: f64 = text
        .split("distance=")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(distance < 0.5);
}

#[test]
fn stolen_template_simulation_rejects() {
    let env = Env::new();
    env.enroll();
    // same biometric, different first-level token: distance near 0.5
    let out = dcpv(&[
        "verify",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "99999",
        "--id",
        "u02",
        "--store",
        env.store.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stdout_of(&out).contains("decision=REJECT"));

    // imposter probe under the right token also rejects
    let out = dcpv(&[
        "verify",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "12345",
        "--id",
        "u02",
        "--probe-id",
        "u04",
        "--store",
        env.store.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn threshold_one_accepts_everything() {
    let env = Env::new();
    env.enroll();
    let out = dcpv(&[
        "verify",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "99999",
        "--id",
        "u02",
        "--store",
        env.store.to_str().unwrap(),
        "--threshold",
        "1.0",
    ]);
    assert_eq!(exit_code(&out), 0);
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let env = Env::new();
    env.enroll();
    assert_eq!(exit_code(&dcpv(&["frobnicate"])), 2);
    assert_eq!(exit_code(&dcpv(&["enroll", "--no-such-flag"])), 2);

    // unknown subject
    let out = dcpv(&[
        "verify",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "1",
        "--id",
        "ghost",
        "--store",
        env.store.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);

    // duplicate enrollment
    let out = dcpv(&[
        "enroll",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "1",
        "--k2",
        "2",
        "--store",
        env.store.to_str().unwrap(),
        "--mp",
        "48",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("already enrolled"));

    // m_p larger than the feature dimension
    let out = dcpv(&[
        "enroll",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "1",
        "--k2",
        "2",
        "--store",
        env.root.join("s2.txt").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("m_p"));
}

#[test]
fn io_errors_exit_3() {
    let env = Env::new();
    env.enroll();
    let out = dcpv(&[
        "verify",
        "--features",
        env.root.join("missing.csv").to_str().unwrap(),
        "--k1",
        "1",
        "--id",
        "u02",
        "--store",
        env.store.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn weak_intervals_need_force() {
    let env = Env::new();
    let refused = dcpv(&[
        "enroll",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "1",
        "--k2",
        "2",
        "--store",
        env.store.to_str().unwrap(),
        "--mp",
        "48",
        "--p",
        "0,0,1",
    ]);
    assert_eq!(exit_code(&refused), 2);
    assert!(stderr_of(&refused).contains("not reversal-hard"));

    let forced = dcpv(&[
        "enroll",
        "--features",
        env.features.to_str().unwrap(),
        "--k1",
        "1",
        "--k2",
        "2",
        "--store",
        env.store.to_str().unwrap(),
        "--mp",
        "48",
        "--p",
        "0,0,1",
        "--force",
    ]);
    assert_eq!(exit_code(&forced), 0, "{}", stderr_of(&forced));
}

#[test]
fn enrollment_is_byte_deterministic() {
    let env = Env::new();
    env.enroll();
    let env2 = Env::new();
    env2.enroll();
    assert_eq!(
        fs::read(&env.store).unwrap(),
        fs::read(&env2.store).unwrap()
    );
}

#[test]
fn analyze_reports_hardness() {
    let env = Env::new();
    let report = env.root.join("hardness.txt");
    let out = dcpv(&[
        "analyze",
        "--K",
        "3",
        "--P",
        "0.8,0.1,0.1",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("classification=Hard"));
    assert!(text.contains("condition_value=0.4"));

    let easy = dcpv(&["analyze", "--K", "3", "--P", "0,0,1"]);
    assert!(stdout_of(&easy).contains("classification=Easy"));

    // K mismatch with P length
    assert_eq!(
        exit_code(&dcpv(&["analyze", "--K", "4", "--P", "0.8,0.1,0.1"])),
        2
    );
}

#[test]
fn attack_writes_report() {
    let env = Env::new();
    env.enroll();
    let report = env.root.join("attack.txt");
    let out = dcpv(&[
        "attack",
        "--store",
        env.store.to_str().unwrap(),
        "--id",
        "u01",
        "--iters",
        "200",
        "--restarts",
        "4",
        "--seed",
        "9",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let text = fs::read_to_string(&report).unwrap();
    let candidate = text
        .lines()
        .find_map(|l| l.strip_prefix("candidate="))
        .unwrap();
    assert_eq!(candidate.len(), 48);
    assert!(candidate.chars().all(|c| c == '0' || c == '1'));

    // two runs with the same seed are identical
    let report2 = env.root.join("attack2.txt");
    let out2 = dcpv(&[
        "attack",
        "--store",
        env.store.to_str().unwrap(),
        "--id",
        "u01",
        "--iters",
        "200",
        "--restarts",
        "4",
        "--seed",
        "9",
        "--out",
        report2.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out2), 0);
    assert_eq!(
        fs::read_to_string(&report).unwrap(),
        fs::read_to_string(&report2).unwrap()
    );
}

#[test]
fn evaluate_emits_deterministic_artifacts() {
    let env = Env::new();
    let run = |dir: &Path, mode: &str| {
        let out = dcpv(&[
            "evaluate",
            "--features",
            env.features.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            mode,
            "--seed",
            "7",
            "--mp",
            "48",
            "--r",
            "2",
        ]);
        assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    };

    let a = env.root.join("eval-a");
    let b = env.root.join("eval-b");
    run(&a, "--shared-key");
    run(&b, "--shared-key");
    for name in ["roc.csv", "dist.csv", "summary.txt"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }

    let summary = fs::read_to_string(a.join("summary.txt")).unwrap();
    for key in [
        "eer_percent=",
        "eer_threshold=",
        "genuine_mean=",
        "imposter_std=",
        "d_sys=",
    ] {
        assert!(summary.contains(key), "summary missing {key}:\n{summary}");
    }
    let roc = fs::read_to_string(a.join("roc.csv")).unwrap();
    assert!(roc.starts_with("far,gar\n"));
    let dist = fs::read_to_string(a.join("dist.csv")).unwrap();
    assert!(dist.starts_with("label,score\n"));
    assert!(dist.contains("genuine,"));
    assert!(dist.contains("imposter,"));

    // per-user mode completes on the same file
    let c = env.root.join("eval-c");
    run(&c, "--per-user-key");
    assert!(fs::read_to_string(c.join("summary.txt"))
        .unwrap()
        .contains("mode=per-user-key"));
}

#[test]
fn unlink_emits_curve_and_global_measure() {
    let env = Env::new();
    let dir = env.root.join("unlink");
    let out = dcpv(&[
        "unlink",
        "--features",
        env.features.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "11",
        "--mp",
        "32",
        "--r",
        "2",
        "--bins",
        "10",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let summary = fs::read_to_string(dir.join("summary.txt")).unwrap();
    let d_sys: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("d_sys="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&d_sys));
    let csv = fs::read_to_string(dir.join("unlink.csv")).unwrap();
    assert!(csv.starts_with("score,d_local\n"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn extract_builds_loadable_features() {
    let env = Env::new();
    // two ridge images at different orientations, named <id>_<sample>.pgm
    for (name, phi) in [("subjA_0", 0.0f64), ("subjA_1", 0.0), ("subjB_0", 1.2)] {
        let size = 64usize;
        let mut raster = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let across = -(x as f64) * phi.sin() + (y as f64) * phi.cos();
                let c = (2.0 * std::f64::consts::PI * (across - 8.0) / 16.0).cos();
                let v = 210.0 - 170.0 * c.max(0.0).powi(8);
                raster.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        let mut pgm = format!("P5\n{size} {size}\n255\n").into_bytes();
        pgm.extend_from_slice(&raster);
        fs::write(env.root.join(format!("{name}.pgm")), pgm).unwrap();
    }

    let out_csv = env.root.join("extracted.csv");
    let out = dcpv(&[
        "extract",
        "--out",
        out_csv.to_str().unwrap(),
        "--n-theta",
        "4",
        "--kernel-size",
        "17",
        "--grid",
        "4",
        env.root.join("subjA_0.pgm").to_str().unwrap(),
        env.root.join("subjA_1.pgm").to_str().unwrap(),
        env.root.join("subjB_0.pgm").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));

    let rows = dcpv_core::features::load_features(&out_csv, Some(4 * 4 * 4)).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].subject_id, "subjA");
    assert_eq!(rows[0].sample_id, "0");
    assert_eq!(rows[1].sample_id, "1");
    assert_eq!(rows[2].subject_id, "subjB");
    // identical inputs give identical features
    assert_eq!(rows[0].values(), rows[1].values());
}
