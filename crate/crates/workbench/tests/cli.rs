use std::path::Path;
use std::process::{Command, Output};

use iforge::io::{self, NetFile};
use iforge_core::data::SyntheticDataset;
use iforge_core::theoremlab::CheckReport;

fn iforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iforge")).args(args).env_remove("IFORGE_SEED").output().expect("spawn iforge")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = iforge(args);
    assert_eq!(code(&o), 0, "{args:?}\nstdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&iforge(&["attack", "--bogus"])), 2);
    assert_eq!(code(&iforge(&["no-such-command"])), 2);
    assert_eq!(code(&iforge(&[])), 2);
    assert_eq!(code(&iforge(&["verify"])), 2);
    assert_eq!(code(&iforge(&["verify", "--check", "P10"])), 2);
    assert_eq!(code(&iforge(&["attack", "--method", "multi"])), 2, "missing --net");
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&iforge(&["report", "--input", &s(dir.path())])), 2);
    assert_eq!(code(&iforge(&["--help"])), 0);
    assert_eq!(code(&iforge(&["--version"])), 0);
}

#[test]
fn config_files_are_validated_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"schema": 1, "m": 3, "lambda": 0.25}"#).unwrap();
    let o = ok(&["attack", "--config", &s(&cfg), "--print-config"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["m"], 3);
    assert_eq!(v["lambda"].as_f64(), Some(0.25));
    assert_eq!(v["beta"].as_f64(), Some(1.0));
    let o = ok(&["attack", "--config", &s(&cfg), "--m", "7", "--print-config"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["m"], 7);

    let o = Command::new(env!("CARGO_BIN_EXE_iforge"))
        .args(["verify", "--print-config", "--seed", "5"])
        .env("IFORGE_SEED", "99")
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 99);

    std::fs::write(&cfg, r#"{"schema": 1, "nope": 1}"#).unwrap();
    let o = iforge(&["attack", "--config", &s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown key `nope`"));
    assert!(stderr(&o).contains("\"pair_samples\""), "help lists the expected schema");
    std::fs::write(&cfg, r#"{"m": 1}"#).unwrap();
    assert_eq!(code(&iforge(&["attack", "--config", &s(&cfg)])), 2);
    std::fs::write(&cfg, r#"{"schema": 2}"#).unwrap();
    assert_eq!(code(&iforge(&["attack", "--config", &s(&cfg)])), 2);
    std::fs::write(&cfg, r#"{"schema": 1, "m": "ten"}"#).unwrap();
    assert_eq!(code(&iforge(&["attack", "--config", &s(&cfg)])), 2);
}

#[test]
fn failing_checks_exit_1_and_keep_the_instance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    // a zero tolerance cannot absorb round-off
    let o = iforge(&["verify", "--check", "L1-closed-form", "--trials", "20", "--tolerance", "0", "--out", &s(&out)]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("FAIL L1-closed-form"));
    assert!(out.join("L1-closed-form.failing.json").exists());
    let r: CheckReport = io::read_json(&out.join("L1-closed-form.json")).unwrap();
    assert!(!r.passed);
    assert!(r.failing_instance.is_some());
    let o = iforge(&["report", "--input", &s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path, jobs: &str| {
        let out = s(out);
        let jobs = jobs.to_string();
        move || {
            ok(&["verify", "--check", "P1", "--check", "T2-balance", "--trials", "64", "--jobs", &jobs, "--out", &out]);
        }
    };
    args(&a, "1")();
    args(&b, "4")();
    for f in ["P1.json", "T2-balance.json", "summary.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r: CheckReport = io::read_json(&a.join("P1.json")).unwrap();
    assert_eq!(io::to_json_string(&r).unwrap(), std::fs::read_to_string(a.join("P1.json")).unwrap());
    let o = ok(&["report", "--input", &s(&a)]);
    assert!(stdout(&o).contains("2 checks, 0 failed"));
}

#[test]
fn params_name_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    ok(&["verify", "--check", "T-multi-single", "--param", "same_norm=1", "--trials", "50", "--out", &s(&out)]);
    let r: CheckReport = io::read_json(&out.join("T-multi-single.same_norm=1.json")).unwrap();
    assert_eq!(r.metadata["fairness"], "same-l2-norm");
    assert_eq!(code(&iforge(&["verify", "--check", "T1", "--param", "oops"])), 2);
}

#[test]
fn datasets_and_nets_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| s(&dir.path().join(n));
    ok(&[
        "gen-data",
        "--generator",
        "ring",
        "--classes",
        "3",
        "--samples",
        "60",
        "--noise",
        "0.2",
        "--seed",
        "4",
        "--out",
        &d("a.json"),
    ]);
    ok(&[
        "gen-data",
        "--generator",
        "ring",
        "--classes",
        "3",
        "--samples",
        "60",
        "--noise",
        "0.2",
        "--seed",
        "4",
        "--out",
        &d("b.json"),
    ]);
    assert_eq!(std::fs::read(d("a.json")).unwrap(), std::fs::read(d("b.json")).unwrap());
    assert!(dir.path().join("a.class2.dat").exists());
    let data: SyntheticDataset = io::read_json(Path::new(&d("a.json"))).unwrap();
    assert_eq!(data.len(), 60);

    ok(&["train", "--data", &d("a.json"), "--hidden", "8,8", "--epochs", "3", "--out", &d("net.json")]);
    let net = io::load_net(Path::new(&d("net.json"))).unwrap();
    io::save_net(Path::new(&d("net2.json")), &net).unwrap();
    assert_eq!(std::fs::read(d("net.json")).unwrap(), std::fs::read(d("net2.json")).unwrap());
    let again = io::load_net(Path::new(&d("net2.json"))).unwrap();
    let bits = |p: Vec<f64>| p.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(net.params()), bits(again.params()));
    let doc: NetFile = io::read_json(Path::new(&d("net.json"))).unwrap();
    assert_eq!(doc.dims, vec![2, 8, 8, 3]);
    assert!(std::fs::read_to_string(d("net.json")).unwrap().contains("\"W\""));
}

#[test]
fn adversarial_training_with_zero_radius_is_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| s(&dir.path().join(n));
    ok(&["gen-data", "--samples", "40", "--out", &d("d.json")]);
    ok(&["train", "--data", &d("d.json"), "--epochs", "2", "--out", &d("plain.json")]);
    ok(&["train", "--data", &d("d.json"), "--epochs", "2", "--adv-epsilon", "0", "--out", &d("adv0.json")]);
    assert_eq!(std::fs::read(d("plain.json")).unwrap(), std::fs::read(d("adv0.json")).unwrap());
    ok(&["train", "--data", &d("d.json"), "--epochs", "2", "--adv-epsilon", "0.5", "--out", &d("adv.json")]);
    assert_ne!(std::fs::read(d("plain.json")).unwrap(), std::fs::read(d("adv.json")).unwrap());
}

#[test]
fn attack_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| s(&dir.path().join(n));
    ok(&[
        "gen-data",
        "--generator",
        "grid-texture",
        "--classes",
        "2",
        "--samples",
        "20",
        "--height",
        "4",
        "--width",
        "4",
        "--out",
        &d("g.json"),
    ]);
    ok(&["train", "--data", &d("g.json"), "--hidden", "6", "--epochs", "3", "--out", &d("n.json")]);
    for method in
        ["single", "multi", "pgd", "closed-form", "mi", "mi-normalized", "vr", "pi", "rap", "il", "linbp", "ir"]
    {
        let out = d(method);
        ok(&[
            "attack",
            "--net",
            &d("n.json"),
            "--data",
            &d("g.json"),
            "--method",
            method,
            "--norm",
            "linf",
            "--epsilon",
            "0.2",
            "--out",
            &out,
        ]);
        let dat = std::fs::read_to_string(dir.path().join(method).join("delta.dat")).unwrap();
        assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 16, "{method}");
    }
    assert_eq!(code(&iforge(&["attack", "--net", &d("n.json"), "--data", &d("g.json"), "--method", "warp"])), 2);
    assert_eq!(code(&iforge(&["attack", "--net", &d("n.json"), "--data", &d("g.json"), "--index", "99"])), 2);
    let attack = s(&dir.path().join("multi").join("attack.json"));
    ok(&[
        "analyze",
        "--net",
        &d("n.json"),
        "--data",
        &d("g.json"),
        "--attack",
        &attack,
        "--grid",
        "2",
        "--out",
        &d("an"),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("an/interactions.json")).unwrap()).unwrap();
    assert_eq!(v["n_units"], 4);
    let exact = v["report"]["off_diagonal_sum"].as_f64().unwrap();
    let fast = v["fast_sum"]["off_diagonal"].as_f64().unwrap();
    assert!((exact - fast).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("an/pairwise.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("unit,u0,u1,u2,u3"));
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("an/order_profile.dat").exists());
    // sixteen singleton units are still within the exact limit
    ok(&[
        "analyze",
        "--net",
        &d("n.json"),
        "--data",
        &d("g.json"),
        "--attack",
        &attack,
        "--frozen",
        "--value",
        "margin",
        "--out",
        &d("an2"),
    ]);
}

#[test]
fn correlate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o =
        ok(&["correlate", "--probes", "6", "--cs", "0,0.1,1", "--ps", "2", "--max-steps", "200", "--out", &s(&out)]);
    assert!(stdout(&o).contains("3 cells"));
    let csv = std::fs::read_to_string(out.join("cells.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("p,c,interaction,transfer_utility,reached,samples"));
    assert_eq!(csv.lines().count(), 4);
    let scatter = std::fs::read_to_string(out.join("scatter.dat")).unwrap();
    assert_eq!(scatter.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert!(out.join("source.json").exists() && out.join("target.json").exists());
    // user-supplied nets reuse the same code path
    let data = dir.path().join("d.json");
    ok(&["gen-data", "--dim", "8", "--classes", "3", "--samples", "5", "--out", &s(&data)]);
    ok(&[
        "correlate",
        "--source",
        &s(&out.join("source.json")),
        "--target",
        &s(&out.join("target.json")),
        "--data",
        &s(&data),
        "--cs",
        "0",
        "--ps",
        "2",
        "--max-steps",
        "50",
        "--out",
        &s(&dir.path().join("c2")),
    ]);
    assert_eq!(code(&iforge(&["correlate", "--source", &s(&out.join("source.json"))])), 2);
}
