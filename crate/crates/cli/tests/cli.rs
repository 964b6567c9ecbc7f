use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lcfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcfl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LCFL_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ARTIFACTS: [&str; 4] = ["metrics.csv", "ledger.csv", "records.jsonl", "summary.txt"];

#[test]
fn hom_d_preset_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("hom-D");
    let o = lcfl(
        &[
            "run",
            "hom-D",
            "--repeats",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ARTIFACTS {
        assert!(out.join(f).is_file(), "{f}");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("transmissions = 21"), "{summary}");
    let header = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,transmissions,client_id,test_accuracy,margin_loss\n"));
}

#[test]
fn het_b_preset_mixes_model_families() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("het-B");
    let o = lcfl(
        &[
            "run",
            "het-B",
            "--repeats",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("n_clients = 8"));
    assert!(summary.contains("transmissions = 24"));
}

#[test]
fn client_count_mismatch_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"name = "broken"
algorithm = "lcfl"

[dataset]
kind = "blobs"
n_per_class = 10
n_classes = 3
dim = 2

[partition]
n_clients = 3
classes_per_client = [1, 2]

[clients]
models = ["logreg", "logreg"]
generators = ["gmm", "gmm", "gmm"]
"#;
    let path = tmp.path().join("broken.toml");
    fs::write(&path, cfg).unwrap();
    let out = tmp.path().join("out");
    let o = lcfl(
        &[
            "run",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("broken.toml:15:"), "{err}");
    assert!(!out.exists());
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn unknown_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lcfl(&["run", "no-such-thing"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"name = "missing-data"
algorithm = "lcfl"

[dataset]
kind = "csv"
path = "does-not-exist.csv"
n_classes = 2

[partition]
n_clients = 1
classes_per_client = [2, 2]

[clients]
models = ["logreg"]
generators = ["gmm"]
"#;
    let path = tmp.path().join("c.toml");
    fs::write(&path, cfg).unwrap();
    let o = lcfl(&["run", path.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn compare_lcfl_against_fedavg() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for p in ["hom-A", "hom-A-fedavg"] {
        let out = root.join(p);
        let o = lcfl(
            &["run", p, "--repeats", "3", "--out", out.to_str().unwrap()],
            root,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = lcfl(&["compare", "hom-A", "hom-A-fedavg"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().contains("ratio"));
    assert!(table.contains("lcfl") && table.contains("fedavg"));
    assert!(table.contains("85.714"), "{table}");
    assert!(table.contains('±'), "{table}");

    let o = lcfl(
        &["compare", "hom-A", "hom-A-fedavg", "--format", "csv"],
        root,
    );
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 3);
    let fed = csv.lines().nth(2).unwrap();
    assert!(fed.starts_with("hom-A-fedavg,fedavg,3,"), "{fed}");
}

#[test]
fn compare_rejects_single_and_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lcfl(&["compare", "a"], tmp.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("at least 2"));
    let o = lcfl(&["compare", "a", "b"], tmp.path());
    let err = stderr(&o);
    assert!(
        err.contains("a/summary.txt") && err.contains("b/summary.txt"),
        "{err}"
    );
}

#[test]
fn out_root_env_sets_default_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_lcfl"))
        .args(["run", "hom-A", "--repeats", "1"])
        .current_dir(tmp.path())
        .env("LCFL_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("hom-A").join("summary.txt").is_file());
}

#[test]
fn presets_list_and_show() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lcfl(&["presets", "list"], tmp.path());
    let list = stdout(&o);
    for p in ["hom-A", "hom-D", "het-B", "noniid"] {
        assert!(list.lines().any(|l| l.starts_with(p)), "{p}");
    }
    let o = lcfl(&["presets", "show", "het-B"], tmp.path());
    assert!(stdout(&o).contains("name = \"het-B\""));
}
