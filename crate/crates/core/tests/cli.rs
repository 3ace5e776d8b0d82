use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "data.synthetic.n_users=80",
    "data.synthetic.n_items=60",
    "data.synthetic.interactions_per_user=30",
    "model.dim=8",
    "model.rep_dim=8",
    "train.epochs=2",
    "train.batch_size=64",
    "train.C=2",
];

fn ifl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifl"))
        .args(args)
        .env("IFL_LOG", "warn")
        .output()
        .expect("spawn ifl")
}

fn small(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string(), "--out".into(), out.display().to_string()];
    for s in SMALL.iter().chain(extra) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ifl(&refs)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn metrics_hash(dir: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    let arr = v.as_array().expect("metrics array");
    let h = arr[0]["config_hash"].as_str().unwrap().to_string();
    assert!(arr.iter().all(|r| r["config_hash"] == h.as_str()));
    h
}

#[test]
fn gen_data_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(&small("gen-data", dir.path(), &[]));
    for f in ["users.csv", "items.csv", "interactions.csv", "ground_truth.json", "config.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn override_equals_file_edit() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&small("train", &a, &["beta=0"]));
    for f in ["history.csv", "checkpoint.json", "mask_report.csv", "metrics.json", "ifl.log"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }

    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    cfg["train"]["beta"] = serde_json::json!(0.0);
    let file = dir.path().join("edited.json");
    std::fs::write(&file, cfg.to_string()).unwrap();
    let b = dir.path().join("b");
    ok(&ifl(&["train", "--config", file.to_str().unwrap(), "--out", b.to_str().unwrap()]));
    assert_eq!(metrics_hash(&a), metrics_hash(&b));
    assert_eq!(
        std::fs::read(a.join("history.csv")).unwrap(),
        std::fs::read(b.join("history.csv")).unwrap()
    );

    let c = dir.path().join("c");
    ok(&small("train", &c, &["beta=0.5"]));
    assert_ne!(metrics_hash(&a), metrics_hash(&c));

    let e = dir.path().join("e");
    ok(&ifl(&["eval", "--run", a.to_str().unwrap(), "--out", e.to_str().unwrap()]));
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(e.join("metrics.json")).unwrap()
    );
}

#[test]
fn sweep_over_envs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = ["sweep", "--out", dir.path().to_str().unwrap(), "--param", "C", "--values", "1,2,4"]
        .map(String::from)
        .to_vec();
    for s in SMALL {
        args.push("--set".into());
        args.push(s.to_string());
    }
    ok(&ifl(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    for m in ["iid_recall", "iid_ndcg", "ood_recall", "ood_ndcg"] {
        let svg = std::fs::read_to_string(dir.path().join(format!("sweep_{m}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"), "{m}");
    }
}

#[test]
fn plot_is_deterministic_and_rejects_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    std::fs::write(&table, "x,a,b\n1,0.1,0.2\n2,0.3,\n4,0.2,0.5\n").unwrap();
    let run = |out: &str, kind: &str| {
        let out = dir.path().join(out);
        ok(&ifl(&["plot", "--table", table.to_str().unwrap(), "--kind", kind, "--out", out.to_str().unwrap()]));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("1.svg", "line"), run("2.svg", "line"));
    assert_eq!(run("3.svg", "bar"), run("4.svg", "bar"));

    std::fs::write(&table, "x,a\n").unwrap();
    let o = ifl(&["plot", "--table", table.to_str().unwrap(), "--kind", "bar", "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("train", dir.path(), &["train.bogus_key=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));

    assert_eq!(ifl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ifl(&["--help"]).status.code(), Some(0));

    // A well-formed configuration whose data directory is missing fails at run time.
    let o = small("train", &dir.path().join("r"), &["data.dir=\"/nonexistent/ifl\""]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
