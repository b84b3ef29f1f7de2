use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--set",
    "data.n_train=128",
    "--set",
    "data.n_test=100",
    "--set",
    "pretrain.batch=64",
    "--set",
    "pretrain.checkpoint_every=1",
    "--set",
    "probe.epochs=5",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_token-boost"))
        .args(args)
        .env_remove("TOKEN_BOOST_OUT")
        .output()
        .unwrap()
}

fn run_tiny(args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend_from_slice(TINY);
    run(&all)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["probe"]).status.code(), Some(2));
    assert_eq!(run(&["pretrain", "--no-such-flag"]).status.code(), Some(2));
    let o = run(&["pretrain", "--set", "no.such.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[usage]"));
}

#[test]
fn failed_theory_checks_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = run(&["verify-theory", "--samples", "2e4", "--bins", "10", "--alpha-steps", "20", "--no-diagnostics", "--out", &out]);
    assert_eq!(o.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL alpha_recovery_uniform")));
    assert!(dir.path().join("theory_report.json").exists());
}

#[test]
fn inspect_lists_the_manifest_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    ok(&run_tiny(&["pretrain", "--seed", "3", "--out", &out, "--set", "pretrain.epochs=1"]));
    let ckpt = dir.path().join("seed-3/final.tbk");
    let o = run(&["inspect-ckpt", ckpt.to_str().unwrap()]);
    ok(&o);
    let listed: Vec<(String, String)> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let (n, s) = l.split_once('\t').unwrap();
            (n.to_string(), s.replace(' ', ""))
        })
        .collect();
    let m = manifest(dir.path());
    let expected: Vec<(String, String)> = m["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["name"].as_str().unwrap().to_string(), p["shape"].to_string()))
        .collect();
    assert_eq!(listed, expected);
    let counts = &m["param_counts"];
    assert_eq!(
        counts["with_tbm"].as_u64().unwrap(),
        counts["without_tbm"].as_u64().unwrap() + counts["tbm"].as_u64().unwrap()
    );
}

#[test]
fn interrupted_pretraining_resumes_bit_for_bit() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (oa, ob) = (a.path().display().to_string(), b.path().display().to_string());
    let epochs = ["--seed", "1", "--set", "pretrain.epochs=3"];
    ok(&run_tiny(&[&["pretrain", "--out", &oa][..], &epochs].concat()));
    ok(&run_tiny(&[&["pretrain", "--out", &ob, "--halt-after", "1"][..], &epochs].concat()));

    // Without --resume an existing run is left alone.
    let again = run_tiny(&[&["pretrain", "--out", &ob][..], &epochs].concat());
    assert_eq!(again.status.code(), Some(2));

    ok(&run_tiny(&[&["pretrain", "--out", &ob, "--resume"][..], &epochs].concat()));
    let (ta, tb) = (tree(&a.path().join("seed-1")), tree(&b.path().join("seed-1")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs after resume");
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = a.path().display().to_string();
    ok(&run_tiny(&["supervised", "--seed", "2", "--out", &oa, "--set", "supervised.epochs=1"]));
    let m = manifest(a.path());
    assert_eq!(m["status"], "ok");
    let cfg = b.path().join("replay.cfg");
    std::fs::write(&cfg, m["config"].as_str().unwrap()).unwrap();
    let ob = b.path().join("replay");
    ok(&run(&["supervised", "--config", cfg.to_str().unwrap(), "--out", ob.to_str().unwrap()]));
    let replay = manifest(&ob);
    for art in m["artifacts"].as_array().unwrap() {
        let art = art.as_str().unwrap();
        if art.ends_with(".csv") {
            let x = std::fs::read(a.path().join(art)).unwrap();
            let y = std::fs::read(ob.join(art)).unwrap();
            assert!(x == y, "{art} differs on replay");
        }
    }
    assert_eq!(m["artifacts"], replay["artifacts"]);
}

#[test]
fn probe_uses_the_checkpoint_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    ok(&run_tiny(&["pretrain", "--seed", "0", "--out", &out, "--set", "pretrain.epochs=1"]));
    let ckpt = dir.path().join("seed-0/final.tbk");
    ok(&run_tiny(&["probe", "--ckpt", ckpt.to_str().unwrap()]));
    let p: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("seed-0/probe/probe.json")).unwrap()).unwrap();
    assert_eq!(p["hash_before"], p["hash_after"]);
    for k in ["clean_acc", "corrupt_acc"] {
        let v = p[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
}

#[test]
fn gen_data_writes_all_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    ok(&run_tiny(&["gen-data", "--out", &out]));
    for f in ["train.tbk", "test.tbk", "test_corrupted.tbk"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
}
