use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--samples-per-env",
    "20",
    "--pretrain-envs",
    "0,1",
    "--adapt-envs",
    "100,101",
    "--codeword-lens",
    "16",
    "--seeds",
    "1,2",
    "--pretrain-epochs",
    "1",
    "--adapt-epochs",
    "3",
    "--patience",
    "2",
    "--alphas",
    "0.5,1.0",
    "--counts",
    "8,16",
    "--d-models",
    "16,32",
];

fn lasco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lasco"))
        .args(args)
        .output()
        .expect("spawn lasco")
}

fn tiny(cmd: &[&str], out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend_from_slice(TINY);
    let out = out.to_str().unwrap();
    args.extend_from_slice(&["--out", out]);
    args.extend_from_slice(extra);
    lasco(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        stderr(&o)
    );
    o
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn e_lasco_with_alpha_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(
        &[
            "adapt", "--mode", "e-lasco", "--alpha", "0.3", "--env", "100",
        ],
        dir.path(),
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("alpha"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"suite": {"sead": 3}}"#).unwrap();
    let o = lasco(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sead"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_rejected() {
    let o = lasco(&["pretrain", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(&["sweep-alpha"], dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("--pretrain-first"));
}

#[test]
fn config_file_values_are_used_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("c.json");
    let json = serde_json::json!({
        "suite": {
            "samples_per_env": 20,
            "pretrain_envs": [0, 1],
            "adapt_envs": [100],
            "codeword_lens": [16],
            "seed": 77,
            "pretrain": {"max_epochs": 1, "patience": 1}
        },
        "paths": {"out": out}
    });
    std::fs::write(&cfg, json.to_string()).unwrap();
    ok(lasco(&["gen-data", "--config", cfg.to_str().unwrap()]));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["suite"]["seed"], 77);
    assert_eq!(resolved["suite"]["pretrain"]["max_epochs"], 1);
    assert_eq!(resolved["suite"]["adapt_envs"], serde_json::json!([100]));
    assert!(out.join("data/env0.lcds").exists());
    assert!(out.join("data/env100.lcds").exists());
}

#[test]
fn pretrain_adapt_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(tiny(&["pretrain"], out, &[]));
    assert!(out.join("ckpt/lam-m16.ckpt").exists());
    assert!(out.join("ckpt/sam-m16-d32.ckpt").exists());
    let before = std::fs::read(out.join("ckpt/lam-m16.ckpt")).unwrap();

    ok(tiny(
        &["adapt", "--mode", "e-lasco", "--env", "101"],
        out,
        &[],
    ));
    let pxy = out.join("adapt/e-lasco/101/16/1.ckpt");
    assert!(pxy.exists());
    assert!(out.join("adapt/e-lasco/101/16/2.csv").exists());
    assert!(out.join("adapt/runs.csv").exists());
    assert_eq!(
        std::fs::read(out.join("ckpt/lam-m16.ckpt")).unwrap(),
        before
    );

    let o = ok(tiny(
        &[
            "eval",
            "--mode",
            "e-lasco",
            "--env",
            "101",
            "--pxy-ckpt",
            pxy.to_str().unwrap(),
        ],
        out,
        &[],
    ));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean"));
    assert!(out.join("eval/e-lasco-m16.csv").exists());

    let o = tiny(&["eval", "--mode", "lasco"], out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    ok(tiny(&["eval", "--mode", "pretrained-lam"], out, &[]));

    let o = ok(lasco(&["inspect-ckpt", pxy.to_str().unwrap()]));
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["role"], "proxy");
    assert!(info["meta"]["alpha"].is_number());
    assert!(info["parameters"].as_u64().unwrap() > 0);

    let o = lasco(&["inspect-ckpt", out.join("nope.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn repro_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(tiny(&["repro", "fig6"], d.path(), &["--pretrain-first"]));
    }
    let fa = files_under(&a.path().join("fig6"));
    let fb = files_under(&b.path().join("fig6"));
    assert!(fa.contains_key(Path::new("runs.csv")));
    assert!(fa.contains_key(Path::new("summary.json")));
    assert!(fa.contains_key(Path::new("lasco-a0.50/100/16/1.csv")));
    assert_eq!(fa, fb);
    assert_eq!(
        std::fs::read(a.path().join("ckpt/lam-m16.ckpt")).unwrap(),
        std::fs::read(b.path().join("ckpt/lam-m16.ckpt")).unwrap()
    );
}

#[test]
fn sweeps_and_cdf_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(tiny(&["pretrain"], out, &[]));
    ok(tiny(&["sweep-samples", "--alpha", "0.5"], out, &[]));
    assert!(out
        .join("sweep-samples/lasco-a0.50-n8/100/16/1.csv")
        .exists());
    ok(tiny(&["sweep-size"], out, &[]));
    assert!(out.join("ckpt/sam-m16-d16.ckpt").exists());
    assert!(out.join("sweep-size/e-lasco-d16/101/16/2.csv").exists());
    let runs = out.join("sweep-samples/runs.csv");
    ok(tiny(&["cdf", runs.to_str().unwrap()], out, &[]));
    let cdf = std::fs::read_to_string(out.join("cdf/cdf.csv")).unwrap();
    assert!(cdf.starts_with("label,epoch,fraction,censored_runs"));
    assert!(cdf.contains("finetuned-sam-n8"));
}
