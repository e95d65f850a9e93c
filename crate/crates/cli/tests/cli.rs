use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mbd_core::pipeline::PipelineConfig;

fn mbd(dir: &Path, args: &[&str]) -> Output {
    let out = dir.join("out");
    let cfg = dir.join("tiny.toml");
    Command::new(env!("CARGO_BIN_EXE_mbd"))
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(args)
        .output()
        .expect("spawn mbd")
}

fn setup(cfg: &PipelineConfig) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), toml::to_string(cfg).unwrap()).unwrap();
    dir
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ARTIFACTS: [&str; 11] = [
    "data.mbds",
    "model.mbdp",
    "reference.mbdp",
    "post.mbdp",
    "cert.mdc.json",
    "plan.json",
    "ledger.json",
    "surgery.json",
    "train_log.json",
    "sweep_epsilon.json",
    "sweep_epsilon.csv",
];

fn run_pipeline(dir: &Path) -> PathBuf {
    let out = dir.join("out");
    ok(&mbd(dir, &["synth"]));
    ok(&mbd(dir, &["train"]));
    ok(&mbd(dir, &["train-ref"]));
    ok(&mbd(dir, &["surgery"]));
    let v = ok(&mbd(
        dir,
        &[
            "verify",
            out.join("cert.mdc.json").to_str().unwrap(),
            out.join("post.mbdp").to_str().unwrap(),
        ],
    ));
    assert!(v.contains("ALL CHECKS PASS"), "{v}");
    ok(&mbd(dir, &["sweep", "--axis", "epsilon", "--values", "0.5,2"]));
    out
}

#[test]
fn pipeline_runs_verifies_and_replays_byte_identically() {
    let cfg = PipelineConfig::tiny();
    let a = setup(&cfg);
    let b = setup(&cfg);
    let out_a = run_pipeline(a.path());
    let out_b = run_pipeline(b.path());
    for name in ARTIFACTS {
        let x = fs::read(out_a.join(name)).unwrap();
        let y = fs::read(out_b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }

    let with_pre = ok(&mbd(
        a.path(),
        &[
            "verify",
            out_a.join("cert.mdc.json").to_str().unwrap(),
            out_a.join("post.mbdp").to_str().unwrap(),
            "--pre",
            out_a.join("model.mbdp").to_str().unwrap(),
        ],
    ));
    assert!(with_pre.contains("CHECK sensitivity PASS"), "{with_pre}");

    let diag = mbd(a.path(), &["diagnose"]);
    assert!(matches!(diag.status.code(), Some(0) | Some(1)), "{}", stderr(&diag));
    let text = String::from_utf8_lossy(&diag.stdout);
    for check in [
        "concentration",
        "loo_oracle",
        "plrv_tail",
        "probe_attack",
        "recon_delta",
        "recon_forgetting",
        "task_utility",
    ] {
        assert!(text.contains(&format!("CHECK {check} ")), "{check} missing:\n{text}");
    }
    assert!(out_a.join("diagnostics.json").is_file());

    // report rebuilds the tables from JSON alone
    for csv in ["sweep_epsilon.csv", "tradeoff.csv", "concentration.csv"] {
        fs::remove_file(out_a.join(csv)).unwrap();
    }
    let r = ok(&mbd(a.path(), &["report"]));
    assert!(r.contains("loss.csv"), "{r}");
    assert_eq!(
        fs::read(out_a.join("sweep_epsilon.csv")).unwrap(),
        fs::read(out_b.join("sweep_epsilon.csv")).unwrap()
    );
    for csv in ["loss.csv", "reference_loss.csv", "tradeoff.csv", "concentration.csv"] {
        assert!(out_a.join(csv).is_file(), "{csv}");
    }
}

#[test]
fn tampered_certificate_exits_one_naming_the_check() {
    let dir = setup(&PipelineConfig::tiny());
    let out = run_pipeline(dir.path());
    let cert_path = out.join("cert.mdc.json");
    let mut cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cert_path).unwrap()).unwrap();
    let sigma = cert["body"]["sigma"].as_f64().unwrap();
    cert["body"]["sigma"] = serde_json::json!(sigma + 1.0);
    let forged = out.join("forged.mdc.json");
    fs::write(&forged, serde_json::to_string_pretty(&cert).unwrap()).unwrap();
    let o = mbd(
        dir.path(),
        &[
            "verify",
            forged.to_str().unwrap(),
            out.join("post.mbdp").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("check failed:"), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("CHECK body_digest FAIL"));

    // the honest certificate against another model's store
    let o = mbd(
        dir.path(),
        &[
            "verify",
            cert_path.to_str().unwrap(),
            out.join("reference.mbdp").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("CHECK post_digest FAIL"));
}

#[test]
fn empty_candidate_yield_still_certifies() {
    let mut cfg = PipelineConfig::tiny();
    cfg.surgery.eta_s = 1e9;
    let dir = setup(&cfg);
    ok(&mbd(dir.path(), &["synth"]));
    ok(&mbd(dir.path(), &["train"]));
    let o = mbd(dir.path(), &["surgery"]);
    ok(&o);
    assert!(stderr(&o).contains("warning: no coordinate passed"), "{}", stderr(&o));
    let out = dir.path().join("out");
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cert.mdc.json")).unwrap()).unwrap();
    assert_eq!(cert["body"]["indices"].as_array().unwrap().len(), 0);
    let v = ok(&mbd(
        dir.path(),
        &[
            "verify",
            out.join("cert.mdc.json").to_str().unwrap(),
            out.join("post.mbdp").to_str().unwrap(),
        ],
    ));
    assert!(v.contains("ALL CHECKS PASS"));
    assert_eq!(
        fs::read(out.join("post.mbdp")).unwrap(),
        fs::read(out.join("model.mbdp")).unwrap()
    );
}

#[test]
fn usage_and_input_errors_exit_two_with_distinct_prefixes() {
    let dir = setup(&PipelineConfig::tiny());
    let o = mbd(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = mbd(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("missing input:"), "{}", stderr(&o));

    ok(&mbd(dir.path(), &["synth"]));
    ok(&mbd(dir.path(), &["train"]));
    let o = mbd(dir.path(), &["sweep", "--axis", "colour", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("usage error:"), "{}", stderr(&o));

    fs::write(dir.path().join("tiny.toml"), "[surgery]\nr = \"lots\"\n").unwrap();
    let o = mbd(dir.path(), &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("config error:"), "{}", stderr(&o));

    fs::write(dir.path().join("tiny.toml"), "[privacy]\nepsilon = -1.0\n").unwrap();
    let o = mbd(dir.path(), &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("config error:"), "{}", stderr(&o));
}

#[test]
fn config_command_prints_annotated_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_mbd"))
        .args(["--profile", "full", "--out", out.to_str().unwrap(), "config", "--write"])
        .output()
        .unwrap();
    let text = ok(&o);
    let parsed: PipelineConfig = toml::from_str(&text).unwrap();
    let mut want = PipelineConfig::full();
    want.output_dir = out.to_string_lossy().into_owned();
    assert_eq!(parsed, want);
    assert!(text.contains("# edit budget"));
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), text);
}
