use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aelstm::artifacts::{stamped_hash, RunDir, MANIFEST};
use aelstm::config::{content_hash, RunConfig};

fn aelstm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aelstm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("AELSTM_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = aelstm(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn stages_chain_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let e = ["--epochs", "2"];
    ok(&[&e[..], &["generate"]].concat(), &out);
    assert_eq!(fs::read_dir(out.join("data/episodes")).unwrap().count(), 40);
    ok(&[&e[..], &["train-ae", "--which", "both"]].concat(), &out);
    ok(&[&e[..], &["train-policy", "--attention", "on", "--constraint", "on"]].concat(), &out);
    ok(&[&e[..], &["train-policy", "--attention", "off", "--constraint", "off"]].concat(), &out);
    let table = ok(&[&e[..], &["evaluate", "--models", "I,IV"]].concat(), &out);
    assert!(table.starts_with("model_id,object_set,trials"), "{table}");
    assert_eq!(table.lines().filter(|l| l.starts_with("I,") || l.starts_with("IV,")).count(), 4);

    let config = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(config.policy.train.epochs, 2);
    let results = fs::read_to_string(out.join("eval/results_r0.csv")).unwrap();
    assert_eq!(stamped_hash(&results), Some(config.hash().as_str()));
    assert_eq!(results.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 68);

    assert!(out.join(MANIFEST).is_file());
    let run = RunDir::create(&out, &config.hash()).unwrap();
    let entries = run.manifest().unwrap();
    assert!(entries.iter().any(|e| e.path == "ae/whole.ckpt"));
    assert!(entries.iter().any(|e| e.path == "policy/model_I_r0.ckpt"));
    for e in &entries {
        let bytes = fs::read(out.join(&e.path)).unwrap();
        assert_eq!(content_hash(&bytes), e.sha256, "{}", e.path);
        assert_eq!(e.config_hash, config.hash());
    }
    assert!(run.verify().unwrap().is_empty());

    let traces = out.join("eval/traces/r0/I");
    let pca_csv = dir.path().join("pca.csv");
    let said = ok(&["analyze", "pca", "--in", traces.to_str().unwrap(), "--out", pca_csv.to_str().unwrap()], &out);
    assert!(said.contains("5-NN accuracy"), "{said}");
    let pca = fs::read_to_string(&pca_csv).unwrap();
    assert!(pca.starts_with("trial,"));
    let att_csv = dir.path().join("att.csv");
    ok(&["analyze", "attention", "--in", traces.to_str().unwrap(), "--out", att_csv.to_str().unwrap()], &out);
    assert!(fs::read_to_string(&att_csv).unwrap().lines().count() > 1);
    let tab_csv = dir.path().join("table.csv");
    let eval_dir = out.join("eval");
    let again = ok(&["analyze", "table", "--in", eval_dir.to_str().unwrap(), "--out", tab_csv.to_str().unwrap()], &out);
    assert_eq!(again, table.lines().take_while(|l| !l.starts_with("run directory")).map(|l| format!("{l}\n")).collect::<String>());
}

#[test]
fn model_ii_writes_hidden_traces_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let e = ["--epochs", "1"];
    ok(&[&e[..], &["generate"]].concat(), &out);
    let before = fs::read_to_string(out.join("config.toml")).unwrap();
    ok(&[&e[..], &["train-ae"]].concat(), &out);
    ok(&[&e[..], &["train-policy", "--attention", "off", "--gamma", "0.3"]].concat(), &out);
    ok(&[&e[..], &["evaluate"]].concat(), &out);
    let traces = out.join("eval/traces/r0/II");
    let names: Vec<String> =
        fs::read_dir(&traces).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.len(), 68);
    assert!(names.iter().all(|n| n.ends_with("_hidden.csv")));
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), before);
}

#[test]
fn missing_upstream_artifact_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    for (args, stage) in [
        (&["train-ae"][..], "generate"),
        (&["train-policy"][..], "train-ae"),
        (&["evaluate"][..], "train-policy"),
    ] {
        let o = aelstm(args, &out);
        assert!(!o.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.starts_with("error:") && err.contains(stage), "{args:?}: {err}");
    }
}

#[test]
fn show_config_round_trips_and_flags_apply() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["show-config", "--seed", "7"], dir.path());
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(RunConfig { seed: 0, ..cfg }, RunConfig::default());

    let paper = RunConfig::from_toml(&ok(&["show-config", "--paper-scale"], dir.path())).unwrap();
    assert_eq!(paper, RunConfig::paper_scale());

    let path = dir.path().join("c.toml");
    fs::write(&path, "seed = 3\n[policy]\nhidden_size = 16\n").unwrap();
    let from_file = RunConfig::from_toml(&ok(&["show-config", "--config", path.to_str().unwrap()], dir.path())).unwrap();
    assert_eq!((from_file.seed, from_file.policy.hidden_size), (3, 16));

    let clash = aelstm(&["show-config", "--paper-scale", "--config", path.to_str().unwrap()], dir.path());
    assert!(!clash.status.success());
    fs::write(&path, "[policy]\nhidden = 16\n").unwrap();
    let unknown = aelstm(&["show-config", "--config", path.to_str().unwrap()], dir.path());
    assert!(!unknown.status.success());
}

#[test]
fn reproduce_all_writes_every_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    fs::write(&cfg_path, "[eval]\nseeds = [0, 1]\njobs = 2\n").unwrap();
    let out = dir.path().join("run");
    let summary = ok(&["--config", cfg_path.to_str().unwrap(), "--epochs", "1", "reproduce-all"], &out);
    assert!(summary.contains("5-NN accuracy"), "{summary}");
    for rel in ["analysis/table.csv", "analysis/loop_gap.csv", "analysis/attention_I_r1.csv", "analysis/pca_I_r0.csv"] {
        assert!(out.join(rel).is_file(), "{rel}");
    }
    let gaps = fs::read_to_string(out.join("analysis/loop_gap.csv")).unwrap();
    assert_eq!(gaps.lines().filter(|l| !l.starts_with('#')).count(), 1 + 8);
    let table = fs::read_to_string(out.join("analysis/table.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("III,trained,64,")), "{table}");
}
