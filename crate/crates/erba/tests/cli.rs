use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn erba(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erba"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.txt"), "samples = 24\nenzyme_len_min = 8\nenzyme_len_max = 10\n").unwrap();
    fs::write(d.join("run.txt"), "d = 8\nlayers = 1\nlora_rank = 2\nbatch_size = 8\nepochs = 2\n").unwrap();

    stdout(&erba(&["gen-synth", "--spec", "spec.txt", "--seed", "3", "--out", "synth"], d));
    assert!(d.join("synth/regimes.tsv").exists());

    let out = stdout(&erba(&["train", "--config", "run.txt", "--data", "synth/data.tsv", "--out", "m.ckpt"], d));
    assert!(out.starts_with("final_task_loss="));

    let out = stdout(&erba(&["eval", "--ckpt", "m.ckpt", "--data", "synth/data.tsv"], d));
    let keys: Vec<&str> = out.lines().filter_map(|l| l.split('=').next()).collect();
    assert_eq!(keys, ["n", "r2", "pcc", "rmse", "mae"]);
    assert!(out.contains("n=24"));

    stdout(&erba(&["predict", "--ckpt", "m.ckpt", "--data", "synth/data.tsv", "--out", "pred.tsv"], d));
    let table = fs::read_to_string(d.join("pred.tsv")).unwrap();
    assert!(table.lines().next().unwrap().ends_with("\tmu\tlog10_sigma\tyhat"));
    assert_eq!(table.lines().count(), 25);

    // A different configuration only warns.
    fs::write(d.join("other.txt"), "d = 8\nlayers = 1\nlora_rank = 2\nbatch_size = 8\nepochs = 3\n").unwrap();
    let o = erba(&["eval", "--ckpt", "m.ckpt", "--data", "synth/data.tsv", "--config", "other.txt"], d);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
}

#[test]
fn gradcheck_passes_on_the_micro_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.txt"), "d = 8\nd_k = 8\nlayers = 1\nlora_rank = 2\n").unwrap();
    let out = stdout(&erba(&["gradcheck", "--config", "g.txt"], dir.path()));
    for module in ["lora", "mrca", "gmoe", "head", "esda"] {
        assert!(out.lines().any(|l| l.starts_with(module)), "{module} missing from\n{out}");
    }
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.tsv"), "not a header\n").unwrap();
    fs::write(d.join("run.txt"), "d = 8\n").unwrap();
    let o = erba(&["train", "--config", "run.txt", "--data", "bad.tsv", "--out", "m.ckpt"], d);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.tsv:1"));
    let o = erba(&["eval", "--ckpt", "missing.ckpt", "--data", "bad.tsv"], d);
    assert!(!o.status.success());
}
