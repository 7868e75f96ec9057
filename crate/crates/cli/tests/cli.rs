use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
train = 2
test = 1

[scene]
duration = 1.0

[model]
sources = 2
latent_dim = 2
iss_blocks = 1
width = 4
decoder_width = 4
layers = 1

[train]
epochs = 1
batch_size = 2
clip_frames = 16

[fastmnmf]
sources = 2
bases = 2
iterations = 3

[bench]
repeats = 1
fastmnmf_iterations = 2
"#;

fn fastfca(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastfca")).args(args).current_dir(dir).output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_flow_simulate_train_separate_evaluate_bench() {
    let dir = setup();
    let d = dir.path();
    let common = ["--config", "tiny.toml", "--seed", "3"];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(common.iter()).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        fastfca(&args.iter().map(String::as_str).collect::<Vec<_>>(), d)
    };

    ok(&run(&["simulate", "--out", "data"]));
    assert!(d.join("data/manifest.jsonl").is_file());
    assert_eq!(std::fs::read_to_string(d.join("data/manifest.jsonl")).unwrap().lines().count(), 3);

    ok(&run(&["train", "--manifest", "data/manifest.jsonl", "--out", "model"]));
    assert!(d.join("model/model.ffca").is_file());
    assert!(d.join("model/metrics.jsonl").is_file());

    ok(&run(&["separate", "--manifest", "data/manifest.jsonl", "--checkpoint", "model/model.ffca", "--out", "sep"]));
    ok(&run(&["separate", "--manifest", "data/manifest.jsonl", "--method", "fastmnmf", "--out", "sep_mnmf"]));

    for est in ["sep", "sep_mnmf"] {
        let out = run(&["evaluate", "--manifest", "data/manifest.jsonl", "--estimates", est, "--out", &format!("{est}_eval")]);
        ok(&out);
        let report = std::fs::read_to_string(d.join(format!("{est}_eval/report.tsv"))).unwrap();
        assert!(report.lines().count() >= 2, "{report}");
    }

    ok(&run(&["bench", "--checkpoint", "model/model.ffca", "--out", "bench"]));
    let bench = std::fs::read_to_string(d.join("bench/bench.tsv")).unwrap();
    assert!(bench.contains("neural_inference") && bench.contains("fastmnmf_2"), "{bench}");
}

#[test]
fn config_errors_exit_2() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nepochz = 1\n").unwrap();
    for args in [
        &["simulate", "--config", "bad.toml"][..],
        &["simulate", "--config", "missing.toml"],
        &["simulate", "--profile", "lab"],
        &["frobnicate"],
    ] {
        let out = fastfca(args, d);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn neural_separation_without_checkpoint_is_a_config_error() {
    let dir = setup();
    let d = dir.path();
    ok(&fastfca(&["simulate", "--config", "tiny.toml", "--out", "data"], d));
    let out = fastfca(&["separate", "--config", "tiny.toml", "--manifest", "data/manifest.jsonl", "--out", "sep"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = setup();
    let d = dir.path();
    let out = fastfca(&["train", "--config", "tiny.toml", "--manifest", "nowhere.jsonl", "--out", "m"], d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(d.join("garbage.ffca"), b"not a checkpoint").unwrap();
    ok(&fastfca(&["simulate", "--config", "tiny.toml", "--out", "data"], d));
    let out = fastfca(
        &["separate", "--config", "tiny.toml", "--manifest", "data/manifest.jsonl", "--checkpoint", "garbage.ffca", "--out", "s"],
        d,
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
