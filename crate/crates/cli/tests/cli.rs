use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &[&str] = &[
    "--set", "n_train_ids=8",
    "--set", "n_test_ids=4",
    "--set", "images_per_id=2",
    "--set", "persons=2",
    "--set", "epochs=1",
];

fn lingrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lingrid"))
        .args(args)
        .env_remove("LINGRID_SEED")
        .env_remove("LINGRID_CONFIG")
        .output()
        .expect("binary runs")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) {
    let out = lingrid(&with_small(&["gen-data", "--out", dir.to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn phrases_reads_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_lingrid"))
        .arg("phrases")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"A man in a red shirt.\nHe is walking.\nBlue jeans and a black bag.\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        stdout(&out),
        "a man in a red shirt\tPNP\n\nblue jeans\tJNP\ta black bag\tJNP\n"
    );
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(lingrid(&["--set", "no_such_key=1", "config"]).status.code(), Some(2));
    assert_eq!(lingrid(&["--set", "epochs", "config"]).status.code(), Some(2));
    let ok = lingrid(&["--set", "epochs=3", "config"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("epochs = 3"));
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let again = lingrid(&with_small(&["gen-data", "--out", data.to_str().unwrap()]));
    assert_eq!(again.status.code(), Some(2));
    let forced = lingrid(&with_small(&["gen-data", "--out", data.to_str().unwrap(), "--force"]));
    assert!(forced.status.success());
}

#[test]
fn train_eval_retrieve_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    gen_small(&data);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    let train = lingrid(&with_small(&["train", "--data", d, "--out", r]));
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["model.ckpt", "model.json", "config.txt", "losses.csv", "metrics.csv", "manifest.json", "vocab.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let trained_metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();

    let eval_out = dir.path().join("eval.csv");
    let eval = lingrid(&["eval", "--run", r, "--data", d, "--out", eval_out.to_str().unwrap()]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(std::fs::read_to_string(eval_out).unwrap(), trained_metrics);

    let retrieve = lingrid(&["retrieve", "--run", r, "--data", d, "--text", "a red shirt", "--top", "3"]);
    assert!(retrieve.status.success(), "{}", String::from_utf8_lossy(&retrieve.stderr));
    assert_eq!(stdout(&retrieve).lines().count(), 4);

    let image = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let stem = dir.path().join("heat");
    let heat = lingrid(&[
        "heatmap", "--run", r, "--image", image.to_str().unwrap(), "--phrase", "a red shirt", "--out",
        stem.to_str().unwrap(),
    ]);
    assert!(heat.status.success(), "{}", String::from_utf8_lossy(&heat.stderr));
    assert!(stem.with_extension("pgm").exists() && stem.with_extension("csv").exists());
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let run = dir.path().join("run");
    let mut args = with_small(&["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    args.extend(["--set", "lr=1e30"]);
    assert_eq!(lingrid(&args).status.code(), Some(3));
}

#[test]
fn seed_comes_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_lingrid"))
        .args(["--set", "epochs=1", "config"])
        .env("LINGRID_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("seed = 17"));
}

#[test]
fn gradcheck_passes() {
    let out = lingrid(&["gradcheck", "--batches", "1"]);
    assert!(out.status.success(), "{}", stdout(&out));
}
