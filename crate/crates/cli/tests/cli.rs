use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &[&str] = &[
    "--set",
    "train.stage1_epochs=3",
    "--set",
    "train.stage2_epochs=4",
    "--set",
    "train.warmup_epochs=1",
];

fn sckd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sckd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&sckd(&["--help"])), 0);
    assert_eq!(code(&sckd(&["--version"])), 0);
    assert_eq!(code(&sckd(&["frobnicate"])), 1);
}

#[test]
fn train_writes_bundle_and_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write(dir.path(), "exp.toml", "seeds = [0, 1]\n[sckd]\nbeta = 0.25\n");
    let out_arg = format!("output_dir={}", out_dir.display());
    let mut args = vec!["train", "-c", &config, "--set", &out_arg, "--set", "sckd.alpha=0.2"];
    args.extend_from_slice(QUICK);
    let out = sckd(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    assert_eq!(fs::read_to_string(out_dir.join("config.toml")).unwrap(), "seeds = [0, 1]\n[sckd]\nbeta = 0.25\n");
    let resolved = fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("beta = 0.25") && resolved.contains("alpha = 0.2"), "{resolved}");
    for seed in [0, 1] {
        for file in ["metrics.json", "train_log.jsonl", "checkpoint.bin", "status.json"] {
            assert!(out_dir.join(format!("seed_{seed}")).join(file).exists(), "seed_{seed}/{file}");
        }
    }
    assert!(out_dir.join("aggregate.json").exists());

    let emb = dir.path().join("emb.csv");
    let ckpt = out_dir.join("seed_1/checkpoint.bin");
    let out = sckd(&[
        "embed",
        "-c",
        &config,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "1",
        "-o",
        emb.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&emb).unwrap();
    assert!(text.starts_with("sample_id,true_label,predicted_id,f0,"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.toml", "[sckd]\nalhpa = 0.1\n");
    let out = sckd(&["train", "-c", &typo]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("alhpa"), "{}", stderr(&out));

    let bad_value = sckd(&["train", "--set", "sckd.lambda=3"]);
    assert_eq!(code(&bad_value), 1);
    assert!(stderr(&bad_value).contains("lambda"));

    let missing = sckd(&["train", "-c", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(code(&missing), 1);

    let no_sweep = sckd(&["sweep", "--set", "seeds=[0]"]);
    assert_eq!(code(&no_sweep), 1);

    let preset = sckd(&["train", "--preset", "nonexistent"]);
    assert_eq!(code(&preset), 1);
    assert!(stderr(&preset).contains("baseline"));
}

#[test]
fn preset_is_recorded_in_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_arg = format!("output_dir={}", dir.path().display());
    let mut args = vec!["train", "--preset", "baseline", "--set", &out_arg];
    args.extend_from_slice(QUICK);
    let out = sckd(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("beta = 0.0"), "{resolved}");
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = write(dir.path(), "bogus.bin", "not a checkpoint");
    let out = sckd(&["embed", "--checkpoint", &bogus, "-o", dir.path().join("e.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let csv = write(dir.path(), "data.csv", "x,label\n1.0,a\nnan,b\n");
    let config = write(
        dir.path(),
        "csv.toml",
        &format!("[dataset.csv]\npath = \"{csv}\"\nlabel_column = \"label\"\nknown_classes = [\"a\"]\n"),
    );
    let out = sckd(&["train", "-c", &config]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "sweep.toml",
        "seeds = [0]\n[sweep]\ntotal_classes = 4\nnovel_classes = [1, 2]\nsample_budget = 160\n",
    );
    let out_arg = format!("output_dir={}", dir.path().join("sw").display());
    let mut args = vec!["sweep", "-c", &config, "--set", &out_arg];
    args.extend_from_slice(QUICK);
    let out = sckd(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    // Header plus 2 points × 2 variants × 2 protocols.
    assert_eq!(table.lines().count(), 9);
    assert!(dir.path().join("sw/novel_2/baseline/seed_0/metrics.json").exists());
}

#[test]
fn check_subcommand_passes() {
    let out = sckd(&["check", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
}
