use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn insta(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_insta"))
        .args(args)
        .env_remove("INSTA__SEED")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn result(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("result.json")).unwrap()).unwrap()
}

const TINY: [&str; 10] = [
    "--set",
    "dataset.image_size=[3, 16, 16]",
    "--set",
    "model.widths=[8, 8]",
    "--set",
    "model.pools=[true, true]",
    "--set",
    "eval.episodes=3",
    "--set",
    "training.queries=2",
];

#[test]
fn bench_reports_full_scale_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(insta(&["bench", "--c", "640", "--h", "5", "--w", "5", "--k", "3", "--output", out]), 0);
    let doc = result(dir.path());
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["result"]["dynamic"], 144000);
    assert_eq!(doc["result"]["standard"], 3686400);
    assert!(doc["result"]["adapt_vs_oracle_max_abs_diff"].as_f64().unwrap() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv, insta_core::cli::summary_csv(&doc).unwrap());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(insta(&["gradcheck", "--output", dir.path().to_str().unwrap()]), 0);
    let doc = result(dir.path());
    for row in doc["result"]["rows"].as_array().unwrap() {
        assert!(row["max_rel_err"].as_f64().unwrap() < 1e-5, "{row}");
    }
}

#[test]
fn train_then_eval_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = root.path().join(name);
        let mut args = vec!["train", "--episodes", "3", "--seed", "2", "--output", dir.to_str().unwrap()];
        args.extend(TINY);
        assert_eq!(insta(&args), 0);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    assert_eq!(strip(result(&a)), strip(result(&b)));
    for f in ["checkpoint.json", "curve.csv", "summary.csv", "config.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(a.join("curve.csv")).unwrap().lines().count(), 4);

    let eval_dir = root.path().join("eval");
    let ck = a.join("checkpoint.json");
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--output", eval_dir.to_str().unwrap()];
    args.extend(TINY);
    assert_eq!(insta(&args), 0);
    let doc = result(&eval_dir);
    assert_eq!(doc["result"]["model_source"], "checkpoint");
    assert_eq!(doc["result"]["report"]["episode_count"], 3);
}

#[test]
fn config_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    std::fs::write(&cfg, "seed = 5\n[bench]\nc = 8\nc_out = 8\nrepeats = 1\n").unwrap();
    assert_eq!(insta(&["bench", "--config", cfg.to_str().unwrap(), "--output", out]), 0);
    let doc = result(Path::new(out));
    assert_eq!(doc["seed"], 5);
    assert_eq!(doc["result"]["shape"]["c"], 8);
    let echoed = std::fs::read_to_string(Path::new(out).join("config.toml")).unwrap();
    assert_eq!(insta_core::config::RunConfig::from_toml(&echoed).unwrap().seed, 5);

    std::fs::write(&cfg, "[training]\nepisodez = 3\n").unwrap();
    assert_eq!(insta(&["train", "--config", cfg.to_str().unwrap(), "--output", out]), 2);
    assert_eq!(insta(&["train", "--variant", "x", "--output", out]), 2);
    assert_eq!(insta(&["frobnicate"]), 2);
    assert_eq!(insta(&["--help"]), 0);
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--episodes", "40", "--set", "training.lr=1e12", "--output", dir.path().to_str().unwrap()];
    args.extend(TINY);
    assert_eq!(insta(&args), 3);
}

#[test]
fn environment_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_insta"))
        .args(["bench", "--set", "bench.repeats=1", "--output", dir.path().to_str().unwrap()])
        .env("INSTA__BENCH__C", "16")
        .env("INSTA__SEED", "7")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let doc = result(dir.path());
    assert_eq!(doc["seed"], 7);
    assert_eq!(doc["result"]["shape"]["c"], 16);
}
