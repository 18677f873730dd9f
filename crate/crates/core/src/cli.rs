//! `insta` command-line front end.
//!
//! Every run writes into its output directory:
//!
//! * `config.toml`: the effective configuration;
//! * `result.json`: one document with `schema_version`, the command, the
//!   config hash, a deterministic `result` and a separate `timing` object;
//! * `summary.csv`: a flat view computed from `result.json` alone;
//! * `train` also writes `checkpoint.json` and `curve.csv`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numeric
//! failure (divergence, non-finite values, or a failed gradient check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{env_overrides, RunConfig};
use crate::error::{Error, Result};
use crate::fsl::{ablate, evaluate, train, AblationVariant, ModelParams};
use crate::generator::param_count_report;
use crate::gradsuite::run_suite;
use crate::insta::{adapt, dynamic_conv_oracle, DynamicKernel, KernelKind};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "insta", version, about = "Instance- and task-aware dynamic convolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Episodic training; writes a checkpoint and the loss curve.
    Train {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        episodes: EpisodeArgs,
    },
    /// Evaluates a checkpoint, or a freshly initialized model without one.
    Eval {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        episodes: EpisodeArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains and evaluates the ablation variants on shared episode streams.
    Ablate {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        episodes: EpisodeArgs,
    },
    /// Parameter counts and adapt-vs-oracle throughput.
    Bench {
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        c_out: Option<usize>,
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        base: BaseArgs,
    },
}

#[derive(Debug, Args)]
pub struct BaseArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    /// Ablation variant id, `i` … `ix`.
    #[arg(long)]
    pub variant: Option<AblationVariant>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Bench { .. } => "bench",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn base(&self) -> &BaseArgs {
        match self {
            Command::Train { base, .. }
            | Command::Eval { base, .. }
            | Command::Ablate { base, .. }
            | Command::Bench { base, .. }
            | Command::Gradcheck { base } => base,
        }
    }

    /// Dedicated flags as overrides, applied last.
    fn flag_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(seed) = self.base().seed {
            out.push(format!("seed={seed}"));
        }
        let mut episode_flags = |e: &EpisodeArgs, episodes_key: &str, sections: &[&str]| {
            if let Some(n) = e.episodes {
                out.push(format!("{episodes_key}={n}"));
            }
            for s in sections {
                if let Some(n) = e.way {
                    out.push(format!("{s}.way={n}"));
                }
                if let Some(n) = e.shot {
                    out.push(format!("{s}.shot={n}"));
                }
            }
            e.variant
        };
        match self {
            Command::Train { episodes, .. } => {
                if let Some(v) = episode_flags(episodes, "training.episodes", &["training"]) {
                    out.push(format!("training.variant=\"{}\"", v.id()));
                }
            }
            Command::Eval { episodes, .. } => {
                if let Some(v) = episode_flags(episodes, "eval.episodes", &["eval"]) {
                    out.push(format!("training.variant=\"{}\"", v.id()));
                }
            }
            Command::Ablate { episodes, .. } => {
                if let Some(v) = episode_flags(episodes, "ablation.train_episodes", &["training", "eval"]) {
                    out.push(format!("ablation.variants=[\"{}\"]", v.id()));
                }
            }
            Command::Bench { c, c_out, h, w, k, .. } => {
                for (key, v) in [("c", c), ("c_out", c_out), ("h", h), ("w", w), ("k", k)] {
                    if let Some(v) = v {
                        out.push(format!("bench.{key}={v}"));
                    }
                }
            }
            Command::Gradcheck { .. } => {}
        }
        out
    }
}

/// Result of a successful run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub document: Value,
    /// Set when the run completed but a numeric acceptance check failed.
    pub numeric_failure: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 1,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 2,
        Error::Numeric { .. } | Error::Diverged { .. } => 3,
    }
}

/// Parses `argv` and runs it, reading overrides from the process environment.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, std::env::vars()) {
        Ok(out) => {
            eprintln!("wrote {}", out.dir.join("result.json").display());
            match out.numeric_failure {
                Some(msg) => {
                    eprintln!("error: {msg}");
                    3
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolves the configuration, runs `command` and writes every artifact.
pub fn execute(command: &Command, env: impl IntoIterator<Item = (String, String)>) -> Result<RunOutput> {
    let base = command.base();
    let source = match &base.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = env_overrides(env);
    overrides.extend(base.set.iter().cloned());
    overrides.extend(command.flag_overrides());
    let cfg = RunConfig::layered(source.as_deref(), &overrides)?;
    let hash = cfg.hash()?;
    let dir = base.output.clone().unwrap_or_else(|| Path::new("runs").join(command.name()));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let start = Instant::now();
    let mut timing = serde_json::Map::new();
    let mut numeric_failure = None;
    let result = match command {
        Command::Train { .. } => run_train(&cfg, &hash, &dir)?,
        Command::Eval { checkpoint, .. } => run_eval(&cfg, checkpoint.as_deref())?,
        Command::Ablate { .. } => run_ablate(&cfg)?,
        Command::Bench { .. } => {
            let (result, bench_timing) = run_bench(&cfg)?;
            timing.extend(bench_timing);
            result
        }
        Command::Gradcheck { .. } => {
            let result = run_gradcheck(&cfg)?;
            if result["passed"] != Value::Bool(true) {
                numeric_failure = Some(format!(
                    "gradient check worst error {} exceeds {}",
                    result["worst"], cfg.gradcheck.tolerance
                ));
            }
            result
        }
    };
    timing.insert("wall_clock_seconds".into(), json!(start.elapsed().as_secs_f64()));
    let document = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command.name(),
        "seed": cfg.seed,
        "config_hash": hash,
        "result": result,
        "timing": timing,
    });
    let text = serde_json::to_string_pretty(&document).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("result.json"), text + "\n")?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&document)?)?;
    Ok(RunOutput { dir, document, numeric_failure })
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn run_train(cfg: &RunConfig, hash: &str, dir: &Path) -> Result<Value> {
    let out = train(&cfg.dataset, &cfg.model, &cfg.training, cfg.seed)?;
    let ck = Checkpoint::capture(&out.model, &cfg.model, cfg.dataset.image_size, cfg.training.variant, hash);
    ck.save(&dir.join("checkpoint.json"))?;
    let mut curve = csv::Writer::from_writer(Vec::new());
    curve.write_record(["episode", "loss"]).map_err(csv_err)?;
    for (i, l) in out.curve.iter().enumerate() {
        curve.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    std::fs::write(dir.join("curve.csv"), curve.into_inner().map_err(|e| Error::Io(e.to_string()))?)?;
    let w = (out.curve.len() / 10).max(1);
    let (first, last) = if out.curve.is_empty() {
        (Value::Null, Value::Null)
    } else {
        (json!(window_mean(&out.curve[..w])), json!(window_mean(&out.curve[out.curve.len() - w..])))
    };
    Ok(json!({
        "variant": cfg.training.variant,
        "episodes": out.curve.len(),
        "window": w,
        "initial_window_loss": first,
        "final_window_loss": last,
        "final_loss": out.curve.last(),
        "train_stream": out.stream_digest,
        "checkpoint": "checkpoint.json",
        "curve": "curve.csv",
    }))
}

fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Value> {
    let (model, variant, source) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.image_size != cfg.dataset.image_size {
                return Err(Error::Config(format!(
                    "checkpoint expects {:?} images, dataset renders {:?}",
                    ck.image_size, cfg.dataset.image_size
                )));
            }
            (ck.restore()?, ck.variant, "checkpoint")
        }
        None => {
            let v = cfg.training.variant;
            (ModelParams::init(&cfg.model, cfg.dataset.image_size, v, cfg.seed)?, v, "untrained")
        }
    };
    let report = evaluate(&model, &cfg.dataset, &cfg.eval, variant, cfg.seed)?;
    Ok(json!({ "variant": variant, "model_source": source, "report": report }))
}

fn run_ablate(cfg: &RunConfig) -> Result<Value> {
    let rows = ablate(&cfg.dataset, &cfg.model, &cfg.training, &cfg.eval, &cfg.ablation, cfg.seed)?;
    Ok(json!({ "rows": rows }))
}

fn run_bench(cfg: &RunConfig) -> Result<(Value, serde_json::Map<String, Value>)> {
    let b = &cfg.bench;
    let counts = param_count_report(b.c as u64, b.c_out as u64, b.h as u64, b.w as u64, b.k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(b.batch);
    for _ in 0..b.batch {
        let f = Tensor::uniform(&[b.c, b.h, b.w], 1.0, &mut rng);
        let g = Tensor::uniform(&[b.c, b.h, b.w, b.k, b.k], 1.0, &mut rng);
        pairs.push((f, DynamicKernel::new(g, KernelKind::Insta)?));
    }
    let repeats = b.repeats.max(1);
    let time = |op: &dyn Fn(&Tensor, &DynamicKernel) -> Result<Tensor>| -> Result<(Vec<Tensor>, f64)> {
        let start = Instant::now();
        let mut outs = Vec::new();
        for _ in 0..repeats {
            outs = pairs.iter().map(|(f, k)| op(f, k)).collect::<Result<_>>()?;
        }
        Ok((outs, start.elapsed().as_secs_f64() / repeats as f64))
    };
    let (fast, t_adapt) = time(&adapt)?;
    let (slow, t_oracle) = time(&dynamic_conv_oracle)?;
    let mut max_abs_diff = 0.0f64;
    for ((a, o), (f, _)) in fast.iter().zip(&slow).zip(&pairs) {
        max_abs_diff = max_abs_diff.max(a.zip_map(f, |a, x| a - x)?.max_abs_diff(o));
    }
    let mut timing = serde_json::Map::new();
    timing.insert("adapt_seconds_per_batch".into(), json!(t_adapt));
    timing.insert("oracle_seconds_per_batch".into(), json!(t_oracle));
    timing.insert("adapt_maps_per_second".into(), json!(b.batch as f64 / t_adapt));
    timing.insert("oracle_maps_per_second".into(), json!(b.batch as f64 / t_oracle));
    let result = json!({
        "shape": { "c": b.c, "c_out": b.c_out, "h": b.h, "w": b.w, "k": b.k, "batch": b.batch },
        "dynamic": counts.dynamic,
        "standard": counts.standard,
        "adapt_vs_oracle_max_abs_diff": max_abs_diff,
    });
    Ok((result, timing))
}

fn run_gradcheck(cfg: &RunConfig) -> Result<Value> {
    let rows = run_suite(cfg.seed, cfg.gradcheck.eps)?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    Ok(json!({
        "rows": rows,
        "eps": cfg.gradcheck.eps,
        "tolerance": cfg.gradcheck.tolerance,
        "worst": worst,
        "passed": worst < cfg.gradcheck.tolerance,
    }))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Flattens nested objects with dotted keys; arrays are dropped.
fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(_) => {}
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Null => {
            out.insert(prefix.to_string(), String::new());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// CSV view of a result document: one line per entry of `result.rows`, or a
/// single line for the flattened `result`, each prefixed by the run fields.
pub fn summary_csv(document: &Value) -> Result<String> {
    let mut head = BTreeMap::new();
    for key in ["command", "seed", "config_hash"] {
        flatten(key, &document[key], &mut head);
    }
    let result = &document["result"];
    let rows: Vec<BTreeMap<String, String>> = match result.get("rows").and_then(Value::as_array) {
        Some(rows) => rows
            .iter()
            .map(|r| {
                let mut m = head.clone();
                flatten("", r, &mut m);
                m
            })
            .collect(),
        None => {
            let mut m = head.clone();
            flatten("", result, &mut m);
            vec![m]
        }
    };
    let mut columns: Vec<String> = head.keys().cloned().collect();
    for r in &rows {
        for k in r.keys() {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&columns).map_err(csv_err)?;
    for r in &rows {
        w.write_record(columns.iter().map(|c| r.get(c).map(String::as_str).unwrap_or(""))).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from([
            "insta", "ablate", "--seed", "4", "--episodes", "7", "--way", "3", "--variant", "vii",
        ])
        .unwrap();
        assert_eq!(
            cli.command.flag_overrides(),
            vec![
                "seed=4",
                "ablation.train_episodes=7",
                "training.way=3",
                "eval.way=3",
                "ablation.variants=[\"vii\"]"
            ]
        );
    }

    #[test]
    fn csv_uses_rows_when_present() {
        let doc = json!({
            "command": "gradcheck", "seed": 0, "config_hash": "h",
            "result": { "rows": [ { "name": "a", "max_rel_err": 1e-9 }, { "name": "b,c", "max_rel_err": 0.5 } ] },
        });
        let csv = summary_csv(&doc).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "command,config_hash,seed,max_rel_err,name");
        assert_eq!(lines[2], "gradcheck,h,0,0.5,\"b,c\"");
    }

    #[test]
    fn csv_flattens_single_results() {
        let doc = json!({
            "command": "eval", "seed": 1, "config_hash": "h",
            "result": { "report": { "mean": 0.5, "episode_accuracies": [0.5] }, "variant": "ix" },
        });
        assert_eq!(summary_csv(&doc).unwrap(), "command,config_hash,seed,report.mean,variant\neval,h,1,0.5,ix\n");
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Diverged { episode: 0, loss: f64::NAN }), 3);
        assert_eq!(exit_code(&Error::Io("x".into())), 1);
    }
}
