use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use duallora::checkpoint;
use duallora::config::RunConfig;
use duallora::flops::{self, ArchParams, Convention};
use duallora::trainer::{pretrain_backbone, run_continual_with, AccMatrix, Mode, RunReport};

const CHECKPOINT_FILE: &str = "checkpoint.dlck";

/// Continual learning with dual low-rank adapters on a miniature ViT.
///
/// Log verbosity follows `RUST_LOG` (default `info`).
#[derive(Parser)]
#[command(name = "duallora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the continual sequence and write acc_matrix.csv, summary.json,
    /// signatures.csv and a checkpoint.
    Train(RunArgs),
    /// Reload a checkpoint and re-evaluate every learned task.
    Eval(EvalArgs),
    /// Analytical FLOPs of every scheme in both phases.
    Flops(FlopsArgs),
    /// Run all six modes on one fixture with a shared backbone.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; the standard synthetic fixture when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strict_paper: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a run directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// JSON file with architecture parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<u64>,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    tokens: Option<u64>,
    #[arg(long)]
    dim: Option<u64>,
    #[arg(long)]
    rank: Option<u64>,
    #[arg(long)]
    samples: Option<u64>,
    /// Keep the batch-free final expressions exactly as printed.
    #[arg(long)]
    strict_paper: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::standard(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.strict_paper |= a.strict_paper;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"))
}

/// Writes `bytes` via a temporary sibling so a failure never leaves a
/// truncated file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn summary_json(cfg: &RunConfig, report: &RunReport) -> Value {
    json!({
        "mode": report.mode,
        "seed": report.seed,
        "acc": report.acc,
        "ft": report.ft,
        "ft_defined": report.ft_defined,
        "acc_per_step": report.acc_per_step,
        "avg_acc": report.avg_acc,
        "task_id_accuracy": report.task_id_accuracy,
        "psi_ranks": report.outcomes.iter().map(|o| o.psi_ranks.clone()).collect::<Vec<_>>(),
        "degenerate_signatures": report.outcomes.iter().map(|o| o.degenerate_signature).collect::<Vec<_>>(),
        "aborted": report.aborted,
        "config": cfg,
        "wall_seconds": report.wall_seconds,
    })
}

fn signatures_csv(sigs: &duallora::task_identity::SignatureSet) -> String {
    let width = sigs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut s = String::from("task");
    for k in 0..width {
        s.push_str(&format!(",pi_{k}"));
    }
    s.push('\n');
    for (t, pi) in sigs.iter().enumerate() {
        s.push_str(&t.to_string());
        for v in pi {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

fn train(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let dir = out_dir(&cfg);
    let fixture = cfg.fixture()?;
    info!("pretraining backbone on {} pretext classes", fixture.pretext_classes);
    let backbone = pretrain_backbone(&cfg.encoder, &fixture.pretext, fixture.pretext_classes, &cfg.train)?;
    let (report, learner) = run_continual_with(&fixture, &cfg.encoder, backbone, &cfg.train)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    write_atomic(&dir.join("acc_matrix.csv"), report.acc_matrix.to_csv().as_bytes())?;
    let summary = serde_json::to_string_pretty(&summary_json(&cfg, &report))?;
    write_atomic(&dir.join("summary.json"), summary.as_bytes())?;
    write_atomic(&dir.join("signatures.csv"), signatures_csv(&learner.signatures).as_bytes())?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &checkpoint::encode(&learner))?;
    println!("{} ACC {:.2} FT {:.2} -> {}", report.mode, report.acc, report.ft, dir.display());
    if let Some(reason) = report.aborted {
        bail!("run aborted: {reason}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = if a.checkpoint.is_dir() { a.checkpoint.join(CHECKPOINT_FILE) } else { a.checkpoint.clone() };
    let run_dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let learner = checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let cfg_path = a.config.clone().unwrap_or_else(|| run_dir.join("config.json"));
    let mut cfg = RunConfig::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?;
    // The checkpoint's training config is authoritative (it fixes the data seed).
    cfg.train = learner.config.clone();
    if cfg.encoder != learner.model.config {
        bail!("encoder in {} does not match the checkpoint", cfg_path.display());
    }
    let fixture = cfg.fixture()?;
    let seen = learner.tasks_seen();
    if seen > fixture.tasks.len() {
        bail!("checkpoint has {seen} tasks but the dataset only {}", fixture.tasks.len());
    }
    let evaluation = learner.evaluate(&fixture.tasks[..seen])?;
    let recorded = fs::read_to_string(run_dir.join("acc_matrix.csv"))
        .ok()
        .and_then(|csv| AccMatrix::from_csv(&csv).ok())
        .and_then(|m| m.rows.get(seen.checked_sub(1)?).cloned());
    let matches = recorded.as_ref().map(|r| *r == evaluation.accuracies);
    let acc = evaluation.accuracies.iter().sum::<f64>() / seen.max(1) as f64;
    let out = json!({
        "mode": learner.config.mode,
        "tasks": seen,
        "accuracies": evaluation.accuracies,
        "acc": acc,
        "task_id_accuracy": evaluation.task_id_accuracy,
        "matches_recorded": matches,
    });
    let text = serde_json::to_string_pretty(&out)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("eval.json"), text.as_bytes())?;
    }
    println!("{text}");
    if matches == Some(false) {
        bail!("re-evaluated accuracies differ from the recorded matrix: {recorded:?}");
    }
    Ok(())
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let mut p = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ArchParams>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ArchParams::vit_base(),
    };
    for (field, v) in [
        (&mut p.layers, a.layers),
        (&mut p.batch, a.batch),
        (&mut p.tokens, a.tokens),
        (&mut p.dim, a.dim),
        (&mut p.rank, a.rank),
        (&mut p.samples, a.samples),
    ] {
        if let Some(v) = v {
            *field = v;
        }
    }
    let conv = if a.strict_paper { Convention::StrictPaper } else { Convention::Consistent };
    let profiles = flops::report(&p, conv)?;
    let doc = serde_json::to_string_pretty(&json!({
        "params": p,
        "convention": conv,
        "profiles": profiles,
    }))?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("flops.json"), doc.as_bytes())?;
    } else {
        println!("{doc}");
    }
    print!("{}", flops::render_table(&profiles));
    Ok(())
}

fn ablate(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let dir = out_dir(&cfg);
    let fixture = cfg.fixture()?;
    let backbone = pretrain_backbone(&cfg.encoder, &fixture.pretext, fixture.pretext_classes, &cfg.train)?;
    let mut rows = Vec::new();
    let mut csv = String::from("mode,acc,ft\n");
    let mut table = format!("{:<14} {:>7} {:>7}\n", "mode", "ACC", "FT");
    for mode in Mode::ALL {
        let mut train = cfg.train.clone();
        train.mode = mode;
        let (report, _) = run_continual_with(&fixture, &cfg.encoder, backbone.clone(), &train)?;
        csv.push_str(&format!("{},{},{}\n", mode, report.acc, report.ft));
        table.push_str(&format!("{:<14} {:>7.2} {:>7.2}\n", mode.as_str(), report.acc, report.ft));
        rows.push(json!({
            "mode": mode,
            "acc": report.acc,
            "ft": report.ft,
            "acc_per_step": report.acc_per_step,
            "task_id_accuracy": report.task_id_accuracy.last().cloned().flatten(),
        }));
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
    let doc = json!({ "seed": cfg.train.seed, "rows": rows, "config": cfg });
    write_atomic(&dir.join("ablation.json"), serde_json::to_string_pretty(&doc)?.as_bytes())?;
    print!("{table}");
    Ok(())
}
