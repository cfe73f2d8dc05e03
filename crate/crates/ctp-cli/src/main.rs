//! `ctp`: data generation, pretraining, tuning-free evaluation,
//! parameter sweeps, ablations, and plot emission.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod plot;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ctp_core::episode::TaskKind;
use ctp_core::graph::{gen_planted_partition, gen_relational, load_graph, save_graph};
use ctp_core::tensor::Checkpoint;
use ctp_core::train::{
    ablate, evaluate, sweep_eval, sweep_lambda_p, train, AblationFlags, EvalGrid, EvalOptions,
    SweepRow, TrainConfig,
};

#[derive(Parser)]
#[command(name = "ctp", version, about = "Graph in-context learning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph directory (nodes/edges/labels TSV).
    Gen(GenArgs),
    /// Pretrain on a source graph and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a target graph with zero updates.
    Eval(EvalArgs),
    /// Grid sweeps: lambda x p (train+eval) or shots/ways (eval-only).
    Sweep(SweepArgs),
    /// Train and evaluate the five optimization-component arms.
    Ablate(AblateArgs),
    /// Render sweep CSVs to SVG charts.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Sbm,
    Relational,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    /// Communities (sbm).
    #[arg(long, default_value_t = 4)]
    communities: usize,
    /// Nodes per community (sbm).
    #[arg(long, default_value_t = 50)]
    per: usize,
    #[arg(long, default_value_t = 0.2)]
    p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    p_out: f64,
    /// Entities (relational).
    #[arg(long, default_value_t = 100)]
    entities: usize,
    /// Relation types (relational).
    #[arg(long, default_value_t = 5)]
    relations: usize,
    /// Edge count (relational).
    #[arg(long, default_value_t = 400)]
    edges: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    /// Distance between community feature means (sbm).
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, env = "CTP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Source graph directory.
    #[arg(long)]
    graph: PathBuf,
    /// Training config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Enable exactly these optimization components, e.g. "O1" or
    /// "O1,O2,O3"; "none" disables all.
    #[arg(long)]
    ablation: Option<String>,
    /// Override a config key, e.g. --set epochs=24 or
    /// --set embedder.negatives=1. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Embedding-table cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Target graph directory.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 3)]
    ways: usize,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, env = "CTP_SEED", default_value_t = 0)]
    seed: u64,
    /// Task kind; defaults to the checkpoint's training task.
    #[arg(long, value_enum)]
    task: Option<CliTask>,
    /// Label-free clustering fallback for --shots 0.
    #[arg(long, default_value_t = false)]
    zero_shot_fallback: bool,
    /// Output directory for eval.csv and the config echo.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliTask {
    Node,
    Link,
}

impl From<CliTask> for TaskKind {
    fn from(t: CliTask) -> TaskKind {
        match t {
            CliTask::Node => TaskKind::Node,
            CliTask::Link => TaskKind::Link,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    LambdaP,
    Shots,
    Ways,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    /// Source graph directory (lambda-p).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target graph directory.
    #[arg(long)]
    target: PathBuf,
    /// Fixed checkpoint (shots/ways).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Comma-separated lambda values (lambda-p).
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Comma-separated p values (lambda-p).
    #[arg(long, value_delimiter = ',')]
    ps: Vec<f64>,
    /// Comma-separated shots/ways values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    ways: usize,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, env = "CTP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    task: Option<CliTask>,
    /// Worker threads for grid cells (requires the parallel build).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, default_value_t = 3)]
    ways: usize,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, env = "CTP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Heatmap,
    Line,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    #[arg(long = "in")]
    input: PathBuf,
    /// Second series for line charts (e.g. an ablation arm).
    #[arg(long = "in2")]
    input2: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    label: String,
    #[arg(long, default_value = "baseline")]
    label2: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version render through the same path with exit 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let graph = match args.kind {
        GenKind::Sbm => gen_planted_partition(
            args.communities,
            args.per,
            args.p_in,
            args.p_out,
            args.d_in,
            args.shift,
            args.seed,
        )?,
        GenKind::Relational => {
            gen_relational(args.entities, args.relations, args.edges, args.d_in, args.seed)?
        }
    };
    save_graph(&graph, &args.out)?;
    println!(
        "wrote {} nodes, {} edges to {}",
        graph.node_count(),
        graph.edges().len(),
        args.out.display()
    );
    Ok(())
}

fn load_train_config(
    path: Option<&Path>,
    sets: &[String],
    ablation: Option<&str>,
) -> Result<TrainConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::json!({}),
    };
    for set in sets {
        let Some((key, raw)) = set.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{set}'");
        };
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            slot = slot
                .as_object_mut()
                .with_context(|| format!("--set path '{key}' crosses a non-object"))?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::json!({}));
        }
        slot.as_object_mut()
            .with_context(|| format!("--set path '{key}' crosses a non-object"))?
            .insert(parts[parts.len() - 1].to_string(), parsed);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)
        .context("invalid training config (unknown or ill-typed key?)")?;
    if let Some(spec) = ablation {
        cfg.ablation = parse_ablation(spec)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_ablation(spec: &str) -> Result<AblationFlags> {
    let mut flags = AblationFlags::all_off();
    if spec.eq_ignore_ascii_case("none") || spec.eq_ignore_ascii_case("baseline") {
        return Ok(flags);
    }
    for token in spec.split([',', '+']) {
        match token.trim().to_ascii_uppercase().as_str() {
            "O1" => flags.o1_centroid_clustering = true,
            "O2" => flags.o2_balanced_augmentation = true,
            "O3" => flags.o3_orth_and_attr = true,
            other => bail!("unknown ablation component '{other}' (expected O1, O2, O3)"),
        }
    }
    Ok(flags)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let cfg = load_train_config(args.config.as_deref(), &args.sets, args.ablation.as_deref())?;
    let outcome = train(&graph, &cfg, args.cache.as_deref())?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    outcome.checkpoint.save(&args.out)?;

    let out_dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut csv = String::from("step,ce,orth,attr,total\n");
    for row in &outcome.log {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.ce, row.orth, row.attr, row.total
        ));
    }
    write_text(&out_dir.join("train.csv"), &csv)?;
    write_text(
        &out_dir.join("train.config.json"),
        &serde_json::to_string_pretty(&cfg)?,
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "checkpoint {} ({} steps, sha256 {})",
        args.out.display(),
        outcome.log.len(),
        outcome.checkpoint.sha256_hex()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let graph = load_graph(&args.graph)?;
    let opts = EvalOptions {
        m: args.ways,
        k_shots: args.shots,
        n: args.queries,
        episodes: args.episodes,
        seed: args.seed,
        task_kind: args.task.map(TaskKind::from),
        zero_shot_fallback: args.zero_shot_fallback,
    };
    let report = evaluate(&ckpt, &graph, &opts)?;
    if !report.tuning_free_ok() {
        bail!("checkpoint hash changed during evaluation");
    }
    let mut csv = String::from("episode,accuracy\n");
    for (i, acc) in report.per_episode.iter().enumerate() {
        csv.push_str(&format!("{i},{acc}\n"));
    }
    write_text(&args.out.join("eval.csv"), &csv)?;
    write_text(
        &args.out.join("eval.config.json"),
        &serde_json::to_string_pretty(&report.config)?,
    )?;
    println!(
        "mean={:.4}, std={:.4}, episodes={}",
        report.mean, report.std, report.episodes
    );
    Ok(())
}

fn sweep_rows_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::new();
    if rows.iter().any(|r| r.lambda.is_some()) {
        csv.push_str("lambda,p,mean,std\n");
        for r in rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.lambda.unwrap(),
                r.p.unwrap(),
                r.mean,
                r.std
            ));
        }
    } else if rows.iter().any(|r| r.k_shots.is_some()) {
        csv.push_str("k_shots,mean,std\n");
        for r in rows {
            csv.push_str(&format!("{},{},{}\n", r.k_shots.unwrap(), r.mean, r.std));
        }
    } else {
        csv.push_str("ways,mean,std\n");
        for r in rows {
            csv.push_str(&format!("{},{},{}\n", r.ways.unwrap(), r.mean, r.std));
        }
    }
    csv
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if let Some(jobs) = args.jobs {
        std::env::set_var("RAYON_NUM_THREADS", jobs.to_string());
    }
    let target = load_graph(&args.target)?;
    let opts = EvalOptions {
        m: args.ways,
        k_shots: args.shots,
        n: args.queries,
        episodes: args.episodes,
        seed: args.seed,
        task_kind: args.task.map(TaskKind::from),
        zero_shot_fallback: false,
    };
    let (rows, config_echo) = match args.kind {
        SweepKind::LambdaP => {
            let source_path = args
                .source
                .as_ref()
                .context("--source is required for --kind lambda-p")?;
            if args.lambdas.is_empty() || args.ps.is_empty() {
                bail!("--lambdas and --ps must be non-empty for --kind lambda-p");
            }
            let source = load_graph(source_path)?;
            let cfg = load_train_config(args.config.as_deref(), &args.sets, None)?;
            let rows = sweep_lambda_p(
                &source,
                &target,
                &cfg,
                &args.lambdas,
                &args.ps,
                &opts,
                args.cache.as_deref(),
            )?;
            (
                rows,
                serde_json::json!({
                    "kind": "lambda-p", "lambdas": args.lambdas, "ps": args.ps,
                    "train": cfg, "eval": opts,
                }),
            )
        }
        SweepKind::Shots | SweepKind::Ways => {
            let ckpt_path = args
                .ckpt
                .as_ref()
                .context("--ckpt is required for shots/ways sweeps")?;
            if args.values.is_empty() {
                bail!("--values must be non-empty for shots/ways sweeps");
            }
            let ckpt = Checkpoint::load(ckpt_path)?;
            let grid = match args.kind {
                SweepKind::Shots => EvalGrid::Shots(args.values.clone()),
                _ => EvalGrid::Ways(args.values.clone()),
            };
            let rows = sweep_eval(&ckpt, &target, &grid, &opts)?;
            let kind = if matches!(args.kind, SweepKind::Shots) {
                "shots"
            } else {
                "ways"
            };
            (
                rows,
                serde_json::json!({ "kind": kind, "values": args.values, "eval": opts }),
            )
        }
    };
    std::fs::create_dir_all(&args.out)?;
    write_text(&args.out.join("sweep.csv"), &sweep_rows_csv(&rows))?;
    write_text(
        &args.out.join("sweep.config.json"),
        &serde_json::to_string_pretty(&config_echo)?,
    )?;
    println!(
        "{} sweep rows -> {}",
        rows.len(),
        args.out.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let source = load_graph(&args.source)?;
    let target = load_graph(&args.target)?;
    let cfg = load_train_config(args.config.as_deref(), &args.sets, None)?;
    let opts = EvalOptions {
        m: args.ways,
        k_shots: args.shots,
        n: args.queries,
        episodes: args.episodes,
        seed: args.seed,
        task_kind: None,
        zero_shot_fallback: false,
    };
    let rows = ablate(&source, &target, &cfg, &opts, args.cache.as_deref())?;
    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("arm,mean,std\n");
    println!("{:<10} {:>8} {:>8}", "arm", "mean", "std");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.arm, r.mean, r.std));
        println!("{:<10} {:>8.4} {:>8.4}", r.arm, r.mean, r.std);
    }
    write_text(&args.out.join("ablate.csv"), &csv)?;
    write_text(
        &args.out.join("ablate.config.json"),
        &serde_json::to_string_pretty(&serde_json::json!({ "train": cfg, "eval": opts }))?,
    )?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .context("empty CSV")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect();
    if rows.is_empty() {
        bail!("no data rows");
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .with_context(|| format!("CSV lacks a '{name}' column (has {header:?})"))
}

fn line_series(path: &Path, label: &str) -> Result<plot::Series> {
    let (header, rows) = read_csv(path)?;
    let mean_col = column(&header, "mean")?;
    let std_col = header.iter().position(|h| h == "std");
    let mut points = Vec::new();
    for row in rows {
        let x: f64 = row[0].parse().context("bad x value")?;
        let mean: f64 = row[mean_col].parse().context("bad mean value")?;
        let std: f64 = match std_col {
            Some(c) => row[c].parse().unwrap_or(0.0),
            None => 0.0,
        };
        points.push((x, mean, std));
    }
    Ok(plot::Series {
        label: label.to_string(),
        points,
    })
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let svg = match args.kind {
        PlotKind::Heatmap => {
            let (header, rows) = read_csv(&args.input)?;
            let l = column(&header, "lambda")?;
            let p = column(&header, "p")?;
            let m = column(&header, "mean")?;
            let cells: Vec<(f64, f64, f64)> = rows
                .iter()
                .map(|r| -> Result<(f64, f64, f64)> {
                    Ok((r[l].parse()?, r[p].parse()?, r[m].parse()?))
                })
                .collect::<Result<_>>()?;
            plot::heatmap_svg(&cells)?
        }
        PlotKind::Line => {
            let (header, _) = read_csv(&args.input)?;
            let x_label = header.first().cloned().unwrap_or_else(|| "x".to_string());
            let mut series = vec![line_series(&args.input, &args.label)?];
            if let Some(second) = &args.input2 {
                series.push(line_series(second, &args.label2)?);
            }
            plot::line_svg(&series, &x_label)?
        }
    };
    write_text(&args.out, &svg)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
