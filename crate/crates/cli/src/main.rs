use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqlink::checkpoint;
use seqlink::config::{split_documents, RunConfig};
use seqlink::corpus::{Dataset, PreparedDoc};
use seqlink::eval::{evaluate, EvalReport, OrderingStrategy};
use seqlink::gradcheck::{grad_check, GradCheckConfig};
use seqlink::model::Env;
use seqlink::policy::SelectMode;
use seqlink::rewards::{self, EpisodeOutcome, TransitionRewards};
use seqlink::rollout::{eval_episode, OrderSource};
use seqlink::sweep::{run_sweep, summarize, train_run, write_csv, SweepGrid};
use seqlink::synthetic::generate_synthetic;
use seqlink::trainer::Window;

#[derive(Parser)]
#[command(name = "seqlink", version, about = "Entity linking with a learned mention order")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Link every mention of a corpus and write predictions as JSON lines.
    Link(LinkArgs),
    /// Evaluate a checkpoint under an ordering strategy.
    Eval(EvalArgs),
    /// Train over a grid of windows, γ₁ values or rewards.
    Sweep(SweepArgs),
    /// Finite-difference check of every trainable tensor.
    GradCheck(GradCheckArgs),
    /// Print the rewards of one flag sequence.
    RewardTable(RewardTableArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run config whose `[synthetic]` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_docs: Option<usize>,
    #[arg(long)]
    mentions: Option<usize>,
    #[arg(long)]
    anchor_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the trained window.
    #[arg(long)]
    window: Option<Window>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// offset, size, similarity, random[:seed], dynamic[:W] or exhaustive-best.
    #[arg(long, default_value = "dynamic")]
    order: String,
    /// Window for `dynamic`; defaults to the trained window.
    #[arg(long)]
    window: Option<Window>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Window,
    Gamma1,
    Reward,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated grid; defaults to the standard grid for the axis.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Per-run rows (CSV); the summary goes to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 3)]
    entries: usize,
}

#[derive(Args)]
struct RewardTableArgs {
    /// One character per step: `1` correct, `0` wrong.
    #[arg(long)]
    flags: String,
    #[arg(long = "L")]
    length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    t: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
}

fn echo(cfg: &RunConfig) -> Result<()> {
    eprintln!("seed: {}", cfg.seed);
    eprintln!("config hash: {}", cfg.hash()?);
    eprintln!("--- config ---\n{}--------------", cfg.to_toml()?);
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(dir, cfg.data.context_radius).with_context(|| format!("reading dataset {}", dir.display()))
}

fn write_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            serde_json::to_writer_pretty(&mut w, value)?;
            w.write_all(b"\n")?;
        }
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let s = &mut cfg.synthetic;
    if let Some(n) = a.num_docs {
        s.num_docs = n;
    }
    if let Some(m) = a.mentions {
        s.mentions_per_doc = m;
    }
    if let Some(f) = a.anchor_fraction {
        s.anchor_fraction = f;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    echo(&cfg)?;
    let corpus = generate_synthetic(&cfg.synthetic)?;
    std::fs::create_dir_all(&a.out)?;
    corpus.dataset.save(&a.out)?;
    eprintln!(
        "wrote {} documents to {}",
        corpus.dataset.documents.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    echo(&cfg)?;
    let data = load_data(&a.data, &cfg)?;
    let diagnostics = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let run = train_run(&cfg, &data, Some(diagnostics))?;
    checkpoint::save(&a.out, &run.model, &cfg)?;
    eprintln!(
        "best epoch {} validation F1 {:?}; checkpoint {}",
        run.report.best_epoch,
        run.report.best_valid_f1,
        a.out.display()
    );
    if let Some(p) = &a.report {
        write_json(Some(p), &run.report)?;
    }
    Ok(())
}

fn select_split(docs: Vec<PreparedDoc>, cfg: &RunConfig, split: SplitName) -> Result<Vec<PreparedDoc>> {
    if let SplitName::All = split {
        return Ok(docs);
    }
    let s = split_documents(docs, &cfg.data)?;
    Ok(match split {
        SplitName::Train => s.train,
        SplitName::Valid => s.valid,
        _ => s.test,
    })
}

#[derive(serde::Serialize)]
struct LinkRecord<'a> {
    doc: &'a str,
    mention: &'a str,
    step: usize,
    entity: &'a str,
    prob: f64,
}

fn link(a: LinkArgs) -> Result<()> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    echo(&cfg)?;
    let data = load_data(&a.data, &cfg)?;
    let env = Env::new(&data.store);
    let window = a.window.unwrap_or(cfg.train.window);
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut total = 0;
    for doc in data.prepare()? {
        let locals = model.local_values(&env, &doc)?;
        let source = OrderSource::Policy {
            window: window.size(doc.len()),
            mode: SelectMode::Greedy,
        };
        let ep = eval_episode(&model, &env, &doc, &locals, source)?;
        for (step, s) in ep.steps.iter().enumerate() {
            let rec = LinkRecord {
                doc: &doc.id,
                mention: &doc.mentions[s.mention].id,
                step,
                entity: data.store.entities.id(s.predicted_entity),
                prob: s.prob,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            total += 1;
        }
    }
    w.flush()?;
    eprintln!("linked {total} mentions into {}", a.out.display());
    Ok(())
}

fn strategy(order: &str, window: Option<Window>, trained: Window) -> Result<OrderingStrategy> {
    if order == "dynamic" {
        return Ok(OrderingStrategy::Dynamic {
            window: window.unwrap_or(trained),
        });
    }
    if window.is_some() {
        bail!("--window only applies to `--order dynamic`");
    }
    Ok(order.parse()?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    echo(&cfg)?;
    let strategy = strategy(&a.order, a.window, cfg.train.window)?;
    let data = load_data(&a.data, &cfg)?;
    let docs = select_split(data.prepare()?, &cfg, a.split)?;
    let env = Env::new(&data.store);
    let mut report: EvalReport = evaluate(&model, &env, &docs, &strategy)?;
    report.config_hash = Some(cfg.hash()?);
    report.seed = Some(cfg.seed);
    eprintln!(
        "{}: micro-F1 {:.4} ({}/{})",
        report.strategy, report.micro_f1, report.correct, report.total
    );
    write_json(a.out.as_deref(), &report)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    echo(&cfg)?;
    let data = load_data(&a.data, &cfg)?;
    let values: Vec<String> = if a.values.is_empty() {
        match a.axis {
            Axis::Window => ["2", "3", "4", "5", "6", "7", "L"].map(String::from).to_vec(),
            Axis::Gamma1 => ["0.001", "0.00075", "0.0005", "0.00025", "0.0001"]
                .map(String::from)
                .to_vec(),
            Axis::Reward => ["r1", "r2-1", "r2-2", "r3"].map(String::from).to_vec(),
        }
    } else {
        a.values.clone()
    };
    let mut grid = SweepGrid {
        windows: vec![cfg.train.window],
        gamma1: vec![cfg.train.gamma1],
        rewards: vec![cfg.train.reward],
        seeds: a.seeds.clone(),
    };
    match a.axis {
        Axis::Window => grid.windows = values.iter().map(|v| v.parse()).collect::<seqlink::Result<_>>()?,
        Axis::Gamma1 => {
            grid.gamma1 = values
                .iter()
                .map(|v| v.parse::<f64>().with_context(|| format!("bad γ₁ `{v}`")))
                .collect::<Result<_>>()?
        }
        Axis::Reward => grid.rewards = values.iter().map(|v| v.parse()).collect::<seqlink::Result<_>>()?,
    }
    let rows = run_sweep(&cfg, &data, &grid)?;
    write_csv(&a.out, &rows)?;
    println!("window,gamma1,reward,runs,mean_f1,std_f1");
    for s in summarize(&rows) {
        println!(
            "{},{},{},{},{:.6},{:.6}",
            s.window, s.gamma1, s.reward, s.runs, s.mean_f1, s.std_f1
        );
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        seeds: a.seeds,
        tolerance: a.tolerance,
        entries_per_tensor: a.entries,
        ..GradCheckConfig::default()
    };
    eprintln!(
        "seeds 0..{} step {:e} tolerance {:e}",
        cfg.seeds, cfg.step, cfg.tolerance
    );
    let report = grad_check(&cfg)?;
    println!(
        "{:<40} {:>8} {:>8} {:>12}",
        "tensor", "checked", "skipped", "max rel err"
    );
    for t in &report.tensors {
        println!(
            "{:<40} {:>8} {:>8} {:>12.3e}",
            t.name, t.checked, t.skipped, t.max_rel_error
        );
    }
    for (c, e) in report.by_component() {
        println!("{c}: max rel err {e:.3e}");
    }
    if !report.passed() {
        bail!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error()
        );
    }
    println!("ok: max relative error {:.3e}", report.max_rel_error());
    Ok(())
}

fn reward_table(a: RewardTableArgs) -> Result<()> {
    let flags: Vec<bool> = a
        .flags
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => bail!("flags must be 0s and 1s, got `{c}`"),
        })
        .collect::<Result<_>>()?;
    let l = flags.len();
    if let Some(len) = a.length {
        if len != l {
            bail!("--L {len} does not match {l} flags");
        }
    }
    let t = if a.t == 0 { l } else { a.t };
    let o = EpisodeOutcome::new(flags, a.gamma)?;
    let lambda = TransitionRewards::FIXED;
    let lf = l as f64;
    let r2 = rewards::r2_base(&o, &lambda, None)?;
    println!("flags {} L={l} t={t} gamma={}", a.flags, a.gamma);
    println!("{:<4} {:>12} {:>12}", "", "base", "R(t)");
    println!(
        "{:<4} {:>12} {:>12.6}",
        "R1",
        fmt_base(rewards::r1_base(&o) * lf),
        rewards::r1(&o, t)?
    );
    println!(
        "{:<4} {:>12} {:>12.6}",
        "R2",
        fmt_base(r2 * lf),
        rewards::r2(&o, t, &lambda, None)?
    );
    println!(
        "{:<4} {:>12} {:>12.6}",
        "R3",
        fmt_base(rewards::r3_base(&o) * lf),
        rewards::r3(&o, t)?
    );
    Ok(())
}

/// Exact sevenths and integers print as fractions, everything else as decimals.
fn fmt_base(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        return format!("{}", x.round());
    }
    for den in 2..=64u32 {
        let num = x * den as f64;
        if (num - num.round()).abs() < 1e-9 {
            return format!("{}/{den}", num.round());
        }
    }
    format!("{x:.6}")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Link(a) => link(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::RewardTable(a) => reward_table(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
