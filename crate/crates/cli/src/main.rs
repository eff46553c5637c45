use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sourceplan::backends::BackendKind;
use sourceplan::corpus::{lint_dataset, load_dataset, stats};
use sourceplan::pipeline::{run_bench, run_eval, ChatReply, ChatSession, Pipeline, PipelineConfig, PlannerMode};
use sourceplan::retrieval::{RetrievalConfig, Strategy};
use sourceplan::text::WhitespaceCjkTokenizer;

#[derive(Parser)]
#[command(name = "sourceplan", version, about = "Multi-source planning and grounded response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every system turn of a dataset.
    Eval(RunArgs),
    /// Measure scan and memory counters of the retrieval strategies.
    Bench(BenchArgs),
    /// Talk to the pipeline over one dialogue's persona and documents.
    Chat {
        #[command(flatten)]
        run: RunArgs,
        /// Dialogue whose persona and documents are used; the first one by default.
        #[arg(long)]
        dialogue_id: Option<String>,
    },
    /// Check a dataset and report every invalid line.
    Validate { path: PathBuf },
    /// Print corpus statistics as JSON.
    Stats { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    planner_mode: Option<String>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    backend_endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json, report.txt, audit.jsonl and run.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20])]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20])]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "a,b,c,d")]
    strategies: Vec<String>,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    top_n: usize,
    /// Directory for bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Strategy::parse(s).ok_or_else(|| anyhow!("unknown strategy {s:?}"))
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset_path = d.clone();
        }
        if let Some(m) = &self.planner_mode {
            cfg.planner_mode = PlannerMode::parse(m).ok_or_else(|| anyhow!("unknown planner mode {m:?}"))?;
        }
        if let Some(n) = self.top_n {
            cfg.retrieval.top_n = n;
        }
        if let Some(s) = &self.strategy {
            cfg.retrieval.strategy = parse_strategy(s)?;
        }
        if let Some(e) = &self.backend_endpoint {
            cfg.backend.kind = BackendKind::HttpChat;
            cfg.backend.endpoint = Some(e.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if cfg.dataset_path.as_os_str().is_empty() {
            bail!("no dataset: pass --dataset or set dataset_path in the config");
        }
        Ok(cfg)
    }
}

fn write_json(path: &Path, mut text: String) -> Result<()> {
    text.push('\n');
    fs::write(path, text).with_context(|| path.display().to_string())
}

fn eval(args: RunArgs) -> Result<ExitCode> {
    let cfg = args.config()?;
    let artifacts = run_eval(cfg)?;
    let table = match &artifacts.report {
        Some(r) => r.to_table(),
        None => format!("no sample could be scored; {} errors\n", artifacts.counters.errors),
    };
    print!("{table}");
    for a in artifacts.audit.iter().filter(|a| a.error.is_some()) {
        eprintln!("{}: {}", a.sample_id, a.error.as_deref().unwrap_or_default());
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        if let Some(r) = &artifacts.report {
            write_json(&dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
        }
        fs::write(dir.join("report.txt"), &table)?;
        let mut audit = String::new();
        for a in &artifacts.audit {
            audit.push_str(&serde_json::to_string(a)?);
            audit.push('\n');
        }
        fs::write(dir.join("audit.jsonl"), audit)?;
        write_json(
            &dir.join("run.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "config": artifacts.config,
                "counters": artifacts.counters,
                "timings": artifacts.timings,
            }))?,
        )?;
    }
    Ok(ExitCode::from(artifacts.counters.errors.min(255) as u8))
}

fn bench(args: BenchArgs) -> Result<ExitCode> {
    let strategies = args.strategies.iter().map(|s| parse_strategy(s)).collect::<Result<Vec<_>>>()?;
    let cfg = RetrievalConfig {
        top_n: args.top_n,
        ..RetrievalConfig::default()
    };
    let profiles = run_bench(&args.n, &args.m, &strategies, args.queries, args.seed, &cfg)?;
    println!("{:<16}{:>6}{:>6}{:>12}{:>12}{:>14}", "strategy", "N", "M", "scanned", "resident", "wall_ns");
    for p in &profiles {
        println!(
            "{:<16}{:>6}{:>6}{:>12}{:>12}{:>14}",
            p.strategy.name(),
            p.n,
            p.m,
            p.candidates_scanned,
            p.peak_items_resident,
            p.wall_time_ns
        );
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("bench.json"), serde_json::to_string_pretty(&profiles)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn chat(args: RunArgs, dialogue_id: Option<String>) -> Result<ExitCode> {
    let cfg = args.config()?;
    let records = load_dataset(&cfg.dataset_path)?;
    let record = match &dialogue_id {
        Some(id) => records.into_iter().find(|r| &r.dialogue_id == id),
        None => records.into_iter().next(),
    }
    .ok_or_else(|| anyhow!("dialogue not found"))?;
    let toks = cfg.special_tokens.clone();
    let pipeline = Pipeline::new(cfg)?;
    let mut session = ChatSession::new(&pipeline, record)?;
    let stdin = io::stdin();
    let mut out = io::stdout();
    write!(out, "User: ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        match session.handle(&line?) {
            ChatReply::Turn(t) => writeln!(out, "{}", t.render(&toks))?,
            ChatReply::History(h) | ChatReply::Plan(h) => writeln!(out, "{h}")?,
            ChatReply::Error(e) => writeln!(out, "error: {e}")?,
            ChatReply::Empty => {}
            ChatReply::Quit => return Ok(ExitCode::SUCCESS),
        }
        write!(out, "User: ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(ExitCode::SUCCESS)
}

fn validate(path: &Path) -> Result<ExitCode> {
    let report = lint_dataset(path)?;
    for e in &report.errors {
        eprintln!("{}: {e}", path.display());
    }
    if report.is_clean() {
        println!("{}: ok, {} dialogues", path.display(), report.records.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{}: {} invalid lines", path.display(), report.errors.len());
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Chat { run, dialogue_id } => chat(run, dialogue_id),
        Command::Validate { path } => validate(&path),
        Command::Stats { path } => load_dataset(&path)
            .map_err(Into::into)
            .and_then(|r| Ok(stats(&r, &WhitespaceCjkTokenizer)?))
            .and_then(|s| Ok(serde_json::to_string_pretty(&s)?))
            .map(|s| {
                println!("{s}");
                ExitCode::SUCCESS
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
