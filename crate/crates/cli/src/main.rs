use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lpgnas::graph::synthetic::{generate, SyntheticSpec};
use lpgnas::graph::{convert_linqs, write_raw_dataset, Graph};
use lpgnas::harness::{
    cmd_baseline, cmd_eval, cmd_gridsearch, cmd_search, cmd_stats, cmd_sweep, open_dataset, read_records, Baseline,
    ExperimentConfig, ExperimentRecord, SweepGrid, CORA_SURROGATE, DATA_ENV, TOY,
};
use lpgnas::quant::QuantPair;
use lpgnas::supernet::Checkpoint;

#[derive(Parser)]
#[command(name = "lpgnas", version, about = "Joint architecture and quantisation search for graph neural networks")]
struct Cli {
    /// Dataset root directory; each dataset lives in `<root>/<name>`.
    #[arg(long, global = true, env = DATA_ENV)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search, train the chosen network from scratch, evaluate on test.
    Search(SearchArgs),
    /// Train and evaluate a fixed reference network.
    Baseline(BaselineArgs),
    /// Pick a uniform quantisation for a baseline by stepping down the search space.
    Gridsearch(GridArgs),
    /// Search over a grid of layers, channels, beta and seeds; write a Pareto frontier.
    Sweep(SweepArgs),
    /// Bitwidth histograms over experiment records.
    Stats(StatsArgs),
    /// Write a dataset directory from LINQS files or a built-in generator.
    ConvertDataset(ConvertArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Dataset name: a directory under the data root, `cora-surrogate[:seed]` or `toy[:seed]`.
    #[arg(long)]
    dataset: String,
    /// JSON or TOML file overriding configuration defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Total search epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch after which the architecture controller starts learning.
    #[arg(long)]
    arch_start: Option<usize>,
    /// Epoch after which the quantisation controller starts learning.
    #[arg(long)]
    quant_start: Option<usize>,
    /// Supernet steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    /// graphsage, gat or jknet, optionally with a -v2 suffix.
    #[arg(long)]
    model: String,
    /// `float`, `w4a8`, `w8a8`, a row index or `<weight>/<activation>`.
    #[arg(long, default_value = "float")]
    quant: String,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated; each axis defaults to the configured value.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Record files: one record, a JSON array, or JSON lines.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(subcommand)]
    source: ConvertSource,
}

#[derive(Subcommand)]
enum ConvertSource {
    /// LINQS `.content` and `.cites` files.
    Linqs {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        cites: PathBuf,
        #[arg(long)]
        name: String,
        /// Dataset root to write `<root>/<name>` into.
        #[arg(long)]
        out: PathBuf,
    },
    /// A built-in generated dataset.
    Generate {
        /// `cora-surrogate[:seed]` or `toy[:seed]`.
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    /// Split seed the checkpoint was trained with.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let data = cli.data.as_deref();
    match cli.command {
        Command::Search(a) => search(data, a),
        Command::Baseline(a) => baseline(data, a),
        Command::Gridsearch(a) => gridsearch(data, a),
        Command::Sweep(a) => sweep(data, a),
        Command::Stats(a) => stats(a),
        Command::ConvertDataset(a) => convert(a),
        Command::Eval(a) => eval(data, a),
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.search.seed = s;
    }
    Ok(cfg)
}

fn open(data: Option<&Path>, name: &str, cfg: &ExperimentConfig) -> Result<Graph> {
    let (g, _) = open_dataset(data, name, &cfg.load).with_context(|| format!("opening dataset '{name}'"))?;
    Ok(g)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_record(r: &ExperimentRecord) {
    println!(
        "{} on {}: {:?} {:.4} (val {:.4}), model {:.1} B, buffer {:.1} B, {:.1} s",
        r.command, r.dataset, r.metric, r.test_metric, r.val_metric, r.model_bytes, r.buffer_bytes, r.wall_clock_secs
    );
}

fn search(data: Option<&Path>, a: SearchArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.channels {
        cfg.channels = v;
    }
    if let Some(v) = a.epochs {
        cfg.search.epochs = v;
    }
    if let Some(v) = a.arch_start {
        cfg.search.arch_start = v;
    }
    if let Some(v) = a.quant_start {
        cfg.search.quant_start = v;
    }
    if let Some(v) = a.steps {
        cfg.search.steps = v;
    }
    if let Some(v) = a.beta {
        cfg.search.beta = v;
    }
    cfg.validate()?;
    let g = open(data, &a.common.dataset, &cfg)?;
    fs::create_dir_all(&a.common.out)?;
    let log_path = a.common.out.join("search.log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let run = cmd_search(&g, &cfg, Some(&mut log))?;
    log.flush()?;
    run.record.save(&a.common.out.join("record.json"))?;
    run.checkpoint.save(&a.common.out.join("checkpoint.json"))?;
    print_record(&run.record);
    Ok(())
}

fn parse_quant(s: &str) -> Result<Option<QuantPair>> {
    if s.eq_ignore_ascii_case("float") {
        return Ok(None);
    }
    Ok(Some(QuantPair::parse(s)?))
}

fn baseline(data: Option<&Path>, a: BaselineArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let model: Baseline = a.model.parse()?;
    let quant = parse_quant(&a.quant)?;
    let g = open(data, &a.common.dataset, &cfg)?;
    fs::create_dir_all(&a.common.out)?;
    let (record, ck) = cmd_baseline(&g, model, quant, &cfg)?;
    record.save(&a.common.out.join("record.json"))?;
    ck.save(&a.common.out.join("checkpoint.json"))?;
    print_record(&record);
    Ok(())
}

fn gridsearch(data: Option<&Path>, a: GridArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let model: Baseline = a.model.parse()?;
    let g = open(data, &a.common.dataset, &cfg)?;
    fs::create_dir_all(&a.common.out)?;
    let records = std::cell::RefCell::new(Vec::new());
    // decisions use validation accuracy; test accuracy stays in the records
    let outcome = cmd_gridsearch(|q| {
        let (r, _) = cmd_baseline(&g, model, q, &cfg)?;
        let label = q.map_or("float".to_string(), |p| p.label());
        eprintln!("{label}: val {:.4} test {:.4}", r.val_metric, r.test_metric);
        let v = r.val_metric;
        records.borrow_mut().push(r);
        Ok(v)
    })?;
    write_json(&a.common.out.join("gridsearch.json"), &outcome)?;
    let lines: Vec<String> = records
        .into_inner()
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<_, _>>()?;
    fs::write(a.common.out.join("records.jsonl"), lines.join("\n") + "\n")?;
    match outcome.chosen {
        Some(p) => println!("chosen {} (row {}) after {} steps", p.label(), p.index, outcome.trace.len()),
        None => println!("no quantisation passed; keeping float"),
    }
    Ok(())
}

fn sweep(data: Option<&Path>, a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let grid = SweepGrid {
        layers: a.layers.unwrap_or_else(|| vec![cfg.layers]),
        channels: a.channels.unwrap_or_else(|| vec![cfg.channels]),
        betas: a.betas.unwrap_or_else(|| vec![cfg.search.beta]),
        seeds: a.seeds.unwrap_or_else(|| vec![cfg.search.seed]),
    };
    let g = open(data, &a.common.dataset, &cfg)?;
    fs::create_dir_all(&a.common.out)?;
    let out = cmd_sweep(&g, &cfg, &grid, &a.common.out, a.threads)?;
    let failed = out.points.iter().filter(|p| p.error.is_some()).count();
    for p in &out.points {
        if let Some(e) = &p.error {
            eprintln!("point {} failed: {e}", p.index);
        }
    }
    println!(
        "{} points ({} failed), {} on the frontier; see {}",
        out.points.len(),
        failed,
        out.frontier.len(),
        a.common.out.join("frontier.csv").display()
    );
    if failed == out.points.len() {
        bail!("every sweep point failed");
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let mut records = Vec::new();
    for p in &a.records {
        records.extend(read_records(p)?);
    }
    let report = cmd_stats(&records)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("stats.json"), report.to_json()?)?;
    report.write_csv(&a.out.join("stats.csv"))?;
    println!(
        "{} quantised runs ({} float skipped); modal weight bits {:?}, modal activation bits {:?}",
        report.runs, report.float_runs, report.modal_weight_bits, report.modal_activation_bits
    );
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    match a.source {
        ConvertSource::Linqs {
            content,
            cites,
            name,
            out,
        } => {
            let dir = out.join(&name);
            let (raw, dropped) = convert_linqs(&content, &cites, &name, &dir)?;
            println!(
                "wrote {} ({} nodes, {} edges, {} citations dropped)",
                dir.display(),
                raw.num_nodes,
                raw.edges.len(),
                dropped
            );
        }
        ConvertSource::Generate { name, out } => {
            let (base, seed) = match name.split_once(':') {
                Some((b, s)) => (b, s.parse::<u64>().context("generator seed")?),
                None => (name.as_str(), 0),
            };
            let spec = match base {
                CORA_SURROGATE => SyntheticSpec::cora_like(seed),
                TOY => SyntheticSpec {
                    name: TOY.into(),
                    seed,
                    ..SyntheticSpec::default()
                },
                other => bail!("no generator named '{other}'"),
            };
            let raw = generate(&spec)?;
            let dir = out.join(base);
            write_raw_dataset(&raw, &dir)?;
            println!("wrote {} ({} nodes, {} edges)", dir.display(), raw.num_nodes, raw.edges.len());
        }
    }
    Ok(())
}

fn eval(data: Option<&Path>, a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ExperimentConfig::default();
    cfg.load.split_seed = a.split_seed;
    let g = open(data, &a.dataset, &cfg)?;
    let report = cmd_eval(&g, &ck)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
