use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use spgm::format::{load_mixture, save_mixture, write_text};
use spgm::independence::independence_query;
use spgm::learn::WeightMode;
use spgm::oracle::{enumerate_subtrees, DEFAULT_SUBTREE_LIMIT};
use spgm::spn::{compile, emit_circuit};
use spgm::workflow::{train, RunConfig};
use spgm::{load_dataset, log_likelihood, Dataset, Domain, Evaluator, Evidence, Spgm, VarKind};

#[derive(Parser)]
#[command(name = "spgm", version, about = "Train, evaluate and query sum-product graphical models")]
struct Cli {
    /// Worker threads (default: all cores). `--threads 1` is bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a mixture of SPGMs on a dataset and report its log-likelihoods.
    Train(TrainArgs),
    /// Mean and total log-likelihood of a model on a data split.
    Eval(EvalArgs),
    /// Marginal, MAP or independence query against a model.
    Query(QueryArgs),
    /// Compile a model to a sum-product network circuit.
    CompileSpn(CompileArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding `<name>.ts.data`, `<name>.valid.data`, `<name>.test.data`.
    #[arg(long, env = "SPGM_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset base name, e.g. `nltcs`.
    dataset: String,
    #[command(flatten)]
    data: DataArgs,
    /// Where to write the trained mixture.
    #[arg(long, short)]
    out: PathBuf,
    /// Also append the metrics line to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    max_insertions: usize,
    #[arg(long, default_value_t = 10)]
    mixture_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `mi-proportional` or `em`.
    #[arg(long, default_value_t = WeightMode::MiProportional)]
    weight_mode: WeightMode,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Run parameter fine-tuning after mixture EM.
    #[arg(long, default_value_t = false)]
    fine_tune: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Table,
}

#[derive(Args)]
struct EvalArgs {
    /// Model or mixture file.
    model: PathBuf,
    /// A single data file to score.
    #[arg(long, conflicts_with_all = ["dataset", "split"])]
    file: Option<PathBuf>,
    /// Dataset base name, scored from the data directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Args)]
struct QueryArgs {
    /// Model or mixture file.
    model: PathBuf,
    /// `marginal A=0,B=1`, `map A=1`, or `indep A B [given C] [context Z=0,...]`.
    #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
    query: Vec<String>,
}

#[derive(Args)]
struct CompileArgs {
    /// Model or mixture file.
    model: PathBuf,
    /// Where to write the circuit.
    #[arg(long, short)]
    out: PathBuf,
    /// Largest subtree count to enumerate for the report.
    #[arg(long, default_value_t = DEFAULT_SUBTREE_LIMIT)]
    subtree_limit: usize,
}

fn data_dir(args: &DataArgs) -> Result<&Path> {
    args.data_dir
        .as_deref()
        .context("no data directory: pass --data-dir or set SPGM_DATA_DIR")
}

fn run_train(args: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let dir = data_dir(&args.data)?;
    let triple = load_dataset(dir, &args.dataset)?;
    let config = RunConfig {
        max_insertions: args.max_insertions,
        mixture_size: args.mixture_size,
        alpha: args.alpha,
        seed: args.seed,
        weight_mode: args.weight_mode,
        tol: args.tol,
        max_iters: args.max_iters,
        fine_tune: args.fine_tune,
        threads,
    };
    let start = Instant::now();
    let outcome = train(&triple, &config)?;
    let elapsed = start.elapsed().as_secs_f64();
    save_mixture(&outcome.mixture, &args.out)?;
    let line = outcome.metrics.to_json_line();
    if let Some(path) = &args.metrics {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{line}")?;
    }
    println!("{line}");
    eprintln!("wall time {elapsed:.2}s");
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let mixture = load_mixture(&args.model)?;
    let (source, data) = match (&args.file, &args.dataset) {
        (Some(file), _) => (file.display().to_string(), Dataset::load(file)?),
        (None, Some(name)) => {
            let triple = load_dataset(data_dir(&args.data)?, name)?;
            let (label, split) = match args.split {
                Split::Train => ("train", triple.train),
                Split::Valid => ("valid", triple.valid),
                Split::Test => ("test", triple.test),
            };
            (format!("{name}.{label}"), split)
        }
        (None, None) => bail!("pass --file or --dataset"),
    };
    let ll = log_likelihood(&mixture, &data)?;
    match args.format {
        OutputFormat::Json => {
            let out = json!({
                "model": args.model.display().to_string(),
                "data": source,
                "rows": data.len(),
                "mean_ll": ll.mean,
                "total_ll": ll.total,
            });
            println!("{out}");
        }
        OutputFormat::Table => {
            println!("{:<10} {}", "model", args.model.display());
            println!("{:<10} {source}", "data");
            println!("{:<10} {}", "rows", data.len());
            println!("{:<10} {:.6}", "mean LL", ll.mean);
            println!("{:<10} {:.6}", "total LL", ll.total);
        }
    }
    Ok(())
}

fn var_id(spgm: &Spgm, name: &str) -> Result<spgm::VarId> {
    spgm.var_by_name(name)
        .with_context(|| format!("unknown variable `{name}`"))
}

fn assignment_json(spgm: &Spgm, ev: &Evidence) -> Value {
    let mut map = Map::new();
    for (var, state) in ev.iter() {
        map.insert(spgm.variables()[var.0].name.clone(), json!(state));
    }
    Value::Object(map)
}

fn query(spgm: &Spgm, words: &[&str]) -> Result<Value> {
    let Some((&kind, rest)) = words.split_first() else {
        bail!("empty query");
    };
    match kind {
        "marginal" => {
            let ev = Evidence::parse(spgm, &rest.join(" "))?;
            let p = Evaluator::new(spgm)?.evaluate(&ev, Domain::Linear)?;
            Ok(json!({"query": "marginal", "evidence": ev.display(spgm), "probability": p}))
        }
        "map" => {
            let ev = Evidence::parse(spgm, &rest.join(" "))?;
            let (value, argmax) = Evaluator::new(spgm)?.map_assignment(&ev)?;
            Ok(json!({
                "query": "map",
                "evidence": ev.display(spgm),
                "value": value,
                "assignment": assignment_json(spgm, &argmax),
            }))
        }
        "indep" => {
            let (a, b, tail) = match rest {
                [a, b, tail @ ..] => (var_id(spgm, a)?, var_id(spgm, b)?, tail),
                _ => bail!("usage: indep A B [given C] [context Z=v,...]"),
            };
            let mut given = None;
            let mut context = Evidence::new();
            let mut tail = tail;
            while let Some((&word, more)) = tail.split_first() {
                match (word, more) {
                    ("given", [c, more @ ..]) if given.is_none() => {
                        given = Some(var_id(spgm, c)?);
                        tail = more;
                    }
                    ("context", more) if !more.is_empty() => {
                        context = Evidence::parse(spgm, &more.join(" "))?;
                        tail = &[];
                    }
                    _ => bail!("malformed independence query near `{word}`"),
                }
            }
            let answer = independence_query(spgm, a, b, given, &context)?;
            Ok(json!({
                "query": "indep",
                "independent": answer.independent,
                "path_criterion": answer.path_criterion,
                "surviving_paths": answer.surviving_paths as u64,
                "unblocked_paths": answer.unblocked_paths as u64,
            }))
        }
        other => bail!("unknown query `{other}`; expected marginal, map or indep"),
    }
}

fn run_query(args: &QueryArgs) -> Result<()> {
    let spgm = load_mixture(&args.model)?.merged()?;
    let joined = args.query.join(" ");
    let words: Vec<&str> = joined.split_whitespace().collect();
    println!("{}", query(&spgm, &words)?);
    Ok(())
}

fn run_compile(args: &CompileArgs) -> Result<()> {
    let spgm = load_mixture(&args.model)?.merged()?;
    let spn = compile(&spgm)?;
    write_text(&args.out, &emit_circuit(&spn))?;
    let subtrees = match enumerate_subtrees(&spgm, args.subtree_limit) {
        Ok(s) => json!(s.len()),
        Err(spgm::Error::SubtreeLimit { .. }) => Value::Null,
        Err(e) => return Err(e.into()),
    };
    let out = json!({
        "circuit": args.out.display().to_string(),
        "nodes": spn.nodes().len(),
        "edges": spn.edge_count(),
        "share_groups": spn.share_groups().len(),
        "x_indicators": spn.count_indicators_of(VarKind::Model),
        "z_indicators": spn.count_indicators_of(VarKind::Context),
        "subtrees": subtrees,
    });
    println!("{out}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Train(args) => run_train(args, cli.threads),
        Command::Eval(args) => run_eval(args),
        Command::Query(args) => run_query(args),
        Command::CompileSpn(args) => run_compile(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
