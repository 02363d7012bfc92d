use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cutverify::abstraction::{dataset_bounds, static_bounds, widen, ActivationBounds, IntervalBox};
use cutverify::characterizer::{extract_features, train, Characterizer, TrainConfig};
use cutverify::monitor::check;
use cutverify::network::{Dataset, Network};
use cutverify::stats::{check_premise, estimate_confusion, guarantee, StatsReport};
use cutverify::verifier::{encode, verify_with, Budget, SafetyQuery, Status, VerifyOptions};
use cutverify::Error;
use serde::Serialize;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "cutverify", version, about = "Verify safety of ReLU networks cut at a hidden layer")]
struct Cli {
    /// Seed for every randomized step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Parallel branch-and-bound workers (1 keeps the search order deterministic)
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Write the root LP relaxation of a verification query to this file
    #[arg(long, global = true, value_name = "PATH")]
    debug_lp_dump: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute cut-layer activation bounds from data or by interval propagation
    Bounds(BoundsArgs),
    /// Train a head that flags the input property from cut-layer activations
    TrainCharacterizer(TrainArgs),
    /// Decide a safety query exactly
    Verify(VerifyArgs),
    /// Check a CSV stream on stdin against activation bounds, one JSON report per line
    Monitor(MonitorArgs),
    /// Confusion counts of a characterizer and the resulting guarantee
    Stats(StatsArgs),
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    net: PathBuf,
    /// Input CSV (columns x0..x{d-1}, optional label)
    #[arg(long, required_unless_present = "static_")]
    data: Option<PathBuf>,
    /// Cut position, 1 <= layer < depth
    #[arg(long)]
    layer: usize,
    /// Also record bounds on differences of adjacent neurons
    #[arg(long)]
    diffs: bool,
    /// Relative margin m: each bound v moves outward by m * max(1, |v|)
    #[arg(long, default_value_t = 0.0)]
    widen: f64,
    /// Propagate an input box instead of replaying data
    #[arg(long = "static", id = "static_", requires = "input_box", conflicts_with = "data")]
    static_: bool,
    /// Input box as "lo,hi" applied to every input dimension
    #[arg(long = "box", id = "input_box", value_name = "LO,HI", allow_hyphen_values = true)]
    input_box: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    net: PathBuf,
    /// Labeled input CSV
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Hidden units in the head; 0 trains logistic regression
    #[arg(long, default_value_t = 0)]
    hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    epochs: usize,
    #[arg(long, default_value = "property")]
    property_id: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    net: PathBuf,
    /// Query JSON naming the cut layer, bounds, characterizer and risk condition
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    max_nodes: usize,
    #[arg(long, default_value_t = 600.0)]
    max_seconds: f64,
    /// Include wall time in the report (makes reports differ between runs)
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    bounds: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    /// Rows on stdin are cut-layer activations rather than network inputs
    #[arg(long)]
    activations: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    characterizer: PathBuf,
    /// Labeled evaluation CSV
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    layer: usize,
    /// One minus the confidence of the conservative guarantee
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Query whose risk condition is used to check that missed positives are safe
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Lib(Error),
    Io(PathBuf, io::Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, format!("{text}\n")).map_err(|e| Failure::Io(path.to_path_buf(), e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn parse_box(text: &str, dim: usize) -> CliResult<IntervalBox> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let parsed: Vec<f64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
    match parsed.as_slice() {
        [lo, hi] if parts.len() == 2 => Ok(IntervalBox::uniform(dim, *lo, *hi)?),
        _ => Err(Failure::Usage(format!("--box expects LO,HI, got {text:?}"))),
    }
}

fn cmd_bounds(a: &BoundsArgs) -> CliResult<u8> {
    let net = Network::load(&a.net)?;
    let mut bounds = if a.static_ {
        if a.diffs {
            return Err(Failure::Usage("--diffs needs --data; static bounds carry no difference bounds".into()));
        }
        let text = a.input_box.as_deref().expect("clap enforces --box");
        static_bounds(&net, &parse_box(text, net.input_dim())?, a.layer)?
    } else {
        let data = Dataset::load_csv(a.data.as_ref().expect("clap enforces --data"))?;
        dataset_bounds(&net, &data, a.layer, a.diffs)?
    };
    if a.widen != 0.0 {
        if !(a.widen > 0.0 && a.widen.is_finite()) {
            return Err(Failure::Usage(format!("--widen must be nonnegative, got {}", a.widen)));
        }
        bounds = widen(&bounds, a.widen);
    }
    emit(a.out.as_deref(), &bounds.to_json())?;
    Ok(0)
}

fn cmd_train(a: &TrainArgs, seed: u64) -> CliResult<u8> {
    let net = Network::load(&a.net)?;
    let data = Dataset::load_csv(&a.data)?;
    let features = extract_features(&net, &data, a.layer)?;
    let cfg = TrainConfig {
        hidden_units: a.hidden,
        learning_rate: a.lr,
        max_epochs: a.epochs,
        seed,
    };
    let h = train(&features, &cfg, &a.property_id)?;
    if let Some(acc) = h.achieved_accuracy {
        eprintln!("training accuracy {acc:.6}");
    }
    emit(a.out.as_deref(), &h.to_json())?;
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs, workers: usize, lp_dump: Option<&Path>) -> CliResult<u8> {
    if workers == 0 {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    if a.max_seconds.is_nan() || a.max_seconds <= 0.0 {
        return Err(Failure::Usage(format!("--max-seconds must be positive, got {}", a.max_seconds)));
    }
    let net = Network::load(&a.net)?;
    let query = SafetyQuery::load(&a.query)?;
    if let Some(path) = lp_dump {
        let problem = encode(&net, &query)?;
        fs::write(path, problem.lp.to_string()).map_err(|e| Failure::Io(path.to_path_buf(), e))?;
    }
    let opts = VerifyOptions {
        budget: Budget {
            max_nodes: a.max_nodes,
            max_seconds: a.max_seconds,
        },
        workers,
    };
    let verdict = verify_with(&net, &query, &opts)?;
    let report = verdict.report_json(a.timing);
    if let Some(path) = &a.out {
        fs::write(path, format!("{report}\n")).map_err(|e| Failure::Io(path.clone(), e))?;
    }
    println!("{report}");
    for w in &verdict.warnings {
        eprintln!("warning: {w}");
    }
    if verdict.status == Status::Safe && verdict.conditional {
        eprintln!(
            "note: safe only under dataset-derived bounds; the result holds while the runtime \
             monitor reports every cut-layer activation as contained"
        );
    }
    Ok(match verdict.status {
        Status::Safe => 0,
        Status::Unsafe => 1,
        Status::Unknown => 3,
    })
}

#[derive(Serialize)]
struct RowError<'a> {
    sample_id: String,
    error: &'a str,
}

/// Parses one CSV line; a header is recognized by a non-numeric first line.
fn parse_row(line: &str, width: usize, label_col: Option<usize>) -> Result<Vec<f64>, String> {
    let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
    match label_col {
        Some(i) if i < fields.len() => {
            fields.remove(i);
        }
        None if fields.len() == width + 1 => {
            fields.pop();
        }
        _ => {}
    }
    if fields.len() != width {
        return Err(format!("expected {width} values, got {}", fields.len()));
    }
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| format!("not a number: {f:?}")))
        .collect()
}

fn cmd_monitor(a: &MonitorArgs) -> CliResult<u8> {
    if a.tolerance.is_nan() || a.tolerance < 0.0 {
        return Err(Failure::Usage(format!("--tolerance must be nonnegative, got {}", a.tolerance)));
    }
    let net = Network::load(&a.net)?;
    let bounds = ActivationBounds::load(&a.bounds)?;
    net.check_cut(bounds.layer)?;
    if net.dim_at(bounds.layer) != bounds.dim() {
        return Err(Error::Shape {
            layer: Some(bounds.layer),
            message: format!("bounds cover {} neurons, layer has {}", bounds.dim(), net.dim_at(bounds.layer)),
        }
        .into());
    }
    let width = if a.activations { bounds.dim() } else { net.input_dim() };

    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let stdout_err = |e| Failure::Io(PathBuf::from("<stdout>"), e);
    let mut label_col = None;
    let mut index = 0usize;
    for (n, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(|e| Failure::Io(PathBuf::from("<stdin>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 && line.split(',').any(|f| f.trim().parse::<f64>().is_err()) {
            label_col = line.split(',').position(|f| f.trim() == "label");
            continue;
        }
        let id = index.to_string();
        index += 1;
        let result = parse_row(&line, width, label_col).and_then(|row| {
            let act = if a.activations {
                row
            } else {
                net.forward(&row, 0, bounds.layer).map_err(|e| e.to_string())?
            };
            check(&bounds, &act, a.tolerance).map_err(|e| e.to_string())
        });
        let text = match result {
            Ok(report) => report.with_id(id).to_json(),
            Err(msg) => serde_json::to_string(&RowError {
                sample_id: id,
                error: &msg,
            })
            .expect("row error serializes"),
        };
        writeln!(out, "{text}").map_err(stdout_err)?;
    }
    out.flush().map_err(stdout_err)?;
    Ok(0)
}

fn cmd_stats(a: &StatsArgs) -> CliResult<u8> {
    let net = Network::load(&a.net)?;
    let h = Characterizer::load(&a.characterizer)?;
    let data = Dataset::load_csv(&a.data)?;
    let est = estimate_confusion(&net, &h, a.layer, &data)?;
    let premise = match &a.query {
        Some(path) => {
            let q = SafetyQuery::load(path)?;
            check_premise(&net, &h, a.layer, &data, &q.risk)?
        }
        None => false,
    };
    let g = guarantee(&est, a.delta, premise)?;
    emit(a.out.as_deref(), &StatsReport::new(&est, &g).to_json())?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bounds(a) => cmd_bounds(a),
        Command::TrainCharacterizer(a) => cmd_train(a, cli.seed),
        Command::Verify(a) => cmd_verify(a, cli.workers, cli.debug_lp_dump.as_deref()),
        Command::Monitor(a) => cmd_monitor(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { EXIT_INPUT } else { EXIT_NUMERICAL })
        }
        Err(Failure::Io(path, e)) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
