//! `absalign`: abstraction-alignment analysis from the command line.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use absalign_core::metrics::{ConfusionOptions, PairSelection, PreferenceOptions};
use absalign_core::query::{QueryDefaults, DEFAULT_MIN_MASS, DEFAULT_SPLIT_TOLERANCE};
use absalign_core::report::{to_csv, to_json, CsvRows};
use absalign_core::{
    EntropyBase, EvidenceKind, HierarchyFormat, PairMode, PropagationMode, Session, SessionConfig, SubgraphSelector,
    ValueKind,
};

#[derive(Parser)]
#[command(name = "absalign", version, about = "Measure how model outputs align with a concept hierarchy")]
struct Cli {
    /// Worker threads for propagation and metric reduction [default: available cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a hierarchy (and optionally instances and truths)
    Validate {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Write one weighted DAG per instance as JSON Lines
    Propagate {
        #[command(flatten)]
        session: SessionArgs,
        /// Output file [default: standard output]
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Compute an alignment metric
    Metric {
        #[command(subcommand)]
        metric: MetricCommand,
    },
    /// Filter instances by a behavior pattern
    Query {
        /// Conjunction of predicates, e.g. `count(level=2, min_mass=0.1) > 3 && top(level=2) == people`
        query: String,
        #[command(flatten)]
        session: SessionArgs,
        /// Default min_mass for count/split predicates that omit it
        #[arg(long, value_name = "F", default_value_t = DEFAULT_MIN_MASS)]
        min_mass: f64,
        /// Default tolerance for split predicates that omit tol
        #[arg(long, value_name = "F", default_value_t = DEFAULT_SPLIT_TOLERANCE)]
        tol: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Serve the read-only HTTP API (and the UI bundle, if present)
    Serve {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory with the built UI, served at `/`
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MetricCommand {
    /// Fraction of level-FROM errors that are correct at level TO
    Accuracy {
        #[command(flatten)]
        session: SessionArgs,
        #[command(flatten)]
        levels: LevelArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Mean entropy reduction from level FROM to level TO (signed change also reported)
    Uncertainty {
        #[command(flatten)]
        session: SessionArgs,
        #[command(flatten)]
        levels: LevelArgs,
        #[arg(long, value_enum, default_value_t = Base::Two)]
        base: Base,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fraction of instances where max over LEFT strictly exceeds max over RIGHT
    Preference {
        #[command(flatten)]
        session: SessionArgs,
        /// Selector: node:ID, down:ID, up:ID, updown:ID, level:L or all; ID may be @truth or @general
        #[arg(long, value_name = "SELECTOR")]
        left: SubgraphSelector,
        #[arg(long, value_name = "SELECTOR")]
        right: SubgraphSelector,
        /// Compare model-assigned values or propagated aggregates
        #[arg(long, value_enum, default_value_t = ValueKindArg::Aggregate)]
        value_kind: ValueKindArg,
        /// Drop LEFT's nodes from RIGHT before comparing (overlap counts on both sides otherwise)
        #[arg(long)]
        disjoint_right: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Rank node pairs by dataset-normalized pair entropy
    ConceptConfusion {
        #[command(flatten)]
        session: SessionArgs,
        /// co-supported, level:L or explicit:A|B,C|D
        #[arg(long, default_value = "co-supported")]
        pairs: String,
        /// raw is unclamped (single instances may exceed 1); normalized rescales each pair to sum 1
        #[arg(long, value_enum, default_value_t = PairModeArg::Raw)]
        pair_mode: PairModeArg,
        /// Drop ancestor/descendant pairs
        #[arg(long)]
        exclude_related: bool,
        /// Keep only the K best pairs [default: all]
        #[arg(long, value_name = "K")]
        top: Option<usize>,
        #[arg(long, value_enum, default_value_t = Base::Two)]
        base: Base,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fraction of instances whose truth is among the K highest evidence values (ties: smaller id first)
    AccAtK {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long, short = 'k', default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct SessionArgs {
    /// Hierarchy file (.json or .tsv)
    #[arg(long, value_name = "PATH")]
    dag: PathBuf,
    /// Hierarchy format [default: from the file extension]
    #[arg(long, value_enum)]
    dag_format: Option<DagFormat>,
    /// Instance evidence, JSON Lines
    #[arg(long, value_name = "PATH")]
    instances: Option<PathBuf>,
    /// Required evidence kind [default: any]
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    /// Output-to-node mapping for dense evidence; null entries drop that output
    #[arg(long, value_name = "PATH")]
    mapping: Option<PathBuf>,
    /// Ground-truth labels, JSON Lines
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    /// descendant-set sums each node's descendant closure once; literal adds child aggregates and double-counts shared descendants
    #[arg(long, value_enum, default_value_t = Mode::DescendantSet)]
    mode: Mode,
    /// Require dense vectors to sum to 1 within 1e-6 [default: unnormalized accepted]
    #[arg(long)]
    normalized: bool,
    /// Reuse weighted DAGs cached here, keyed by input digests
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct LevelArgs {
    #[arg(long, value_name = "L")]
    from: u32,
    #[arg(long, value_name = "L")]
    to: u32,
    /// Also report per concept at this level, grouping by the truth's ancestor
    #[arg(long, value_name = "L")]
    group_by_level: Option<u32>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file [default: standard output]
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// CSV instead of JSON (columns: metric, params, group, value, support, flags)
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DagFormat {
    Json,
    Tsv,
    Icd9,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dense,
    Sparse,
    Labels,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    DescendantSet,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Base {
    #[value(name = "2")]
    Two,
    #[value(name = "e")]
    E,
}

#[derive(Clone, Copy, ValueEnum)]
enum ValueKindArg {
    Value,
    Aggregate,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairModeArg {
    Raw,
    Normalized,
}

impl From<Base> for EntropyBase {
    fn from(b: Base) -> Self {
        match b {
            Base::Two => EntropyBase::Two,
            Base::E => EntropyBase::E,
        }
    }
}

impl SessionArgs {
    fn config(&self) -> SessionConfig {
        SessionConfig {
            dag_path: self.dag.clone(),
            dag_format: self.dag_format.map(|f| match f {
                DagFormat::Json => HierarchyFormat::Json,
                DagFormat::Tsv => HierarchyFormat::Tsv,
                DagFormat::Icd9 => HierarchyFormat::Icd9,
            }),
            instances_path: self.instances.clone(),
            kind: self.kind.map(|k| match k {
                Kind::Dense => EvidenceKind::Dense,
                Kind::Sparse => EvidenceKind::Sparse,
                Kind::Labels => EvidenceKind::Labels,
            }),
            mapping_path: self.mapping.clone(),
            truth_path: self.truth.clone(),
            mode: match self.mode {
                Mode::DescendantSet => PropagationMode::DescendantSet,
                Mode::Literal => PropagationMode::LiteralChildSum,
            },
            normalized: self.normalized,
            cache_dir: self.cache_dir.clone(),
        }
    }

    fn load(&self, needs_instances: bool) -> Result<Session, String> {
        if needs_instances && self.instances.is_none() {
            return Err("this command needs --instances".into());
        }
        let session = Session::load(&self.config()).map_err(|e| e.to_string())?;
        for w in session.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(session)
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), String> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| format!("stdout: {e}"))
        }
    }
}

fn render<T: serde::Serialize + CsvRows>(report: &T, output: &OutputArgs) -> Result<(), String> {
    let text = if output.csv {
        to_csv(&report.csv_rows())
    } else {
        to_json(report)
    };
    emit(&output.out, &text)
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Validate { session } => {
            let s = session.load(false)?;
            let dag = s.dag();
            println!("{} nodes, {} levels", dag.len(), dag.level_count());
            if session.instances.is_some() {
                let kind = s.evidence_kind().map(|k| k.as_str()).unwrap_or("none");
                println!("{} instances ({kind})", s.records().len());
            }
            if let Some(t) = s.truths() {
                println!("{} truth labels", t.len());
            }
            Ok(())
        }
        Command::Propagate { session, out } => {
            let s = session.load(true)?;
            let mut text = String::new();
            for wd in s.weighted() {
                text.push_str(&wd.to_json_line(s.dag()));
                text.push('\n');
            }
            emit(&out, &text)
        }
        Command::Query {
            query,
            session,
            min_mass,
            tol,
            output,
        } => {
            let s = session.load(true)?;
            let defaults = QueryDefaults {
                min_mass,
                tolerance: tol,
            };
            let result = s.query_with(&query, defaults).map_err(|e| e.to_string())?;
            render(&result, &output)
        }
        Command::Serve {
            session,
            port,
            host,
            static_dir,
        } => {
            let s = Arc::new(session.load(false)?);
            // propagate before accepting requests
            s.weighted();
            let addr = SocketAddr::new(host, port);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            eprintln!("serving on http://{addr}");
            runtime
                .block_on(absalign_server::serve(s, addr, static_dir))
                .map_err(|e| format!("cannot serve on {addr}: {e}"))
        }
        Command::Metric { metric } => run_metric(metric),
    }
}

fn run_metric(metric: MetricCommand) -> Result<(), String> {
    let err = |e: absalign_core::SessionError| e.to_string();
    match metric {
        MetricCommand::Accuracy {
            session,
            levels,
            output,
        } => {
            let s = session.load(true)?;
            render(&s.accuracy(levels.from, levels.to, levels.group_by_level).map_err(err)?, &output)
        }
        MetricCommand::Uncertainty {
            session,
            levels,
            base,
            output,
        } => {
            let s = session.load(true)?;
            let r = s
                .uncertainty(levels.from, levels.to, base.into(), levels.group_by_level)
                .map_err(err)?;
            render(&r, &output)
        }
        MetricCommand::Preference {
            session,
            left,
            right,
            value_kind,
            disjoint_right,
            output,
        } => {
            let s = session.load(true)?;
            let options = PreferenceOptions {
                value_kind: match value_kind {
                    ValueKindArg::Value => ValueKind::Value,
                    ValueKindArg::Aggregate => ValueKind::Aggregate,
                },
                disjoint: disjoint_right,
            };
            render(&s.preference(&left, &right, options).map_err(err)?, &output)
        }
        MetricCommand::ConceptConfusion {
            session,
            pairs,
            pair_mode,
            exclude_related,
            top,
            base,
            output,
        } => {
            let s = session.load(true)?;
            let selection = PairSelection::parse(&pairs, s.dag())?;
            let options = ConfusionOptions {
                pair_mode: match pair_mode {
                    PairModeArg::Raw => PairMode::Raw,
                    PairModeArg::Normalized => PairMode::Normalized,
                },
                exclude_related,
                base: base.into(),
                top,
            };
            render(&s.confusion(&selection, options).map_err(err)?, &output)
        }
        MetricCommand::AccAtK { session, k, output } => {
            let s = session.load(true)?;
            render(&s.acc_at_k(k).map_err(err)?, &output)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
