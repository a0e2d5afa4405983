use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mustprobe::reporting::{self, aggregate_all, render_table, www_differential, ReportError, Run};
use mustprobe::run::{self, Mode, RunConfig, RunError};
use mustprobe::suite::{Direction, Packet, ProbeExchange};
use mustprobe::targets::{self, TargetSpec};
use mustprobe::TestId;

#[derive(Parser)]
#[command(name = "mustprobe", version, about = "Probe TCP stacks and paths for conformance to mandatory behavior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the test suite against real targets or a simulated topology.
    Scan(ScanArgs),
    /// Render results of a stored run.
    Report(ReportArgs),
    /// Target list utilities.
    Targets {
        #[command(subcommand)]
        command: TargetsCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Scan,
    Sim,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Target CSV (`addr,port,key=value...`).
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Simulated topology (TOML).
    #[arg(long)]
    topology: Option<PathBuf>,
    /// One CIDR per line. Mandatory for SCAN.
    #[arg(long)]
    blacklist: Option<PathBuf>,
    /// Accept a blacklist file without entries.
    #[arg(long)]
    allow_empty_blacklist: bool,
    /// Comma-separated test names; all tests by default.
    #[arg(long, value_delimiter = ',')]
    tests: Vec<TestId>,
    /// Packets per second over all workers.
    #[arg(long)]
    rate: Option<u32>,
    #[arg(long)]
    burst: Option<u32>,
    /// Targets probed concurrently.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scanner source address (SCAN).
    #[arg(long)]
    source: Option<Ipv4Addr>,
    /// Sample at most this many targets per group label.
    #[arg(long)]
    group_cap: Option<usize>,
    #[arg(long)]
    group_key: Option<String>,
    /// Log every raw frame to frames.log (SCAN).
    #[arg(long)]
    frame_log: bool,
    /// TOML run configuration; its keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory.
    #[arg(long = "run")]
    run_dir: PathBuf,
    #[command(subcommand)]
    kind: ReportKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Jsonl,
    Csv,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Per-dataset UNK / F_Target / F_Path percentages.
    Table,
    /// Conformance differences between www and bare domain targets.
    Www,
    /// Frames of one stored exchange.
    Evidence {
        /// `addr:port`
        target: SocketAddrV4,
        /// Test name, or `liveness`.
        test: String,
    },
    /// All result records.
    Export {
        #[arg(long, value_enum, default_value = "jsonl")]
        format: ExportFormat,
        /// Output file; stdout by default.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TargetsCommand {
    /// Dedup, sample and blacklist-filter a target list.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        blacklist: Option<PathBuf>,
        #[arg(long)]
        group_cap: Option<usize>,
        #[arg(long, default_value = targets::DEFAULT_GROUP_KEY)]
        group_key: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    /// The reader went away, as with `| head`; not worth complaining about.
    fn broken_pipe() -> Failure {
        Failure { code: 0, message: String::new() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { source, .. } if source.kind() == io::ErrorKind::BrokenPipe => Failure::broken_pipe(),
            ReportError::RunNotFound(_) => Failure { code: 2, message: e.to_string() },
            _ => Failure { code: 1, message: e.to_string() },
        }
    }
}

impl From<targets::TargetsError> for Failure {
    fn from(e: targets::TargetsError) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::broken_pipe();
        }
        Failure { code: 1, message: e.to_string() }
    }
}

fn run_config(args: ScanArgs) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::default();
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Scan => Mode::Scan,
            ModeArg::Sim => Mode::Sim,
        };
    }
    cfg.targets = args.targets.or(cfg.targets);
    cfg.topology = args.topology.or(cfg.topology);
    cfg.blacklist = args.blacklist.or(cfg.blacklist);
    cfg.allow_empty_blacklist |= args.allow_empty_blacklist;
    if !args.tests.is_empty() {
        cfg.tests = args.tests;
    }
    cfg.rate_pps = args.rate.unwrap_or(cfg.rate_pps);
    cfg.burst = args.burst.unwrap_or(cfg.burst);
    cfg.parallelism = args.parallelism.unwrap_or(cfg.parallelism);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.out = args.out.unwrap_or(cfg.out);
    cfg.source_addr = args.source.or(cfg.source_addr);
    cfg.group_cap = args.group_cap.or(cfg.group_cap);
    cfg.group_key = args.group_key.unwrap_or(cfg.group_key);
    cfg.frame_log |= args.frame_log;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg = cfg.overlay_toml(&text)?;
    }
    Ok(cfg)
}

fn cmd_scan(args: ScanArgs) -> Result<(), Failure> {
    let cfg = run_config(args)?;
    let summary = run::execute(&cfg)?;
    let meta = &summary.meta;
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "run {}: {} targets, {} reachable, {} rejected, {} blacklisted",
        meta.run_id, meta.n_targets, summary.n_alive, summary.n_rejected, summary.n_blacklisted
    )?;
    match &summary.aggregate {
        Some(rows) => write!(out, "{}", render_table(rows))?,
        None => writeln!(out, "no reachable targets")?,
    }
    writeln!(out, "results in {}", cfg.out.display())?;
    Ok(())
}

fn dump_exchange(ex: &ProbeExchange, mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{} against {}", ex.test.name(), ex.target)?;
    for f in &ex.frames {
        let dir = match f.direction {
            Direction::Sent => "->",
            Direction::Received => "<-",
        };
        let stage = serde_json::to_string(&f.stage).unwrap_or_default();
        match &f.packet {
            Packet::Tcp { segment, fan } => {
                let bytes = segment.serialize().map(hex::encode).unwrap_or_else(|e| format!("<{e}>"));
                let tag = if *fan { " fan" } else { "" };
                writeln!(out, "{:>12} {:<14} {dir} tcp{tag}  {}", f.at_us, stage.trim_matches('"'), segment.summary())?;
                writeln!(out, "{:>12} {bytes}", "")?;
            }
            Packet::Icmp { source, bytes } => {
                writeln!(out, "{:>12} {:<14} {dir} icmp from {source}", f.at_us, stage.trim_matches('"'))?;
                writeln!(out, "{:>12} {bytes}", "")?;
            }
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let run = Run::open(&args.run_dir)?;
    let stdout = io::stdout();
    match args.kind {
        ReportKind::Table => {
            let rows = aggregate_all(&run.records, &run.targets)?;
            let mut out = stdout.lock();
            if !run.meta.complete {
                writeln!(out, "(partial run)")?;
            }
            write!(out, "{}", render_table(&rows))?;
        }
        ReportKind::Www => {
            let specs: Vec<TargetSpec> = run.targets.iter().map(|t| t.target.clone()).collect();
            let pairs = targets::pair_www(&specs);
            write!(stdout.lock(), "{}", www_differential(&run.records, &pairs))?;
        }
        ReportKind::Evidence { target, test } => {
            let test = if test.eq_ignore_ascii_case("liveness") {
                None
            } else {
                Some(test.parse::<TestId>().map_err(|m| Failure { code: 2, message: m })?)
            };
            let ex = run.evidence(*target.ip(), target.port(), test)?;
            dump_exchange(&ex, stdout.lock())?;
        }
        ReportKind::Export { format, output } => {
            let sink: Box<dyn Write> = match &output {
                Some(path) => Box::new(BufWriter::new(File::create(path)?)),
                None => Box::new(stdout.lock()),
            };
            match format {
                ExportFormat::Jsonl => reporting::export_jsonl(&run.records, sink)?,
                ExportFormat::Csv => reporting::export_csv(&run.records, sink)?,
            }
        }
    }
    Ok(())
}

fn cmd_prepare(
    input: &Path,
    output: &Path,
    blacklist: Option<&Path>,
    group_cap: Option<usize>,
    group_key: &str,
    seed: u64,
) -> Result<(), Failure> {
    if group_cap == Some(0) {
        return Err(Failure { code: 2, message: "group cap must be positive".into() });
    }
    let loaded = targets::load_targets(input)?;
    for r in &loaded.rejects {
        eprintln!("{}:{}: {}", input.display(), r.line, r.reason);
    }
    let list = match group_cap {
        Some(cap) => targets::dedup_and_sample(loaded.targets, group_key, cap, seed),
        None => targets::dedup(loaded.targets),
    };
    let nets = match blacklist {
        Some(p) => targets::load_blacklist(p)?,
        None => Vec::new(),
    };
    let (kept, removed) = targets::apply_blacklist(list, &nets);
    targets::write_targets(&kept, BufWriter::new(File::create(output)?))?;
    writeln!(
        io::stdout().lock(),
        "{} kept, {} blacklisted, {} rejected",
        kept.len(),
        removed.len(),
        loaded.rejects.len()
    )?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Scan(args) => cmd_scan(args),
        Command::Report(args) => cmd_report(args),
        Command::Targets {
            command: TargetsCommand::Prepare { input, output, blacklist, group_cap, group_key, seed },
        } => cmd_prepare(&input, &output, blacklist.as_deref(), group_cap, &group_key, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.code == 0 => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mustprobe: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
