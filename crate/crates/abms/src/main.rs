//! `abms` — adaptive bandwidth manager CLI.
//!
//! Subcommands: `run` (daemon loop), `once` (single cycle), `simulate`
//! (scenario replay), `check-config` (validate and exit). Event lines go
//! to stdout, diagnostics to stderr. Exit codes: 0 clean stop, 1 usage
//! error, 2 startup validation failure.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{NaiveDateTime, NaiveTime};
use clap::{Args, Parser, Subcommand};

use abms::allocation::AllocationPolicy;
use abms::config_store::ConfigDocument;
use abms::domain_index::MatchMode;
use abms::log_ingest::StatusMode;
use abms::orchestrator::{
    format_event, AllocationEvent, Clock, CycleReport, Engine, ManualClock, RuntimeConfig,
    SystemClock,
};
use abms::simulator::{run_scenario, Scenario};

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 1;
const EXIT_STARTUP: i32 = 2;

#[derive(Parser)]
#[command(
    name = "abms",
    version,
    about = "Adaptive bandwidth manager: rewards educational browsing with more bandwidth"
)]
struct Cli {
    #[command(flatten)]
    opts: CommonOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Squid-native access log to watch.
    #[arg(
        long,
        value_name = "PATH",
        default_value = "/var/squid/logs/access.log"
    )]
    log: PathBuf,

    /// Educational-domain category file, one domain per line.
    #[arg(
        long,
        value_name = "PATH",
        default_value = "shallalist-educational.txt"
    )]
    categories: PathBuf,

    /// Firewall XML config holding the allowedip entries.
    #[arg(long, value_name = "PATH", default_value = "/cf/conf/config.xml")]
    config: PathBuf,

    /// Per-user bandwidth floor in Kbps.
    #[arg(long = "bw-min", value_name = "KBPS", conflicts_with_all = ["tbi", "enu"])]
    bw_min: Option<u64>,

    /// Total institutional bandwidth in Kbps (divided by --enu).
    #[arg(long, value_name = "KBPS", requires = "enu")]
    tbi: Option<u64>,

    /// Estimated number of users (divides --tbi).
    #[arg(long, value_name = "N", requires = "tbi")]
    enu: Option<u64>,

    /// Seconds between poll cycles.
    #[arg(long = "interval", value_name = "SECONDS", default_value_t = 5)]
    interval: u64,

    /// Host matching: label-boundary `suffix` or raw `substring`.
    #[arg(long = "match-mode", value_name = "MODE", default_value = "suffix")]
    match_mode: MatchMode,

    /// Which status-200 records count: `any-200` or `tcp-miss-only`.
    #[arg(long = "status-mode", value_name = "MODE", default_value = "any-200")]
    status_mode: StatusMode,

    /// Local time of day when counters and bandwidth reset.
    #[arg(long = "reset-time", value_name = "HH:MM", default_value = "00:00", value_parser = parse_reset_time)]
    reset_time: NaiveTime,

    /// Leave the access log in place after processing.
    #[arg(long = "no-truncate")]
    no_truncate: bool,

    /// Full pipeline with every filesystem mutation suppressed.
    #[arg(long = "dry-run")]
    dry_run: bool,

    /// Persist per-user counters across restarts at this path.
    #[arg(long = "snapshot", value_name = "PATH")]
    snapshot: Option<PathBuf>,

    /// Shell command to run after each config write.
    #[arg(long = "post-write-hook", value_name = "CMD")]
    post_write_hook: Option<String>,

    /// Pin the clock (YYYY-MM-DDTHH:MM:SS) for reproducible output.
    #[arg(long = "fixed-clock", value_name = "DATETIME", value_parser = parse_fixed_clock)]
    fixed_clock: Option<NaiveDateTime>,
}

#[derive(Subcommand)]
enum Command {
    /// Watch the log and adjust bandwidth until interrupted.
    Run,
    /// Execute a single poll cycle and exit.
    Once,
    /// Generate a synthetic log from a scenario file and replay it.
    Simulate {
        /// Scenario file: seed/time_base/host directives plus user lines.
        #[arg(long, value_name = "PATH")]
        scenario: PathBuf,
        /// Where to leave the generated access log.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Where to write the per-user report (stdout when omitted).
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Validate the firewall config and exit.
    CheckConfig,
}

fn parse_reset_time(s: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(s, "%H:%M").map_err(|_| format!("expected HH:MM, got {s:?}"))
}

fn parse_fixed_clock(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map_err(|_| format!("expected YYYY-MM-DDTHH:MM:SS, got {s:?}"))
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return code;
        }
    };

    match cli.command {
        Command::Run => run_daemon(&cli.opts),
        Command::Once => run_once(&cli.opts),
        Command::Simulate {
            ref scenario,
            ref out,
            ref report,
        } => run_simulate(&cli.opts, scenario, out.as_deref(), report.as_deref()),
        Command::CheckConfig => check_config(&cli.opts),
    }
}

/// Build the policy from the flags; `default_floor` covers subcommands that
/// can run without one.
fn build_policy(opts: &CommonOpts, default_floor: Option<u64>) -> Result<AllocationPolicy, String> {
    let result = match (opts.bw_min, opts.tbi, opts.enu) {
        (Some(bw_min), None, None) => AllocationPolicy::from_bw_min(bw_min),
        (None, Some(tbi), Some(enu)) => AllocationPolicy::from_capacity(tbi, enu),
        (None, None, None) => match default_floor {
            Some(floor) => AllocationPolicy::from_bw_min(floor),
            None => return Err("provide --bw-min or both --tbi and --enu".into()),
        },
        _ => return Err("provide --bw-min or both --tbi and --enu".into()),
    };
    result.map_err(|e| e.to_string())
}

fn build_runtime(opts: &CommonOpts, default_floor: Option<u64>) -> Result<RuntimeConfig, String> {
    let policy = build_policy(opts, default_floor)?;
    if opts.interval < 1 {
        return Err("--interval must be at least 1 second".into());
    }
    let mut runtime = RuntimeConfig::new(policy);
    runtime.log_path = opts.log.clone();
    runtime.category_path = opts.categories.clone();
    runtime.config_path = opts.config.clone();
    runtime.poll_interval_seconds = opts.interval;
    runtime.match_mode = opts.match_mode;
    runtime.status_mode = opts.status_mode;
    runtime.reset_time = opts.reset_time;
    runtime.truncate_log = !opts.no_truncate;
    runtime.dry_run = opts.dry_run;
    runtime.snapshot_path = opts.snapshot.clone();
    runtime.post_write_hook = opts.post_write_hook.clone();
    Ok(runtime)
}

fn make_clock(opts: &CommonOpts) -> Arc<dyn Clock> {
    match opts.fixed_clock {
        Some(instant) => Arc::new(ManualClock::new(instant)),
        None => Arc::new(SystemClock),
    }
}

fn print_events(events: &[AllocationEvent]) {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for event in events {
        match format_event(event) {
            Ok(line) => {
                let _ = writeln!(out, "{line}");
            }
            Err(err) => eprintln!("unformattable event: {err}"),
        }
    }
    let _ = out.flush();
}

fn print_report_diagnostics(report: &CycleReport) {
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    if let Some(err) = &report.deferred_write {
        eprintln!("warning: config write failed, retrying next cycle: {err}");
    }
}

fn start_engine(opts: &CommonOpts, default_floor: Option<u64>) -> Result<Engine, i32> {
    let runtime = match build_runtime(opts, default_floor) {
        Ok(runtime) => runtime,
        Err(msg) => {
            eprintln!("error: {msg}");
            return Err(EXIT_STARTUP);
        }
    };
    match Engine::start(runtime, make_clock(opts)) {
        Ok(started) => {
            for warning in &started.warnings {
                eprintln!("warning: {warning}");
            }
            print_events(&started.events);
            Ok(started.engine)
        }
        Err(err) => {
            eprintln!("error: {err}");
            Err(EXIT_STARTUP)
        }
    }
}

fn run_once(opts: &CommonOpts) -> i32 {
    let mut engine = match start_engine(opts, None) {
        Ok(engine) => engine,
        Err(code) => return code,
    };
    match engine.run_cycle() {
        Ok(report) => {
            print_events(&report.events);
            print_report_diagnostics(&report);
            EXIT_OK
        }
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_STARTUP
        }
    }
}

fn run_daemon(opts: &CommonOpts) -> i32 {
    let mut engine = match start_engine(opts, None) {
        Ok(engine) => engine,
        Err(code) => return code,
    };

    install_stop_handler();
    let interval = Duration::from_secs(engine.runtime().poll_interval_seconds);
    eprintln!(
        "[{}] Running bandwidth manager... press Ctrl-C to stop.",
        chrono::Local::now().format("%m/%d/%Y %I:%M:%S")
    );

    while !stop_requested() {
        match engine.run_cycle() {
            Ok(report) => {
                print_events(&report.events);
                print_report_diagnostics(&report);
            }
            Err(err) => eprintln!("warning: cycle skipped: {err}"),
        }
        // Sleep in slices so a stop request is honored promptly but only
        // between cycles.
        let mut remaining = interval;
        while !stop_requested() && remaining > Duration::ZERO {
            let nap = remaining.min(Duration::from_millis(100));
            std::thread::sleep(nap);
            remaining = remaining.saturating_sub(nap);
        }
    }
    eprintln!("stopped.");
    EXIT_OK
}

fn run_simulate(
    opts: &CommonOpts,
    scenario_path: &std::path::Path,
    out: Option<&std::path::Path>,
    report_path: Option<&std::path::Path>,
) -> i32 {
    let scenario = match Scenario::load(scenario_path) {
        Ok(scenario) => scenario,
        Err(err) => {
            eprintln!("error: {err}");
            return EXIT_STARTUP;
        }
    };

    // The replay owns its log and config; --out keeps the generated log.
    let scratch = std::env::temp_dir();
    let tag = format!("abms-sim-{}", std::process::id());
    let log_path = out
        .map(PathBuf::from)
        .unwrap_or_else(|| scratch.join(format!("{tag}.log")));
    let config_path = scratch.join(format!("{tag}-config.xml"));

    // Replays default to the conventional 512 Kbps floor.
    let runtime = match build_runtime(opts, Some(512)) {
        Ok(mut runtime) => {
            runtime.log_path = log_path.clone();
            runtime.config_path = config_path.clone();
            runtime
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_STARTUP;
        }
    };

    let outcome = run_scenario(&scenario, &runtime);
    let _ = std::fs::remove_file(&config_path);
    if out.is_none() {
        let _ = std::fs::remove_file(&log_path);
    }

    match outcome {
        Ok(report) => {
            print_events(&report.events);
            let rendered = report.render();
            match report_path {
                Some(path) => {
                    if let Err(err) = std::fs::write(path, &rendered) {
                        eprintln!("error: cannot write report: {err}");
                        return EXIT_STARTUP;
                    }
                }
                None => print!("{rendered}"),
            }
            EXIT_OK
        }
        Err(err) => {
            eprintln!("error: {err}");
            EXIT_STARTUP
        }
    }
}

fn check_config(opts: &CommonOpts) -> i32 {
    let raw = match std::fs::read(&opts.config) {
        Ok(raw) => raw,
        Err(err) => {
            eprintln!("error: cannot read {}: {err}", opts.config.display());
            return EXIT_STARTUP;
        }
    };
    match ConfigDocument::parse(raw) {
        Ok(doc) => {
            println!(
                "{}: OK, {} allowedip entries",
                opts.config.display(),
                doc.entries().len()
            );
            EXIT_OK
        }
        Err(err) => {
            eprintln!("error: {}: {err}", opts.config.display());
            EXIT_STARTUP
        }
    }
}

static STOP: AtomicBool = AtomicBool::new(false);

fn stop_requested() -> bool {
    STOP.load(Ordering::Relaxed)
}

#[cfg(unix)]
fn install_stop_handler() {
    extern "C" fn handle_stop(_: libc::c_int) {
        STOP.store(true, Ordering::Relaxed);
    }
    unsafe {
        libc::signal(libc::SIGINT, handle_stop as *const () as libc::sighandler_t);
        libc::signal(
            libc::SIGTERM,
            handle_stop as *const () as libc::sighandler_t,
        );
    }
}

#[cfg(not(unix))]
fn install_stop_handler() {}
