//! The control loop: poll the log, update counters, recompute allocations,
//! rewrite the config, emit event lines, truncate the log, reset daily.
//!
//! One [`Engine`] owns all mutable state. Each cycle is transactional
//! toward the config file: mutations happen on a working copy and are only
//! committed once the backup and atomic write succeed; a failed write
//! discards the copy while the counters stay put, so the next cycle
//! recomputes and retries the same allocations.

mod clock;

pub use clock::{Clock, ManualClock, SystemClock};

use std::collections::BTreeSet;
use std::io;
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{NaiveDateTime, NaiveTime};
use thiserror::Error;

use crate::allocation::AllocationPolicy;
use crate::config_store::{self, ApplyOutcome, BandwidthChange, ConfigDocument, UnchangedReason};
use crate::domain_index::{CategoryIndex, LoadError, MatchMode};
use crate::log_ingest::{self, StatusMode};
use crate::usage_stats::StatsTable;

/// Everything the daemon needs to run, validated before the first cycle.
#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub log_path: PathBuf,
    pub category_path: PathBuf,
    pub config_path: PathBuf,
    pub poll_interval_seconds: u64,
    pub policy: AllocationPolicy,
    pub match_mode: MatchMode,
    pub status_mode: StatusMode,
    /// Local time of day at which counters and bandwidth reset.
    pub reset_time: NaiveTime,
    pub truncate_log: bool,
    pub dry_run: bool,
    pub snapshot_path: Option<PathBuf>,
    pub post_write_hook: Option<String>,
    /// Clamp out-of-range entries to the floor at startup.
    pub sanitize_on_start: bool,
    pub backup_retain: usize,
}

impl RuntimeConfig {
    /// Spec defaults around a given policy; paths are the conventional
    /// proxy/firewall locations and can be overridden field by field.
    pub fn new(policy: AllocationPolicy) -> Self {
        Self {
            log_path: PathBuf::from("/var/squid/logs/access.log"),
            category_path: PathBuf::from("shallalist-educational.txt"),
            config_path: PathBuf::from("/cf/conf/config.xml"),
            poll_interval_seconds: 5,
            policy,
            match_mode: MatchMode::Suffix,
            status_mode: StatusMode::Any200,
            reset_time: NaiveTime::from_hms_opt(0, 0, 0).expect("valid time"),
            truncate_log: true,
            dry_run: false,
            snapshot_path: None,
            post_write_hook: None,
            sanitize_on_start: true,
            backup_retain: 10,
        }
    }

    fn validate(&self) -> Result<(), StartupError> {
        if self.poll_interval_seconds < 1 {
            return Err(StartupError::InvalidRuntime(
                "poll interval must be at least 1 second".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Increased,
    Decreased,
}

impl Direction {
    fn for_change(old: u64, new: u64) -> Self {
        if new > old {
            Direction::Increased
        } else {
            Direction::Decreased
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Increased => "increased",
            Direction::Decreased => "decreased",
        }
    }
}

/// One applied bandwidth change, ready for formatting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationEvent {
    pub timestamp: NaiveDateTime,
    pub ip: Ipv4Addr,
    pub old_bw: u64,
    pub new_bw: u64,
    pub direction: Direction,
    /// True when a dry run suppressed the actual write.
    pub simulated: bool,
}

impl AllocationEvent {
    fn from_change(timestamp: NaiveDateTime, change: BandwidthChange, simulated: bool) -> Self {
        Self {
            timestamp,
            ip: change.ip,
            old_bw: change.old,
            new_bw: change.new,
            direction: Direction::for_change(change.old, change.new),
            simulated,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventFormatError {
    #[error("event for {ip} has equal old and new bandwidth ({bw} Kbps)")]
    NoChange { ip: Ipv4Addr, bw: u64 },
    #[error("event for {ip} has direction inconsistent with its values")]
    InconsistentDirection { ip: Ipv4Addr },
}

/// Render one event line:
/// `[MM/DD/YYYY hh:mm:ss] IP increased from 512Kbps to 922Kbps.`
/// (12-hour clock, zero-padded fields, single spaces, trailing period).
pub fn format_event(event: &AllocationEvent) -> Result<String, EventFormatError> {
    if event.old_bw == event.new_bw {
        return Err(EventFormatError::NoChange {
            ip: event.ip,
            bw: event.old_bw,
        });
    }
    if event.direction != Direction::for_change(event.old_bw, event.new_bw) {
        return Err(EventFormatError::InconsistentDirection { ip: event.ip });
    }
    Ok(format!(
        "[{}] {} {} from {}Kbps to {}Kbps.",
        event.timestamp.format("%m/%d/%Y %I:%M:%S"),
        event.ip,
        event.direction.as_str(),
        event.old_bw,
        event.new_bw,
    ))
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("invalid runtime configuration: {0}")]
    InvalidRuntime(String),
    #[error(transparent)]
    Category(#[from] LoadError),
    #[error("cannot read config file {path}: {source}")]
    ConfigIo { path: PathBuf, source: io::Error },
    #[error("config file {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        source: config_store::ParseError,
    },
    #[error("startup sanitization could not write the config: {0}")]
    Sanitize(io::Error),
}

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("cannot read access log: {0}")]
    LogRead(io::Error),
}

/// What one cycle did.
#[derive(Debug, Default)]
pub struct CycleReport {
    pub events: Vec<AllocationEvent>,
    pub records_read: usize,
    pub malformed_lines: u64,
    pub host_failures: u64,
    pub truncated: bool,
    pub reset_performed: bool,
    /// Set when the config write failed; mutations were discarded and the
    /// counters retained, so the next cycle retries.
    pub deferred_write: Option<io::Error>,
    pub warnings: Vec<String>,
}

/// Result of [`Engine::start`]: the engine plus whatever startup
/// sanitization emitted.
pub struct Started {
    pub engine: Engine,
    pub events: Vec<AllocationEvent>,
    pub warnings: Vec<String>,
}

pub struct Engine {
    runtime: RuntimeConfig,
    clock: Arc<dyn Clock>,
    index: CategoryIndex,
    stats: StatsTable,
    doc: ConfigDocument,
    log_offset: u64,
    last_reset: NaiveDateTime,
    warned_unknown: BTreeSet<Ipv4Addr>,
    /// IPs whose last recomputed allocation failed to persist.
    pending_retry: BTreeSet<Ipv4Addr>,
}

impl Engine {
    /// Load inputs, restore the optional snapshot, and sanitize the config
    /// so every entry starts within `[bw_min, 2*bw_min]`.
    pub fn start(runtime: RuntimeConfig, clock: Arc<dyn Clock>) -> Result<Started, StartupError> {
        runtime.validate()?;
        let index = CategoryIndex::load(&runtime.category_path)?;
        let raw = std::fs::read(&runtime.config_path).map_err(|source| StartupError::ConfigIo {
            path: runtime.config_path.clone(),
            source,
        })?;
        let doc = ConfigDocument::parse(raw).map_err(|source| StartupError::ConfigParse {
            path: runtime.config_path.clone(),
            source,
        })?;

        let now = clock.now_local();
        let mut warnings = Vec::new();
        let stats = match restore_snapshot(&runtime, now, &mut warnings) {
            Some(table) => table,
            None => StatsTable::new(now.date()),
        };

        let mut engine = Engine {
            runtime,
            clock,
            index,
            stats,
            doc,
            log_offset: 0,
            last_reset: now,
            warned_unknown: BTreeSet::new(),
            pending_retry: BTreeSet::new(),
        };

        let events = if engine.runtime.sanitize_on_start {
            engine.sanitize_config().map_err(StartupError::Sanitize)?
        } else {
            Vec::new()
        };

        Ok(Started {
            engine,
            events,
            warnings,
        })
    }

    pub fn runtime(&self) -> &RuntimeConfig {
        &self.runtime
    }

    pub fn stats(&self) -> &StatsTable {
        &self.stats
    }

    pub fn config(&self) -> &ConfigDocument {
        &self.doc
    }

    pub fn category_index(&self) -> &CategoryIndex {
        &self.index
    }

    /// Assign the floor to any entry whose cap fell outside
    /// `[bw_min, 2*bw_min]`, then persist if anything changed.
    fn sanitize_config(&mut self) -> io::Result<Vec<AllocationEvent>> {
        let bw_min = self.runtime.policy.bw_min();
        let ceiling = self.runtime.policy.ceiling();
        let out_of_range: Vec<Ipv4Addr> = self
            .doc
            .entries()
            .iter()
            .filter(|e| e.bw_down < bw_min || e.bw_down > ceiling)
            .map(|e| e.ip)
            .collect();
        if out_of_range.is_empty() {
            return Ok(Vec::new());
        }

        let mut work = self.doc.clone();
        let mut changes = Vec::new();
        for ip in out_of_range {
            if let ApplyOutcome::Changed(change) = work.apply_bandwidth(ip, bw_min) {
                changes.push(change);
            }
        }
        if !self.runtime.dry_run {
            config_store::backup_config(
                &self.runtime.config_path,
                self.clock.now_utc(),
                self.runtime.backup_retain,
            )?;
            config_store::write_config(&work, &self.runtime.config_path)?;
            self.run_post_write_hook();
        }
        self.doc = work;
        let now = self.clock.now_local();
        let simulated = self.runtime.dry_run;
        Ok(changes
            .into_iter()
            .map(|c| AllocationEvent::from_change(now, c, simulated))
            .collect())
    }

    /// One poll cycle: reset if due, read new log records, classify and
    /// count them, recompute allocations, persist changes, truncate the
    /// consumed log. In a dry run everything happens except the backup,
    /// write, truncation, and snapshot.
    pub fn run_cycle(&mut self) -> Result<CycleReport, CycleError> {
        let mut report = CycleReport::default();
        let mut backup_done = false;

        self.maybe_daily_reset(&mut backup_done, &mut report);

        let batch = log_ingest::read_new_records(&self.runtime.log_path, self.log_offset)
            .map_err(CycleError::LogRead)?;
        report.records_read = batch.records.len();
        report.malformed_lines = batch.malformed;

        let mut touched: BTreeSet<Ipv4Addr> = std::mem::take(&mut self.pending_retry);
        for record in &batch.records {
            if !log_ingest::is_countable_with(record, self.runtime.status_mode) {
                continue;
            }
            match log_ingest::extract_host(&record.url) {
                Ok(host) => {
                    let educational = self.index.is_educational(&host, self.runtime.match_mode);
                    self.stats.accumulate(record.client_ip, educational);
                    touched.insert(record.client_ip);
                }
                Err(_) => report.host_failures += 1,
            }
        }

        let mut work = self.doc.clone();
        let mut changes = Vec::new();
        for &ip in &touched {
            let Some(user) = self.stats.get(ip) else {
                continue; // retry entry wiped by the daily reset
            };
            let bw = self
                .runtime
                .policy
                .allocation_for(user.nes, user.tsa)
                .expect("counters maintain nes <= tsa");
            match work.apply_bandwidth(ip, bw) {
                ApplyOutcome::Changed(change) => changes.push(change),
                ApplyOutcome::Unchanged(UnchangedReason::IpUnknown) => {
                    if self.warned_unknown.insert(ip) {
                        report.warnings.push(format!(
                            "no allowedip entry for {ip}; skipping until tomorrow"
                        ));
                    }
                }
                ApplyOutcome::Unchanged(UnchangedReason::AlreadySet) => {}
            }
        }

        let mut write_failed = false;
        if changes.is_empty() {
            // Nothing to persist; any retries left over are resolved.
        } else if self.runtime.dry_run {
            self.doc = work;
            let now = self.clock.now_local();
            report.events.extend(
                changes
                    .into_iter()
                    .map(|c| AllocationEvent::from_change(now, c, true)),
            );
        } else {
            match self.persist(&work, &mut backup_done) {
                Ok(()) => {
                    self.doc = work;
                    let now = self.clock.now_local();
                    report.events.extend(
                        changes
                            .into_iter()
                            .map(|c| AllocationEvent::from_change(now, c, false)),
                    );
                }
                Err(err) => {
                    write_failed = true;
                    self.pending_retry = touched;
                    report.deferred_write = Some(err);
                }
            }
        }

        // Empty the log only when this cycle consumed it completely and
        // nothing arrived since; a trailing partial line blocks truncation.
        if self.runtime.truncate_log && !self.runtime.dry_run && !write_failed {
            match self.try_truncate(batch.offset) {
                Ok(truncated) => {
                    report.truncated = truncated;
                    self.log_offset = if truncated { 0 } else { batch.offset };
                }
                Err(err) => {
                    report
                        .warnings
                        .push(format!("log truncation failed: {err}"));
                    self.log_offset = batch.offset;
                }
            }
        } else {
            self.log_offset = batch.offset;
        }

        if !self.runtime.dry_run {
            self.save_snapshot(&mut report.warnings);
        }

        Ok(report)
    }

    /// Reset counters and return every entry to the floor once the clock
    /// crosses the configured reset time. A failed write defers the whole
    /// reset to the next cycle.
    fn maybe_daily_reset(&mut self, backup_done: &mut bool, report: &mut CycleReport) {
        let now = self.clock.now_local();
        let reset_point = if now.time() >= self.runtime.reset_time {
            now.date().and_time(self.runtime.reset_time)
        } else {
            match now.date().pred_opt() {
                Some(yesterday) => yesterday.and_time(self.runtime.reset_time),
                None => return,
            }
        };
        if self.last_reset >= reset_point {
            return;
        }

        let bw_min = self.runtime.policy.bw_min();
        let ips: Vec<Ipv4Addr> = self.doc.entries().iter().map(|e| e.ip).collect();
        let mut work = self.doc.clone();
        let mut changes = Vec::new();
        for ip in ips {
            if let ApplyOutcome::Changed(change) = work.apply_bandwidth(ip, bw_min) {
                changes.push(change);
            }
        }

        if !changes.is_empty() && !self.runtime.dry_run {
            if let Err(err) = self.persist(&work, backup_done) {
                report
                    .warnings
                    .push(format!("daily reset deferred, config write failed: {err}"));
                return;
            }
        }

        self.doc = work;
        self.stats.reset_all(now.date());
        self.last_reset = now;
        self.warned_unknown.clear();
        self.pending_retry.clear();
        report.reset_performed = true;
        let simulated = self.runtime.dry_run;
        report.events.extend(
            changes
                .into_iter()
                .map(|c| AllocationEvent::from_change(now, c, simulated)),
        );
    }

    /// Back up (once per cycle) and atomically write the config.
    fn persist(&self, work: &ConfigDocument, backup_done: &mut bool) -> io::Result<()> {
        if !*backup_done {
            config_store::backup_config(
                &self.runtime.config_path,
                self.clock.now_utc(),
                self.runtime.backup_retain,
            )?;
            *backup_done = true;
        }
        config_store::write_config(work, &self.runtime.config_path)?;
        self.run_post_write_hook();
        Ok(())
    }

    fn run_post_write_hook(&self) {
        let Some(cmd) = &self.runtime.post_write_hook else {
            return;
        };
        match std::process::Command::new("sh").arg("-c").arg(cmd).status() {
            Ok(status) if status.success() => {}
            Ok(status) => eprintln!("post-write hook exited with {status}"),
            Err(err) => eprintln!("post-write hook failed to run: {err}"),
        }
    }

    fn try_truncate(&self, consumed: u64) -> io::Result<bool> {
        if consumed == 0 {
            return Ok(false);
        }
        let len = std::fs::metadata(&self.runtime.log_path)?.len();
        if len != consumed {
            return Ok(false);
        }
        let file = std::fs::OpenOptions::new()
            .write(true)
            .open(&self.runtime.log_path)?;
        file.set_len(0)?;
        Ok(true)
    }

    fn save_snapshot(&self, warnings: &mut Vec<String>) {
        let Some(path) = &self.runtime.snapshot_path else {
            return;
        };
        if let Err(err) = std::fs::write(path, self.stats.snapshot()) {
            warnings.push(format!("could not save counter snapshot: {err}"));
        }
    }
}

/// Use a snapshot only if it parses and belongs to the current day.
fn restore_snapshot(
    runtime: &RuntimeConfig,
    now: NaiveDateTime,
    warnings: &mut Vec<String>,
) -> Option<StatsTable> {
    let path = runtime.snapshot_path.as_ref()?;
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) if err.kind() == io::ErrorKind::NotFound => return None,
        Err(err) => {
            warnings.push(format!(
                "ignoring unreadable snapshot {}: {err}",
                path.display()
            ));
            return None;
        }
    };
    match StatsTable::restore(&text) {
        Ok(table) if table.day_key() == now.date() => Some(table),
        Ok(_) => {
            warnings.push(format!("ignoring stale snapshot {}", path.display()));
            None
        }
        Err(err) => {
            warnings.push(format!(
                "ignoring corrupt snapshot {}: {err}",
                path.display()
            ));
            None
        }
    }
}
