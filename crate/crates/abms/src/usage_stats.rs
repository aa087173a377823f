//! Per-client daily counters of educational and total page views.
//!
//! Counters are cumulative over one calendar day and discarded at the
//! daily reset. An optional line-oriented snapshot covers daemon restarts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use chrono::NaiveDate;
use thiserror::Error;

/// One client's counters for the table's day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserStats {
    pub client_ip: Ipv4Addr,
    /// Educational page views.
    pub nes: u64,
    /// All countable page views; always >= `nes`.
    pub tsa: u64,
    pub day_key: NaiveDate,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RestoreError {
    #[error("snapshot has no day header")]
    MissingHeader,
    #[error("invalid day header {0:?}")]
    DayHeader(String),
    #[error("malformed entry line {0:?}")]
    Entry(String),
    #[error("entry {ip} has nes {nes} > tsa {tsa}")]
    Counts { ip: Ipv4Addr, nes: u64, tsa: u64 },
    #[error("duplicate entry for {0}")]
    Duplicate(Ipv4Addr),
}

/// All clients' counters for one day, keyed by IP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsTable {
    day_key: NaiveDate,
    entries: BTreeMap<Ipv4Addr, (u64, u64)>,
}

impl StatsTable {
    pub fn new(day_key: NaiveDate) -> Self {
        Self {
            day_key,
            entries: BTreeMap::new(),
        }
    }

    pub fn day_key(&self) -> NaiveDate {
        self.day_key
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Count one page view for `client_ip`; `educational` also bumps NES.
    /// Unknown IPs are inserted on first sight.
    pub fn accumulate(&mut self, client_ip: Ipv4Addr, educational: bool) {
        let (nes, tsa) = self.entries.entry(client_ip).or_insert((0, 0));
        *tsa += 1;
        if educational {
            *nes += 1;
        }
    }

    pub fn get(&self, client_ip: Ipv4Addr) -> Option<UserStats> {
        self.entries.get(&client_ip).map(|&(nes, tsa)| UserStats {
            client_ip,
            nes,
            tsa,
            day_key: self.day_key,
        })
    }

    /// Entries in ascending IP order.
    pub fn iter(&self) -> impl Iterator<Item = UserStats> + '_ {
        self.entries
            .iter()
            .map(|(&client_ip, &(nes, tsa))| UserStats {
                client_ip,
                nes,
                tsa,
                day_key: self.day_key,
            })
    }

    /// Discard every counter and rebind the table to `new_day`.
    pub fn reset_all(&mut self, new_day: NaiveDate) {
        self.entries.clear();
        self.day_key = new_day;
    }

    /// Line-oriented serialization: the day on the first line, then one
    /// `ip nes tsa` line per entry in ascending IP order.
    pub fn snapshot(&self) -> String {
        let mut out = format!("{}\n", self.day_key.format("%Y-%m-%d"));
        for stats in self.iter() {
            let _ = writeln!(out, "{} {} {}", stats.client_ip, stats.nes, stats.tsa);
        }
        out
    }

    /// Inverse of [`snapshot`](Self::snapshot); rejects malformed text and
    /// entries violating `nes <= tsa`.
    pub fn restore(text: &str) -> Result<Self, RestoreError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(RestoreError::MissingHeader)?;
        let day_key = NaiveDate::parse_from_str(header.trim(), "%Y-%m-%d")
            .map_err(|_| RestoreError::DayHeader(header.to_string()))?;

        let mut table = Self::new(day_key);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (ip, nes, tsa) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(ip), Some(nes), Some(tsa), None) => (ip, nes, tsa),
                _ => return Err(RestoreError::Entry(line.to_string())),
            };
            let ip: Ipv4Addr = ip
                .parse()
                .map_err(|_| RestoreError::Entry(line.to_string()))?;
            let nes: u64 = nes
                .parse()
                .map_err(|_| RestoreError::Entry(line.to_string()))?;
            let tsa: u64 = tsa
                .parse()
                .map_err(|_| RestoreError::Entry(line.to_string()))?;
            if nes > tsa {
                return Err(RestoreError::Counts { ip, nes, tsa });
            }
            if table.entries.insert(ip, (nes, tsa)).is_some() {
                return Err(RestoreError::Duplicate(ip));
            }
        }
        Ok(table)
    }
}
