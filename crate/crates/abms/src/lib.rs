//! Adaptive bandwidth management for campus proxy networks.
//!
//! The pipeline watches a squid-native access log, counts each client's
//! educational vs. total page views against a domain category list, and
//! rewrites the per-IP `bw_up`/`bw_down` caps of a firewall captive-portal
//! XML config. Users browsing mostly educational sites drift toward twice
//! the per-user floor; everyone else stays at (or returns to) the floor.
//!
//! Module map:
//!
//! - [`log_ingest`] — log line parsing and data cleaning
//! - [`domain_index`] — category file loading and host classification
//! - [`usage_stats`] — per-client daily counters
//! - [`allocation`] — the floor and adaptive-bandwidth arithmetic
//! - [`config_store`] — surgical, byte-preserving XML config edits
//! - [`orchestrator`] — the poll/allocate/write control loop
//! - [`simulator`] — synthetic log generation and scenario replay

pub mod allocation;
pub mod config_store;
pub mod domain_index;
pub mod log_ingest;
pub mod orchestrator;
pub mod simulator;
pub mod usage_stats;
