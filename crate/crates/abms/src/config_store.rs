//! Firewall XML config: parse, query, mutate, back up, write atomically.
//!
//! The config file carries the whole firewall state; this module only
//! manages the `<allowedip>` captive-portal entries and rewrites nothing
//! but the digits inside mutated `<bw_up>`/`<bw_down>` elements. Every
//! other byte of the original file survives a write untouched, so
//! unrelated sections can never be corrupted by a re-serialization.
//!
//! Writes go through a temp file in the same directory followed by an
//! atomic rename; readers always observe a complete document.

use std::net::Ipv4Addr;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::{fs, io};

use chrono::{DateTime, Utc};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed XML at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("allowedip entry {index} is missing <{field}>")]
    MissingField { index: usize, field: &'static str },
    #[error("allowedip entry {index} has duplicate <{field}>")]
    DuplicateField { index: usize, field: &'static str },
    #[error("allowedip entry {index} has invalid <{field}> value {value:?}")]
    InvalidField {
        index: usize,
        field: &'static str,
        value: String,
    },
    #[error("duplicate allowedip entry for {0}")]
    DuplicateIp(Ipv4Addr),
}

/// One `<allowedip>` element: the client, its subnet, and both caps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowedIpEntry {
    pub ip: Ipv4Addr,
    /// Subnet prefix length, 0-32.
    pub sn: u8,
    pub descr: String,
    pub bw_up: u64,
    pub bw_down: u64,
    // Byte ranges of the numeric text in the original document.
    bw_up_span: Range<usize>,
    bw_down_span: Range<usize>,
    dirty: bool,
}

/// A bandwidth mutation performed by [`ConfigDocument::apply_bandwidth`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandwidthChange {
    pub ip: Ipv4Addr,
    pub old: u64,
    pub new: u64,
}

impl BandwidthChange {
    pub fn increased(&self) -> bool {
        self.new > self.old
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Changed(BandwidthChange),
    Unchanged(UnchangedReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnchangedReason {
    /// No entry with that IP exists; the config is left alone.
    IpUnknown,
    /// The entry already carries the requested value.
    AlreadySet,
}

/// A parsed config: the original bytes plus the managed entries with the
/// positions needed for surgical rewriting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigDocument {
    raw: Vec<u8>,
    entries: Vec<AllowedIpEntry>,
}

impl ConfigDocument {
    /// Parse config content. The input may be a full document or a bare
    /// fragment (a sequence of elements); it only has to be well-formed.
    pub fn parse(raw: Vec<u8>) -> Result<Self, ParseError> {
        let entries = scan_entries(&raw)?;
        let mut seen = std::collections::HashSet::new();
        for entry in &entries {
            if !seen.insert(entry.ip) {
                return Err(ParseError::DuplicateIp(entry.ip));
            }
        }
        Ok(Self { raw, entries })
    }

    pub fn entries(&self) -> &[AllowedIpEntry] {
        &self.entries
    }

    /// Current cap for `ip` (its `bw_down`), if the entry exists.
    pub fn current_bandwidth(&self, ip: Ipv4Addr) -> Option<u64> {
        self.entries.iter().find(|e| e.ip == ip).map(|e| e.bw_down)
    }

    /// Set both caps of `ip`'s entry to `bw`.
    ///
    /// Unknown IPs and already-equal values leave the document untouched;
    /// applying the same value twice yields one change then `AlreadySet`.
    pub fn apply_bandwidth(&mut self, ip: Ipv4Addr, bw: u64) -> ApplyOutcome {
        debug_assert!(bw >= 1, "bandwidth caps are positive");
        let Some(entry) = self.entries.iter_mut().find(|e| e.ip == ip) else {
            return ApplyOutcome::Unchanged(UnchangedReason::IpUnknown);
        };
        let old = entry.bw_down;
        if old == bw {
            return ApplyOutcome::Unchanged(UnchangedReason::AlreadySet);
        }
        entry.bw_up = bw;
        entry.bw_down = bw;
        entry.dirty = true;
        ApplyOutcome::Changed(BandwidthChange { ip, old, new: bw })
    }

    /// Document bytes with every mutated cap spliced in. Identical to the
    /// input when nothing was mutated.
    pub fn serialize(&self) -> Vec<u8> {
        let mut replacements: Vec<(Range<usize>, String)> = Vec::new();
        for entry in &self.entries {
            if entry.dirty {
                replacements.push((entry.bw_up_span.clone(), entry.bw_up.to_string()));
                replacements.push((entry.bw_down_span.clone(), entry.bw_down.to_string()));
            }
        }
        replacements.sort_by_key(|(span, _)| span.start);

        let mut out = Vec::with_capacity(self.raw.len());
        let mut cursor = 0;
        for (span, text) in replacements {
            out.extend_from_slice(&self.raw[cursor..span.start]);
            out.extend_from_slice(text.as_bytes());
            cursor = span.end;
        }
        out.extend_from_slice(&self.raw[cursor..]);
        out
    }
}

/// Write the document to `path` via a same-directory temp file and atomic
/// rename. On failure the original file is left untouched.
pub fn write_config(doc: &ConfigDocument, path: &Path) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path.file_name().ok_or_else(|| {
        io::Error::new(io::ErrorKind::InvalidInput, "config path has no file name")
    })?;
    let tmp_name = format!(
        ".{}.tmp.{}",
        file_name.to_string_lossy(),
        std::process::id()
    );
    let tmp_path = match dir {
        Some(d) => d.join(&tmp_name),
        None => PathBuf::from(&tmp_name),
    };

    let result = (|| {
        fs::write(&tmp_path, doc.serialize())?;
        let file = fs::OpenOptions::new().write(true).open(&tmp_path)?;
        file.sync_all()?;
        fs::rename(&tmp_path, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp_path);
    }
    result
}

/// Copy `path` to `<path>.bak.<UTC timestamp>`, then prune old backups so
/// at most `retain` remain. Same-second collisions get a `-1`, `-2`, ...
/// suffix. Call once per dirty cycle, before the first write.
pub fn backup_config(path: &Path, at: DateTime<Utc>, retain: usize) -> io::Result<PathBuf> {
    let stamp = at.format("%Y%m%d%H%M%S").to_string();
    let base = format!("{}.bak.{stamp}", path.display());
    let mut backup_path = PathBuf::from(&base);
    let mut seq = 0u32;
    while backup_path.exists() {
        seq += 1;
        backup_path = PathBuf::from(format!("{base}-{seq}"));
    }
    fs::copy(path, &backup_path)?;
    prune_backups(path, retain)?;
    Ok(backup_path)
}

/// Delete all but the newest `retain` backups of `path`.
fn prune_backups(path: &Path, retain: usize) -> io::Result<()> {
    let dir = match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("."),
    };
    let file_name = match path.file_name() {
        Some(n) => n.to_string_lossy().into_owned(),
        None => return Ok(()),
    };
    let prefix = format!("{file_name}.bak.");

    // (timestamp, collision seq) sorts backups chronologically.
    let mut backups: Vec<(u64, u32, PathBuf)> = Vec::new();
    for dir_entry in fs::read_dir(&dir)? {
        let dir_entry = dir_entry?;
        let name = dir_entry.file_name().to_string_lossy().into_owned();
        let Some(suffix) = name.strip_prefix(&prefix) else {
            continue;
        };
        let (stamp, seq) = match suffix.split_once('-') {
            Some((stamp, seq)) => match seq.parse::<u32>() {
                Ok(seq) => (stamp, seq),
                Err(_) => continue,
            },
            None => (suffix, 0),
        };
        if stamp.len() != 14 || !stamp.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let stamp: u64 = match stamp.parse() {
            Ok(v) => v,
            Err(_) => continue,
        };
        backups.push((stamp, seq, dir_entry.path()));
    }

    if backups.len() <= retain {
        return Ok(());
    }
    backups.sort();
    let excess = backups.len() - retain;
    for (_, _, stale) in backups.into_iter().take(excess) {
        fs::remove_file(stale)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fragment scanner
//
// A minimal XML walk that understands just enough structure to locate
// allowedip children without disturbing anything else: comments, CDATA
// sections, processing instructions, and declarations are skipped as
// opaque regions, and quoted attribute values cannot terminate a tag.
// ---------------------------------------------------------------------------

struct OpenElement {
    name: Vec<u8>,
    content_start: usize,
}

#[derive(Default)]
struct EntryBuilder {
    start_depth: usize,
    ip: Option<Ipv4Addr>,
    sn: Option<u8>,
    descr: Option<String>,
    bw_up: Option<(u64, Range<usize>)>,
    bw_down: Option<(u64, Range<usize>)>,
}

fn scan_entries(raw: &[u8]) -> Result<Vec<AllowedIpEntry>, ParseError> {
    let mut entries = Vec::new();
    let mut stack: Vec<OpenElement> = Vec::new();
    let mut builder: Option<EntryBuilder> = None;
    let mut pos = 0;

    while let Some(lt) = find_byte(raw, pos, b'<') {
        let tail = &raw[lt..];
        if tail.starts_with(b"<!--") {
            pos = skip_past(raw, lt + 4, b"-->")?;
        } else if tail.starts_with(b"<![CDATA[") {
            pos = skip_past(raw, lt + 9, b"]]>")?;
        } else if tail.starts_with(b"<?") {
            pos = skip_past(raw, lt + 2, b"?>")?;
        } else if tail.starts_with(b"<!") {
            pos = skip_past(raw, lt + 2, b">")?;
        } else if tail.starts_with(b"</") {
            let gt = find_byte(raw, lt + 2, b'>').ok_or(ParseError::Malformed {
                offset: lt,
                reason: "unterminated end tag",
            })?;
            let name = trim_ascii(&raw[lt + 2..gt]);
            close_element(raw, &mut stack, &mut builder, &mut entries, name, lt)?;
            pos = gt + 1;
        } else {
            let (name_end, gt, self_closing) = scan_start_tag(raw, lt)?;
            let name = &raw[lt + 1..name_end];
            if name.is_empty() {
                return Err(ParseError::Malformed {
                    offset: lt,
                    reason: "empty element name",
                });
            }
            stack.push(OpenElement {
                name: name.to_vec(),
                content_start: gt + 1,
            });
            if name == b"allowedip" {
                if builder.is_some() {
                    return Err(ParseError::Malformed {
                        offset: lt,
                        reason: "nested allowedip element",
                    });
                }
                builder = Some(EntryBuilder {
                    start_depth: stack.len(),
                    ..EntryBuilder::default()
                });
            }
            if self_closing {
                // Content span is empty; close immediately.
                let owned = stack.last().expect("just pushed").name.clone();
                close_element(raw, &mut stack, &mut builder, &mut entries, &owned, gt + 1)?;
            }
            pos = gt + 1;
        }
    }

    if let Some(open) = stack.last() {
        return Err(ParseError::Malformed {
            offset: open.content_start,
            reason: "unclosed element",
        });
    }
    Ok(entries)
}

fn close_element(
    raw: &[u8],
    stack: &mut Vec<OpenElement>,
    builder: &mut Option<EntryBuilder>,
    entries: &mut Vec<AllowedIpEntry>,
    name: &[u8],
    content_end: usize,
) -> Result<(), ParseError> {
    let open = stack.pop().ok_or(ParseError::Malformed {
        offset: content_end,
        reason: "end tag without matching start tag",
    })?;
    if open.name != name {
        return Err(ParseError::Malformed {
            offset: content_end,
            reason: "mismatched end tag",
        });
    }

    let Some(active) = builder.as_mut() else {
        return Ok(());
    };

    if stack.len() + 1 == active.start_depth && name == b"allowedip" {
        let built = builder.take().expect("builder checked above");
        entries.push(built.finish(entries.len())?);
    } else if stack.len() == active.start_depth {
        // Direct child of the open allowedip element.
        active.record_field(raw, name, open.content_start..content_end, entries.len())?;
    }
    Ok(())
}

fn set_once<T>(
    slot: &mut Option<T>,
    value: T,
    index: usize,
    field: &'static str,
) -> Result<(), ParseError> {
    if slot.is_some() {
        return Err(ParseError::DuplicateField { index, field });
    }
    *slot = Some(value);
    Ok(())
}

impl EntryBuilder {
    fn record_field(
        &mut self,
        raw: &[u8],
        name: &[u8],
        content: Range<usize>,
        index: usize,
    ) -> Result<(), ParseError> {
        match name {
            b"ip" => {
                let text = content_text(raw, &content);
                let ip = text.trim().parse().map_err(|_| ParseError::InvalidField {
                    index,
                    field: "ip",
                    value: text.trim().to_string(),
                })?;
                set_once(&mut self.ip, ip, index, "ip")
            }
            b"sn" => {
                let text = content_text(raw, &content);
                let sn: u8 = text
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&v| v <= 32)
                    .ok_or_else(|| ParseError::InvalidField {
                        index,
                        field: "sn",
                        value: text.trim().to_string(),
                    })?;
                set_once(&mut self.sn, sn, index, "sn")
            }
            b"descr" => {
                let text = content_text(raw, &content);
                let descr = strip_cdata(text.trim()).to_string();
                set_once(&mut self.descr, descr, index, "descr")
            }
            b"bw_up" => {
                let parsed = parse_bandwidth(raw, &content, index, "bw_up")?;
                set_once(&mut self.bw_up, parsed, index, "bw_up")
            }
            b"bw_down" => {
                let parsed = parse_bandwidth(raw, &content, index, "bw_down")?;
                set_once(&mut self.bw_down, parsed, index, "bw_down")
            }
            _ => Ok(()), // unrelated children ride along untouched
        }
    }

    fn finish(self, index: usize) -> Result<AllowedIpEntry, ParseError> {
        let ip = self
            .ip
            .ok_or(ParseError::MissingField { index, field: "ip" })?;
        let (bw_up, bw_up_span) = self.bw_up.ok_or(ParseError::MissingField {
            index,
            field: "bw_up",
        })?;
        let (bw_down, bw_down_span) = self.bw_down.ok_or(ParseError::MissingField {
            index,
            field: "bw_down",
        })?;
        Ok(AllowedIpEntry {
            ip,
            sn: self.sn.unwrap_or(32),
            descr: self.descr.unwrap_or_default(),
            bw_up,
            bw_down,
            bw_up_span,
            bw_down_span,
            dirty: false,
        })
    }
}

/// Positive integer Kbps plus the exact span of its digits (surrounding
/// whitespace inside the element is preserved on rewrite).
fn parse_bandwidth(
    raw: &[u8],
    content: &Range<usize>,
    index: usize,
    field: &'static str,
) -> Result<(u64, Range<usize>), ParseError> {
    let bytes = &raw[content.clone()];
    let invalid = || ParseError::InvalidField {
        index,
        field,
        value: String::from_utf8_lossy(bytes).trim().to_string(),
    };
    let first = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .ok_or_else(invalid)?;
    let last = bytes
        .iter()
        .rposition(|b| !b.is_ascii_whitespace())
        .expect("non-whitespace byte exists");
    let digits = &bytes[first..=last];
    if !digits.iter().all(|b| b.is_ascii_digit()) {
        return Err(invalid());
    }
    let value: u64 = std::str::from_utf8(digits)
        .expect("ASCII digits")
        .parse()
        .map_err(|_| invalid())?;
    if value == 0 {
        return Err(invalid());
    }
    Ok((value, content.start + first..content.start + last + 1))
}

fn content_text<'a>(raw: &'a [u8], content: &Range<usize>) -> std::borrow::Cow<'a, str> {
    String::from_utf8_lossy(&raw[content.clone()])
}

fn strip_cdata(text: &str) -> &str {
    text.strip_prefix("<![CDATA[")
        .and_then(|t| t.strip_suffix("]]>"))
        .unwrap_or(text)
}

/// Find where a start tag ends, skipping quoted attribute values.
/// Returns (end of the element name, position of `>`, self-closing flag).
fn scan_start_tag(raw: &[u8], lt: usize) -> Result<(usize, usize, bool), ParseError> {
    let mut name_end = None;
    let mut quote: Option<u8> = None;
    let mut i = lt + 1;
    while i < raw.len() {
        let b = raw[i];
        match quote {
            Some(q) => {
                if b == q {
                    quote = None;
                }
            }
            None => match b {
                b'"' | b'\'' => quote = Some(b),
                b'>' => {
                    let name_end = name_end.unwrap_or(i);
                    let self_closing = raw[i - 1] == b'/';
                    return Ok((name_end, i, self_closing));
                }
                b'/' | b' ' | b'\t' | b'\r' | b'\n' => {
                    name_end.get_or_insert(i);
                }
                _ => {}
            },
        }
        i += 1;
    }
    Err(ParseError::Malformed {
        offset: lt,
        reason: "unterminated start tag",
    })
}

fn find_byte(raw: &[u8], from: usize, needle: u8) -> Option<usize> {
    raw.get(from..)?
        .iter()
        .position(|&b| b == needle)
        .map(|i| from + i)
}

/// Position just past the next occurrence of `needle` at or after `from`.
fn skip_past(raw: &[u8], from: usize, needle: &[u8]) -> Result<usize, ParseError> {
    let hay = &raw[from.min(raw.len())..];
    hay.windows(needle.len())
        .position(|w| w == needle)
        .map(|i| from + i + needle.len())
        .ok_or(ParseError::Malformed {
            offset: from,
            reason: "unterminated markup section",
        })
}

fn trim_ascii(bytes: &[u8]) -> &[u8] {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace());
    let end = bytes.iter().rposition(|b| !b.is_ascii_whitespace());
    match (start, end) {
        (Some(s), Some(e)) => &bytes[s..=e],
        _ => &[],
    }
}
