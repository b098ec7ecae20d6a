//! Post / attack / CPE data model and file parsing.
//!
//! File formats are line-delimited UTF-8 TSV:
//! - posts:   `forum_id <TAB> thread_id <TAB> post_id <TAB> user_id <TAB> ISO-8601 timestamp <TAB> comma-separated CVE list`
//! - attacks: `event_type <TAB> YYYY-MM-DD`, one incident per line
//! - cpe map: `cve_id <TAB> semicolon-separated CPE group labels`

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown event type '{0}'")]
    UnknownEventType(String),
    #[error("invalid timestamp '{0}'")]
    BadTimestamp(String),
    #[error("invalid date '{0}'")]
    BadDate(String),
    #[error("invalid window: start {start} after end {end}")]
    BadWindow { start: NaiveDate, end: NaiveDate },
}

/// A single forum post. `cve_mentions` arrive pre-extracted in the input
/// format; see [`PostsFormat::ExtractCves`] for the regex fallback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Post {
    pub forum_id: String,
    pub thread_id: String,
    pub post_id: u64,
    pub user_id: String,
    pub timestamp: NaiveDateTime,
    pub cve_mentions: BTreeSet<String>,
}

impl Post {
    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }
}

/// Inclusive day-resolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimeWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl TimeWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, CorpusError> {
        if start > end {
            return Err(CorpusError::BadWindow { start, end });
        }
        Ok(TimeWindow { start, end })
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        self.start <= day && day <= self.end
    }

    pub fn num_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start.iter_days().take(self.num_days())
    }

    /// Index of `day` within the window, if covered.
    pub fn day_index(&self, day: NaiveDate) -> Option<usize> {
        if self.contains(day) {
            Some((day - self.start).num_days() as usize)
        } else {
            None
        }
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

/// The three attack categories of the ground-truth feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventType {
    MaliciousEmail,
    EndpointMalware,
    MaliciousDestination,
}

impl EventType {
    pub const ALL: [EventType; 3] = [
        EventType::MaliciousEmail,
        EventType::EndpointMalware,
        EventType::MaliciousDestination,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::MaliciousEmail => "malicious-email",
            EventType::EndpointMalware => "endpoint-malware",
            EventType::MaliciousDestination => "malicious-destination",
        }
    }
}

impl FromStr for EventType {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "malicious-email" => Ok(EventType::MaliciousEmail),
            "endpoint-malware" => Ok(EventType::EndpointMalware),
            "malicious-destination" => Ok(EventType::MaliciousDestination),
            other => Err(CorpusError::UnknownEventType(other.to_string())),
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Diagnostic for a rejected input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Posts of one forum, grouped by thread. Threads hold posts in
/// chronological order (timestamp, then post_id).
#[derive(Debug, Clone, Default)]
pub struct Forum {
    pub threads: BTreeMap<String, Vec<Post>>,
}

impl Forum {
    pub fn post_count(&self) -> usize {
        self.threads.values().map(|t| t.len()).sum()
    }

    pub fn posts(&self) -> impl Iterator<Item = &Post> {
        self.threads.values().flatten()
    }
}

/// An immutable, loaded post corpus.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub forums: BTreeMap<String, Forum>,
}

impl Corpus {
    pub fn from_posts(posts: impl IntoIterator<Item = Post>) -> Corpus {
        let mut corpus = Corpus::default();
        for post in posts {
            corpus
                .forums
                .entry(post.forum_id.clone())
                .or_default()
                .threads
                .entry(post.thread_id.clone())
                .or_default()
                .push(post);
        }
        for forum in corpus.forums.values_mut() {
            for thread in forum.threads.values_mut() {
                thread.sort_by(|a, b| (a.timestamp, a.post_id).cmp(&(b.timestamp, b.post_id)));
            }
        }
        corpus
    }

    pub fn post_count(&self) -> usize {
        self.forums.values().map(|f| f.post_count()).sum()
    }

    pub fn posts(&self) -> impl Iterator<Item = &Post> {
        self.forums.values().flat_map(|f| f.posts())
    }

    /// First and last post date over the whole corpus.
    pub fn span(&self) -> Option<TimeWindow> {
        let mut min = None;
        let mut max = None;
        for post in self.posts() {
            let d = post.date();
            min = Some(min.map_or(d, |m: NaiveDate| m.min(d)));
            max = Some(max.map_or(d, |m: NaiveDate| m.max(d)));
        }
        Some(TimeWindow {
            start: min?,
            end: max?,
        })
    }

    /// Drop forums with `post_count <= min_posts`.
    pub fn filter_min_posts(&self, min_posts: usize) -> Corpus {
        Corpus {
            forums: self
                .forums
                .iter()
                .filter(|(_, f)| f.post_count() > min_posts)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Restrict to posts within `window` (forums may become empty and are
    /// then dropped).
    pub fn restrict(&self, window: TimeWindow) -> Corpus {
        let posts = self
            .posts()
            .filter(|p| window.contains(p.date()))
            .cloned()
            .collect::<Vec<_>>();
        Corpus::from_posts(posts)
    }
}

/// How the CVE column of a posts file is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PostsFormat {
    /// Comma-separated list of CVE identifiers (the canonical format).
    #[default]
    CveList,
    /// Free text; CVE ids are pulled out with the `CVE-\d{4}-\d{4,}` pattern.
    ExtractCves,
}

fn parse_timestamp(s: &str) -> Result<NaiveDateTime, CorpusError> {
    if let Ok(ts) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Ok(ts);
    }
    if let Ok(ts) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        return Ok(ts);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.naive_utc())
        .map_err(|_| CorpusError::BadTimestamp(s.to_string()))
}

/// Parse a posts file. Malformed lines are reported with their line numbers
/// and skipped; a duplicate post_id within a (forum, thread) rejects the
/// later record.
pub fn load_posts(
    path: impl AsRef<Path>,
    format: PostsFormat,
) -> Result<(Corpus, Vec<LineDiagnostic>), CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_posts(std::io::BufReader::new(file), format)
}

pub fn parse_posts(
    reader: impl BufRead,
    format: PostsFormat,
) -> Result<(Corpus, Vec<LineDiagnostic>), CorpusError> {
    let cve_re = Regex::new(r"CVE-\d{4}-\d{4,}").expect("valid pattern");
    let mut posts: Vec<Post> = Vec::new();
    let mut seen: BTreeSet<(String, String, u64)> = BTreeSet::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: "<input>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            diagnostics.push(LineDiagnostic {
                line: lineno,
                message: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
            continue;
        }
        let post_id = match fields[2].parse::<u64>() {
            Ok(id) => id,
            Err(_) => {
                diagnostics.push(LineDiagnostic {
                    line: lineno,
                    message: format!("invalid post_id '{}'", fields[2]),
                });
                continue;
            }
        };
        let timestamp = match parse_timestamp(fields[4]) {
            Ok(ts) => ts,
            Err(_) => {
                diagnostics.push(LineDiagnostic {
                    line: lineno,
                    message: format!("invalid timestamp '{}'", fields[4]),
                });
                continue;
            }
        };
        if fields[3].is_empty() {
            diagnostics.push(LineDiagnostic {
                line: lineno,
                message: "empty user_id".to_string(),
            });
            continue;
        }
        let key = (
            fields[0].to_string(),
            fields[1].to_string(),
            post_id,
        );
        if !seen.insert(key) {
            diagnostics.push(LineDiagnostic {
                line: lineno,
                message: format!(
                    "duplicate post_id {} in forum '{}' thread '{}'",
                    post_id, fields[0], fields[1]
                ),
            });
            continue;
        }
        let cve_mentions: BTreeSet<String> = match format {
            PostsFormat::CveList => fields[5]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
            PostsFormat::ExtractCves => cve_re
                .find_iter(fields[5])
                .map(|m| m.as_str().to_string())
                .collect(),
        };
        posts.push(Post {
            forum_id: fields[0].to_string(),
            thread_id: fields[1].to_string(),
            post_id,
            user_id: fields[3].to_string(),
            timestamp,
            cve_mentions,
        });
    }
    Ok((Corpus::from_posts(posts), diagnostics))
}

/// Serialize a corpus in canonical form: forums, threads, then chronological
/// post order; CVE mentions sorted and comma-joined.
pub fn write_posts(corpus: &Corpus, mut out: impl Write) -> std::io::Result<()> {
    for (forum_id, forum) in &corpus.forums {
        for (thread_id, posts) in &forum.threads {
            for post in posts {
                let cves: Vec<&str> = post.cve_mentions.iter().map(String::as_str).collect();
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    forum_id,
                    thread_id,
                    post.post_id,
                    post.user_id,
                    post.timestamp.format("%Y-%m-%dT%H:%M:%S"),
                    cves.join(",")
                )?;
            }
        }
    }
    Ok(())
}

/// Attack ground truth: per event type, the set of incident dates with
/// per-day incident counts.
#[derive(Debug, Clone, Default)]
pub struct AttackData {
    pub counts: BTreeMap<EventType, BTreeMap<NaiveDate, u32>>,
}

impl AttackData {
    pub fn from_records(records: impl IntoIterator<Item = (EventType, NaiveDate)>) -> AttackData {
        let mut counts: BTreeMap<EventType, BTreeMap<NaiveDate, u32>> = BTreeMap::new();
        for (event, day) in records {
            *counts.entry(event).or_default().entry(day).or_insert(0) += 1;
        }
        AttackData { counts }
    }

    pub fn total_incidents(&self, event: EventType) -> u32 {
        self.counts
            .get(&event)
            .map(|m| m.values().sum())
            .unwrap_or(0)
    }

    /// Day-indexed incident counts over `span`.
    pub fn daily_counts(&self, event: EventType, span: TimeWindow) -> Vec<u32> {
        let empty = BTreeMap::new();
        let counts = self.counts.get(&event).unwrap_or(&empty);
        span.days()
            .map(|d| counts.get(&d).copied().unwrap_or(0))
            .collect()
    }

    /// Daily 0/1 labels over `span`: 1 iff at least one incident that day.
    pub fn daily_labels(&self, event: EventType, span: TimeWindow) -> Vec<u8> {
        self.daily_counts(event, span)
            .into_iter()
            .map(|c| u8::from(c > 0))
            .collect()
    }

    /// Earliest and latest incident date across all event types.
    pub fn span(&self) -> Option<TimeWindow> {
        let mut days = self.counts.values().flat_map(|m| m.keys()).copied();
        let first = days.next()?;
        let (min, max) = days.fold((first, first), |(lo, hi), d| (lo.min(d), hi.max(d)));
        Some(TimeWindow {
            start: min,
            end: max,
        })
    }
}

pub fn load_attacks(
    path: impl AsRef<Path>,
) -> Result<(AttackData, Vec<LineDiagnostic>), CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_attacks(std::io::BufReader::new(file))
}

pub fn parse_attacks(
    reader: impl BufRead,
) -> Result<(AttackData, Vec<LineDiagnostic>), CorpusError> {
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: "<input>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (event, date) = match (fields.next(), fields.next()) {
            (Some(e), Some(d)) => (e, d),
            _ => {
                diagnostics.push(LineDiagnostic {
                    line: lineno,
                    message: "expected `event_type <TAB> YYYY-MM-DD`".to_string(),
                });
                continue;
            }
        };
        let event = match event.parse::<EventType>() {
            Ok(e) => e,
            Err(_) => {
                diagnostics.push(LineDiagnostic {
                    line: lineno,
                    message: format!("unknown event type '{event}'"),
                });
                continue;
            }
        };
        let date = match NaiveDate::parse_from_str(date, "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) => {
                diagnostics.push(LineDiagnostic {
                    line: lineno,
                    message: format!("invalid date '{date}'"),
                });
                continue;
            }
        };
        records.push((event, date));
    }
    Ok((AttackData::from_records(records), diagnostics))
}

pub fn write_attacks(attacks: &AttackData, mut out: impl Write) -> std::io::Result<()> {
    for (event, days) in &attacks.counts {
        for (day, count) in days {
            for _ in 0..*count {
                writeln!(out, "{}\t{}", event, day.format("%Y-%m-%d"))?;
            }
        }
    }
    Ok(())
}

/// CVE to CPE-group lookup. CVEs absent from the table answer `None`
/// ("unmapped") and are counted by callers.
#[derive(Debug, Clone, Default)]
pub struct CpeMap {
    groups: BTreeMap<String, BTreeSet<String>>,
}

impl CpeMap {
    pub fn insert(&mut self, cve: &str, groups: impl IntoIterator<Item = String>) {
        self.groups
            .entry(cve.to_string())
            .or_default()
            .extend(groups);
    }

    pub fn lookup(&self, cve: &str) -> Option<&BTreeSet<String>> {
        self.groups.get(cve)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.groups.iter()
    }
}

pub fn load_cpe_map(path: impl AsRef<Path>) -> Result<(CpeMap, Vec<LineDiagnostic>), CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cpe_map(std::io::BufReader::new(file))
}

pub fn parse_cpe_map(reader: impl BufRead) -> Result<(CpeMap, Vec<LineDiagnostic>), CorpusError> {
    let mut map = CpeMap::default();
    let mut diagnostics = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: "<input>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (cve, groups) = match (fields.next(), fields.next()) {
            (Some(c), Some(g)) if !c.is_empty() => (c, g),
            _ => {
                diagnostics.push(LineDiagnostic {
                    line: lineno,
                    message: "expected `cve_id <TAB> group;group;...`".to_string(),
                });
                continue;
            }
        };
        let groups: Vec<String> = groups
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if groups.is_empty() {
            diagnostics.push(LineDiagnostic {
                line: lineno,
                message: format!("no CPE groups for {cve}"),
            });
            continue;
        }
        if map.lookup(cve).is_some() {
            diagnostics.push(LineDiagnostic {
                line: lineno,
                message: format!("duplicate CVE row '{cve}': unioning group sets"),
            });
        }
        map.insert(cve, groups);
    }
    Ok((map, diagnostics))
}

pub fn write_cpe_map(map: &CpeMap, mut out: impl Write) -> std::io::Result<()> {
    for (cve, groups) in map.iter() {
        let groups: Vec<&str> = groups.iter().map(String::as_str).collect();
        writeln!(out, "{}\t{}", cve, groups.join(";"))?;
    }
    Ok(())
}
