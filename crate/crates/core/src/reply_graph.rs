//! Directed reply-network construction from thread post sequences, window
//! scheduling, and construction-threshold calibration.
//!
//! Reply edges are inferred heuristically: the author of a post is linked to
//! the authors of up to `thresh_spat` immediately preceding posts in the same
//! thread, pruned by the timing rules below. Graphs are unweighted; repeated
//! interactions between the same ordered user pair collapse to one edge
//! keeping the earliest reply time.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime};
use thiserror::Error;

use crate::corpus::{Corpus, Post, TimeWindow};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("corpus span {span} shorter than required {required} months")]
    SpanTooShort { span: String, required: u32 },
    #[error("empty candidate grid")]
    EmptyGrid,
    #[error("all candidate parameter pairs produced empty graphs")]
    DegenerateGrid,
}

/// How the else-branch of edge creation prunes reply candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruningRule {
    /// The removal loop as stated: drop the candidate farthest in time from
    /// the replying post and re-test the successive-gap mean against the gap
    /// to the latest survivor.
    #[default]
    Verbatim,
    /// Keep only candidates within `thresh_temp` of the replying post.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstructionParams {
    /// Maximum count of prior posts reachable by a reply.
    pub thresh_spat: usize,
    /// Temporal reach of a reply.
    pub thresh_temp: Duration,
    pub pruning: PruningRule,
    /// Edges from a user to their own earlier posts (off by default:
    /// self-loops degenerate conductance and stationary distributions).
    pub allow_self_replies: bool,
}

impl ConstructionParams {
    pub fn new(thresh_spat: usize, thresh_temp: Duration) -> ConstructionParams {
        assert!(thresh_spat >= 1, "thresh_spat must be >= 1");
        assert!(thresh_temp > Duration::zero(), "thresh_temp must be > 0");
        ConstructionParams {
            thresh_spat,
            thresh_temp,
            pruning: PruningRule::Verbatim,
            allow_self_replies: false,
        }
    }
}

impl Default for ConstructionParams {
    fn default() -> Self {
        // Calibrated values reported for large darkweb corpora.
        ConstructionParams::new(10, Duration::minutes(15))
    }
}

/// A directed reply `replier -> replied_to` at `reply_time`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ReplyEdge {
    pub replier: String,
    pub replied_to: String,
    pub reply_time: NaiveDateTime,
}

/// Directed, unweighted reply network over one forum and time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyGraph {
    vertices: BTreeSet<String>,
    /// (replier, replied_to) -> earliest reply time.
    edges: BTreeMap<(String, String), NaiveDateTime>,
    pub span: TimeWindow,
}

impl ReplyGraph {
    pub fn empty(span: TimeWindow) -> ReplyGraph {
        ReplyGraph {
            vertices: BTreeSet::new(),
            edges: BTreeMap::new(),
            span,
        }
    }

    pub fn vertices(&self) -> &BTreeSet<String> {
        &self.vertices
    }

    pub fn contains_vertex(&self, user: &str) -> bool {
        self.vertices.contains(user)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, NaiveDateTime)> {
        self.edges
            .iter()
            .map(|((a, b), rt)| (a.as_str(), b.as_str(), *rt))
    }

    pub fn contains_edge(&self, replier: &str, replied_to: &str) -> bool {
        self.edges
            .contains_key(&(replier.to_string(), replied_to.to_string()))
    }

    pub fn add_vertex(&mut self, user: &str) {
        self.vertices.insert(user.to_string());
    }

    /// Insert an edge, deduplicating on the ordered pair and keeping the
    /// earliest reply time.
    pub fn add_edge(&mut self, edge: ReplyEdge) {
        self.vertices.insert(edge.replier.clone());
        self.vertices.insert(edge.replied_to.clone());
        let key = (edge.replier, edge.replied_to);
        self.edges
            .entry(key)
            .and_modify(|rt| {
                if edge.reply_time < *rt {
                    *rt = edge.reply_time;
                }
            })
            .or_insert(edge.reply_time);
    }

    pub fn in_degree(&self, user: &str) -> usize {
        self.edges.keys().filter(|(_, b)| b == user).count()
    }

    /// In-degree of every vertex (vertices without incoming edges included
    /// with degree 0).
    pub fn in_degrees(&self) -> BTreeMap<&str, usize> {
        let mut degrees: BTreeMap<&str, usize> =
            self.vertices.iter().map(|v| (v.as_str(), 0)).collect();
        for (_, b) in self.edges.keys() {
            *degrees.get_mut(b.as_str()).expect("edge endpoint in vertices") += 1;
        }
        degrees
    }

    pub fn out_neighbors(&self, user: &str) -> BTreeSet<&str> {
        self.edges
            .keys()
            .filter(|(a, _)| a == user)
            .map(|(_, b)| b.as_str())
            .collect()
    }

    pub fn in_neighbors(&self, user: &str) -> BTreeSet<&str> {
        self.edges
            .keys()
            .filter(|(_, b)| b == user)
            .map(|(a, _)| a.as_str())
            .collect()
    }

    /// Undirected adjacency (edge direction dropped, parallel directions
    /// collapsed). No self-loops by construction.
    pub fn undirected_adjacency(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut adj: BTreeMap<&str, BTreeSet<&str>> =
            self.vertices.iter().map(|v| (v.as_str(), BTreeSet::new())).collect();
        for (a, b) in self.edges.keys() {
            adj.get_mut(a.as_str()).unwrap().insert(b.as_str());
            adj.get_mut(b.as_str()).unwrap().insert(a.as_str());
        }
        adj
    }

    /// Serialize as `u1 <TAB> u2 <TAB> rt` lines under a header naming forum
    /// and span.
    pub fn write(&self, forum: &str, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# forum={} span={}", forum, self.span)?;
        for ((a, b), rt) in &self.edges {
            writeln!(out, "{}\t{}\t{}", a, b, rt.format("%Y-%m-%dT%H:%M:%S"))?;
        }
        Ok(())
    }
}

fn seconds(d: Duration) -> f64 {
    d.num_milliseconds() as f64 / 1000.0
}

/// Mean gap between successive posts in a chronologically ordered slice,
/// in seconds. Empty when fewer than two posts: treated as zero.
fn mean_successive_gap(posts: &[&Post]) -> f64 {
    if posts.len() < 2 {
        return 0.0;
    }
    let total: f64 = posts
        .windows(2)
        .map(|w| seconds(w[1].timestamp - w[0].timestamp))
        .sum();
    total / (posts.len() - 1) as f64
}

/// Infer reply edges for one thread. `posts` must be chronologically ordered
/// (timestamp, then post_id) and belong to a single (forum, thread).
pub fn create_thread_edges(posts: &[Post], params: &ConstructionParams) -> Vec<ReplyEdge> {
    let mut edges: BTreeSet<ReplyEdge> = BTreeSet::new();
    for i in 1..posts.len() {
        let post = &posts[i];
        let lo = i.saturating_sub(params.thresh_spat);
        let mut candidates: Vec<&Post> = posts[lo..i].iter().collect();

        let within_temp =
            |c: &Post| post.timestamp - c.timestamp < params.thresh_temp;

        if !within_temp(candidates[0]) {
            match params.pruning {
                PruningRule::Verbatim => loop {
                    let latest = *candidates.last().expect("non-empty candidate list");
                    let dt = seconds(post.timestamp - latest.timestamp);
                    if mean_successive_gap(&candidates) < dt {
                        break;
                    }
                    if within_temp(candidates[0]) {
                        break;
                    }
                    // The candidate farthest in time from the replying post
                    // is the earliest one.
                    candidates.remove(0);
                },
                PruningRule::Strict => {
                    candidates.retain(|c| within_temp(c));
                }
            }
        }

        for candidate in candidates {
            if candidate.user_id == post.user_id && !params.allow_self_replies {
                continue;
            }
            edges.insert(ReplyEdge {
                replier: post.user_id.clone(),
                replied_to: candidate.user_id.clone(),
                reply_time: post.timestamp,
            });
        }
    }
    edges.into_iter().collect()
}

/// Build the reply graph for one forum restricted to `window`. The vertex
/// set is every user who posted in the window; per-thread edge sets are
/// unioned with ordered-pair dedup keeping the earliest reply time.
pub fn create_graph(
    threads: &BTreeMap<String, Vec<Post>>,
    window: TimeWindow,
    params: &ConstructionParams,
) -> ReplyGraph {
    let mut graph = ReplyGraph::empty(window);
    for posts in threads.values() {
        let in_window: Vec<Post> = posts
            .iter()
            .filter(|p| window.contains(p.date()))
            .cloned()
            .collect();
        for post in &in_window {
            graph.add_vertex(&post.user_id);
        }
        for edge in create_thread_edges(&in_window, params) {
            graph.add_edge(edge);
        }
    }
    graph
}

/// Union a historical and a current network. Idempotent and commutative on
/// vertex and edge sets; the merged span covers both inputs.
pub fn merge(historical: &ReplyGraph, current: &ReplyGraph) -> ReplyGraph {
    let span = TimeWindow {
        start: historical.span.start.min(current.span.start),
        end: historical.span.end.max(current.span.end),
    };
    let mut merged = ReplyGraph::empty(span);
    for v in historical.vertices().iter().chain(current.vertices()) {
        merged.add_vertex(v);
    }
    for graph in [historical, current] {
        for (a, b, rt) in graph.edges() {
            merged.add_edge(ReplyEdge {
                replier: a.to_string(),
                replied_to: b.to_string(),
                reply_time: rt,
            });
        }
    }
    merged
}

/// Ordered (τ, H_τ) pairs: consecutive calendar-month subsequences, each
/// paired with its immediately preceding history months.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSchedule {
    /// (τ, H_τ) pairs ordered by τ start.
    pub pairs: Vec<(TimeWindow, TimeWindow)>,
    pub tau_months: u32,
    pub history_months: u32,
}

impl WindowSchedule {
    /// Window covering all τ days (the study span features are computed on).
    pub fn study_span(&self) -> Option<TimeWindow> {
        Some(TimeWindow {
            start: self.pairs.first()?.0.start,
            end: self.pairs.last()?.0.end,
        })
    }

    /// The (τ, H_τ) pair whose τ contains `day`.
    pub fn pair_for(&self, day: NaiveDate) -> Option<&(TimeWindow, TimeWindow)> {
        self.pairs.iter().find(|(tau, _)| tau.contains(day))
    }
}

fn month_start(date: NaiveDate) -> NaiveDate {
    NaiveDate::from_ymd_opt(date.year(), date.month(), 1).expect("valid month start")
}

fn add_months(date: NaiveDate, months: u32) -> NaiveDate {
    let total = date.year() * 12 + date.month() as i32 - 1 + months as i32;
    NaiveDate::from_ymd_opt(total.div_euclid(12), (total.rem_euclid(12) + 1) as u32, 1)
        .expect("valid month arithmetic")
}

fn months_spanned(span: TimeWindow) -> u32 {
    let a = span.start.year() * 12 + span.start.month() as i32;
    let b = span.end.year() * 12 + span.end.month() as i32;
    (b - a + 1) as u32
}

/// Build consecutive non-overlapping τ windows over `span`, each with its
/// immediately preceding history window. Months are calendar months; the
/// first and last windows are clamped to the span endpoints.
pub fn build_window_schedule(
    span: TimeWindow,
    tau_months: u32,
    history_months: u32,
) -> Result<WindowSchedule, GraphError> {
    assert!(tau_months >= 1 && history_months >= 1);
    let required = tau_months + history_months;
    if months_spanned(span) < required {
        return Err(GraphError::SpanTooShort {
            span: span.to_string(),
            required,
        });
    }
    let base = month_start(span.start);
    let mut pairs = Vec::new();
    let mut i = 0u32;
    loop {
        let tau_start = add_months(base, history_months + i * tau_months);
        if tau_start > span.end {
            break;
        }
        let tau_end = add_months(base, history_months + (i + 1) * tau_months)
            .pred_opt()
            .expect("valid day");
        let hist_start = add_months(base, i * tau_months);
        let hist_end = tau_start.pred_opt().expect("valid day");
        pairs.push((
            TimeWindow {
                start: tau_start,
                end: tau_end.min(span.end),
            },
            TimeWindow {
                start: hist_start.max(span.start),
                end: hist_end,
            },
        ));
        i += 1;
    }
    Ok(WindowSchedule {
        pairs,
        tau_months,
        history_months,
    })
}

/// Fit statistic for the in-degree power-law comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitStatistic {
    /// Least squares between log empirical and log theoretical complementary
    /// CDF over observed degrees k >= 1.
    #[default]
    LogLogCcdf,
    /// Kolmogorov-Smirnov distance between the two complementary CDFs.
    KolmogorovSmirnov,
}

/// Error of the in-degree distribution (degrees >= 1) against a discrete
/// power law p(k) proportional to k^-exponent over the observed support.
pub fn power_law_fit_error(degrees: &[usize], exponent: f64, statistic: FitStatistic) -> f64 {
    let degrees: Vec<usize> = degrees.iter().copied().filter(|&d| d >= 1).collect();
    if degrees.is_empty() {
        return f64::INFINITY;
    }
    let n = degrees.len() as f64;
    let kmax = *degrees.iter().max().unwrap();
    // Theoretical pmf over 1..=kmax.
    let z: f64 = (1..=kmax).map(|k| (k as f64).powf(-exponent)).sum();
    let mut ccdf_th = vec![0.0f64; kmax + 2];
    for k in (1..=kmax).rev() {
        ccdf_th[k] = ccdf_th[k + 1] + (k as f64).powf(-exponent) / z;
    }
    let mut counts = vec![0usize; kmax + 2];
    for &d in &degrees {
        counts[d] += 1;
    }
    let mut ccdf_emp = vec![0.0f64; kmax + 2];
    for k in (1..=kmax).rev() {
        ccdf_emp[k] = ccdf_emp[k + 1] + counts[k] as f64 / n;
    }
    let support: Vec<usize> = (1..=kmax).filter(|&k| counts[k] > 0).collect();
    match statistic {
        FitStatistic::LogLogCcdf => {
            let sum: f64 = support
                .iter()
                .map(|&k| {
                    let d = ccdf_emp[k].ln() - ccdf_th[k].ln();
                    d * d
                })
                .sum();
            sum / support.len() as f64
        }
        FitStatistic::KolmogorovSmirnov => (1..=kmax)
            .map(|k| (ccdf_emp[k] - ccdf_th[k]).abs())
            .fold(0.0, f64::max),
    }
}

/// Pooled in-degrees (>= 1) over per-forum graphs built with `params`.
fn pooled_in_degrees(corpus: &Corpus, params: &ConstructionParams) -> Vec<usize> {
    let Some(span) = corpus.span() else {
        return Vec::new();
    };
    let mut degrees = Vec::new();
    for forum in corpus.forums.values() {
        let graph = create_graph(&forum.threads, span, params);
        degrees.extend(graph.in_degrees().values().copied().filter(|&d| d >= 1));
    }
    degrees
}

/// Pick the (thresh_spat, thresh_temp) pair whose in-degree distribution
/// best fits the target power law. Ties break toward smaller thresh_spat,
/// then smaller thresh_temp.
pub fn calibrate_thresholds(
    corpus: &Corpus,
    grid: &[(usize, Duration)],
    exponent: f64,
    statistic: FitStatistic,
) -> Result<(ConstructionParams, Vec<f64>), GraphError> {
    if grid.is_empty() {
        return Err(GraphError::EmptyGrid);
    }
    let mut errors = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, usize, Duration)> = None;
    for &(spat, temp) in grid {
        let params = ConstructionParams::new(spat, temp);
        let degrees = pooled_in_degrees(corpus, &params);
        let err = power_law_fit_error(&degrees, exponent, statistic);
        errors.push(err);
        let candidate = (err, spat, temp);
        best = Some(match best {
            None => candidate,
            Some(current) => {
                if (candidate.0, candidate.1, candidate.2) < (current.0, current.1, current.2) {
                    candidate
                } else {
                    current
                }
            }
        });
    }
    let (err, spat, temp) = best.expect("non-empty grid");
    if !err.is_finite() {
        return Err(GraphError::DegenerateGrid);
    }
    Ok((ConstructionParams::new(spat, temp), errors))
}
