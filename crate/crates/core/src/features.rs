//! Daily expert-centric network features and forum metadata features.
//!
//! For every subsequence window the historical graph, expert set and
//! community structure are built once; every day inside the window is then
//! scored on the merged historical+daily graph.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::collections::VecDeque;
use std::io::Write;

use chrono::NaiveDate;
use thiserror::Error;

use crate::corpus::{Corpus, CpeMap, Forum, TimeWindow};
use crate::experts::{extract_experts, rank_cpe_groups};
use crate::louvain::{louvain_communities, CommunityAssignment};
use crate::reply_graph::{create_graph, merge, ConstructionParams, ReplyGraph, WindowSchedule};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("degenerate graph: empty edge set")]
    DegenerateGraph,
    #[error("schedule has no windows")]
    EmptySchedule,
}

/// The eight per-forum daily features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureId {
    Conductance,
    ShortestPath,
    ExpertReplies,
    CommonCommunities,
    NThreads,
    NUsers,
    NExpertThreads,
    NCveMentions,
}

impl FeatureId {
    pub const ALL: [FeatureId; 8] = [
        FeatureId::Conductance,
        FeatureId::ShortestPath,
        FeatureId::ExpertReplies,
        FeatureId::CommonCommunities,
        FeatureId::NThreads,
        FeatureId::NUsers,
        FeatureId::NExpertThreads,
        FeatureId::NCveMentions,
    ];

    pub const GRAPH: [FeatureId; 4] = [
        FeatureId::Conductance,
        FeatureId::ShortestPath,
        FeatureId::ExpertReplies,
        FeatureId::CommonCommunities,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureId::Conductance => "conductance",
            FeatureId::ShortestPath => "shortest_path",
            FeatureId::ExpertReplies => "expert_replies",
            FeatureId::CommonCommunities => "common_communities",
            FeatureId::NThreads => "n_threads",
            FeatureId::NUsers => "n_users",
            FeatureId::NExpertThreads => "n_expert_threads",
            FeatureId::NCveMentions => "n_cve_mentions",
        }
    }

    pub fn is_graph_feature(&self) -> bool {
        FeatureId::GRAPH.contains(self)
    }
}

impl std::str::FromStr for FeatureId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureId::ALL
            .iter()
            .find(|f| f.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown feature: {s}"))
    }
}

/// Why a day's value is (or is not) a real measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Computed,
    EmptyGraph,
    NoExperts,
}

impl Coverage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Coverage::Computed => "computed",
            Coverage::EmptyGraph => "empty-graph",
            Coverage::NoExperts => "no-experts",
        }
    }
}

/// One day-indexed series for a (feature, forum) pair over the study span.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub feature_id: FeatureId,
    pub forum_id: String,
    pub span: TimeWindow,
    pub values: Vec<f64>,
    pub coverage: Vec<Coverage>,
}

impl FeatureSeries {
    pub fn value_on(&self, day: NaiveDate) -> Option<f64> {
        self.span.day_index(day).map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StationaryMode {
    /// pi(v) = deg(v) / 2|E| over the undirected projection.
    #[default]
    UndirectedDegree,
    /// Power-iteration fixed point of the directed walk with 0.15 teleport.
    TeleportRandomWalk,
}

/// How expert replies are aggregated over the expert set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplyAggregation {
    #[default]
    Mean,
    Total,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub probs: BTreeMap<String, f64>,
}

impl StationaryDistribution {
    pub fn prob(&self, user: &str) -> f64 {
        self.probs.get(user).copied().unwrap_or(0.0)
    }
}

const TELEPORT: f64 = 0.15;
const TELEPORT_TOL: f64 = 1e-12;

pub fn stationary_distribution(
    graph: &ReplyGraph,
    mode: StationaryMode,
) -> Result<StationaryDistribution, FeatureError> {
    if graph.edge_count() == 0 {
        return Err(FeatureError::DegenerateGraph);
    }
    let probs = match mode {
        StationaryMode::UndirectedDegree => {
            let adjacency = graph.undirected_adjacency();
            let two_m: f64 = adjacency.values().map(|n| n.len() as f64).sum();
            adjacency
                .iter()
                .map(|(v, n)| (v.to_string(), n.len() as f64 / two_m))
                .collect()
        }
        StationaryMode::TeleportRandomWalk => {
            let names: Vec<&str> = graph.vertices().iter().map(String::as_str).collect();
            let index: BTreeMap<&str, usize> =
                names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
            let n = names.len();
            let out: Vec<Vec<usize>> = names
                .iter()
                .map(|u| graph.out_neighbors(u).iter().map(|v| index[v]).collect())
                .collect();
            let mut pi = vec![1.0 / n as f64; n];
            loop {
                let mut next = vec![0.0; n];
                let mut teleport_mass = 0.0;
                for (u, targets) in out.iter().enumerate() {
                    if targets.is_empty() {
                        // Dangling node: the walk restarts uniformly.
                        teleport_mass += pi[u];
                    } else {
                        teleport_mass += TELEPORT * pi[u];
                        let share = (1.0 - TELEPORT) * pi[u] / targets.len() as f64;
                        for &v in targets {
                            next[v] += share;
                        }
                    }
                }
                let uniform = teleport_mass / n as f64;
                for x in &mut next {
                    *x += uniform;
                }
                let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
                pi = next;
                if delta < TELEPORT_TOL {
                    break;
                }
            }
            names
                .iter()
                .zip(&pi)
                .map(|(u, &p)| (u.to_string(), p))
                .collect()
        }
    };
    Ok(StationaryDistribution { probs })
}

/// Probability mass flowing out of the expert set in one walk step,
/// normalized by the mass of being on an expert; clamped to [0,1].
pub fn graph_conductance(
    graph: &ReplyGraph,
    experts: &BTreeSet<String>,
    mode: StationaryMode,
) -> Result<f64, FeatureError> {
    if experts.is_empty() || graph.vertices().iter().all(|v| experts.contains(v)) {
        return Ok(0.0);
    }
    let pi = stationary_distribution(graph, mode)?;
    let pi_exp: f64 = experts.iter().map(|x| pi.prob(x)).sum();
    if pi_exp == 0.0 {
        return Ok(0.0);
    }
    let mut flow = 0.0;
    match mode {
        StationaryMode::UndirectedDegree => {
            let adjacency = graph.undirected_adjacency();
            for x in experts {
                let Some(neighbors) = adjacency.get(x.as_str()) else {
                    continue;
                };
                if neighbors.is_empty() {
                    continue;
                }
                let step = pi.prob(x) / neighbors.len() as f64;
                for y in neighbors {
                    if !experts.contains(*y) {
                        flow += step;
                    }
                }
            }
        }
        StationaryMode::TeleportRandomWalk => {
            let n = graph.vertex_count() as f64;
            let n_outside = graph
                .vertices()
                .iter()
                .filter(|v| !experts.contains(*v))
                .count() as f64;
            for x in experts {
                if !graph.contains_vertex(x) {
                    continue;
                }
                let p = pi.prob(x);
                let out = graph.out_neighbors(x);
                if out.is_empty() {
                    flow += p * n_outside / n;
                } else {
                    flow += p * TELEPORT * n_outside / n;
                    let share = p * (1.0 - TELEPORT) / out.len() as f64;
                    for y in out {
                        if !experts.contains(y) {
                            flow += share;
                        }
                    }
                }
            }
        }
    }
    let raw = flow / pi_exp;
    debug_assert!(raw <= 1.0 + 1e-9, "conductance {raw} above 1");
    Ok(raw.clamp(0.0, 1.0))
}

/// Mean over experts of the directed distance to the nearest current-day
/// non-expert user; experts reaching none are excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortestPathSummary {
    pub mean: f64,
    pub included: usize,
    pub excluded: usize,
}

pub fn avg_shortest_path(
    merged: &ReplyGraph,
    experts: &BTreeSet<String>,
    current_vertices: &BTreeSet<String>,
) -> ShortestPathSummary {
    let targets: BTreeSet<&str> = current_vertices
        .iter()
        .filter(|u| !experts.contains(*u))
        .map(String::as_str)
        .collect();
    let mut total = 0.0;
    let mut included = 0;
    let mut excluded = 0;
    for expert in experts {
        match nearest_target(merged, expert, &targets) {
            Some(d) => {
                total += d as f64;
                included += 1;
            }
            None => excluded += 1,
        }
    }
    let mean = if included > 0 {
        total / included as f64
    } else {
        0.0
    };
    ShortestPathSummary {
        mean,
        included,
        excluded,
    }
}

fn nearest_target(graph: &ReplyGraph, source: &str, targets: &BTreeSet<&str>) -> Option<usize> {
    if !graph.contains_vertex(source) {
        return None;
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut queue: VecDeque<(&str, usize)> = VecDeque::new();
    seen.insert(source);
    queue.push_back((source, 0));
    while let Some((u, d)) = queue.pop_front() {
        if d > 0 && targets.contains(u) {
            return Some(d);
        }
        for v in graph.out_neighbors(u) {
            if seen.insert(v) {
                queue.push_back((v, d + 1));
            }
        }
    }
    None
}

pub fn expert_replies(
    merged: &ReplyGraph,
    experts: &BTreeSet<String>,
    aggregation: ReplyAggregation,
) -> f64 {
    if experts.is_empty() {
        return 0.0;
    }
    let total: usize = experts.iter().map(|e| merged.out_neighbors(e).len()).sum();
    match aggregation {
        ReplyAggregation::Mean => total as f64 / experts.len() as f64,
        ReplyAggregation::Total => total as f64,
    }
}

/// Communities of the historical graph containing at least one expert.
pub fn expert_communities(
    assignment: &CommunityAssignment,
    experts: &BTreeSet<String>,
) -> BTreeSet<usize> {
    experts
        .iter()
        .filter_map(|e| assignment.community_of(e))
        .collect()
}

/// Count of current-day non-expert users tied to the expert communities:
/// either their own historical community is an expert community, or an
/// expert replied to them in the merged graph, or some in-neighbor of
/// theirs sits in an expert community. Each user counts at most once.
pub fn common_communities(
    merged: &ReplyGraph,
    current_vertices: &BTreeSet<String>,
    experts: &BTreeSet<String>,
    assignment: &CommunityAssignment,
    expert_comms: &BTreeSet<usize>,
) -> usize {
    let mut count = 0;
    for u in current_vertices {
        if experts.contains(u) {
            continue;
        }
        if let Some(c) = assignment.community_of(u) {
            if expert_comms.contains(&c) {
                count += 1;
                continue;
            }
        }
        let condition1 = experts.iter().any(|v| merged.contains_edge(v, u));
        let condition2 = || {
            merged.in_neighbors(u).iter().any(|n| {
                assignment
                    .community_of(n)
                    .is_some_and(|c| expert_comms.contains(&c))
            })
        };
        if condition1 || condition2() {
            count += 1;
        }
    }
    count
}

/// The four metadata counts for one forum-day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetadataCounts {
    pub n_threads: usize,
    pub n_users: usize,
    pub n_expert_threads: usize,
    pub n_cve_mentions: usize,
}

pub fn metadata_features(forum: &Forum, day: NaiveDate, experts: &BTreeSet<String>) -> MetadataCounts {
    let mut threads = BTreeSet::new();
    let mut users = BTreeSet::new();
    let mut expert_threads = BTreeSet::new();
    let mut cves = BTreeSet::new();
    for (thread_id, posts) in &forum.threads {
        for post in posts {
            if post.date() != day {
                continue;
            }
            threads.insert(thread_id.as_str());
            users.insert(post.user_id.as_str());
            if experts.contains(&post.user_id) {
                expert_threads.insert(thread_id.as_str());
            }
            cves.extend(post.cve_mentions.iter().map(String::as_str));
        }
    }
    MetadataCounts {
        n_threads: threads.len(),
        n_users: users.len(),
        n_expert_threads: expert_threads.len(),
        n_cve_mentions: cves.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureConfig {
    pub params: ConstructionParams,
    pub indeg_threshold: usize,
    pub top_k: usize,
    pub seed: u64,
    pub stationary_mode: StationaryMode,
    pub replies_aggregation: ReplyAggregation,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            params: ConstructionParams::default(),
            indeg_threshold: 10,
            top_k: 5,
            seed: 0,
            stationary_mode: StationaryMode::UndirectedDegree,
            replies_aggregation: ReplyAggregation::Mean,
        }
    }
}

/// Driver: one series per requested (feature, forum) over the schedule's
/// study span. Historical artifacts (graph, experts, communities) are built
/// once per subsequence window; days are scored on the merged graph.
pub fn compute_feature_series(
    corpus: &Corpus,
    cpe_map: &CpeMap,
    schedule: &WindowSchedule,
    config: &FeatureConfig,
    features: &[FeatureId],
) -> Result<BTreeMap<(FeatureId, String), FeatureSeries>, FeatureError> {
    let span = schedule.study_span().ok_or(FeatureError::EmptySchedule)?;
    let n_days = span.num_days();
    let mut out: BTreeMap<(FeatureId, String), FeatureSeries> = BTreeMap::new();
    for feature in features {
        for forum_id in corpus.forums.keys() {
            out.insert(
                (*feature, forum_id.clone()),
                FeatureSeries {
                    feature_id: *feature,
                    forum_id: forum_id.clone(),
                    span,
                    values: vec![0.0; n_days],
                    coverage: vec![Coverage::EmptyGraph; n_days],
                },
            );
        }
    }
    for (tau, history) in &schedule.pairs {
        // CPE groups are ranked over the whole corpus; experts are per forum.
        let ranking = rank_cpe_groups(corpus.posts(), cpe_map, *history, config.top_k);
        for (forum_id, forum) in &corpus.forums {
            let historical = create_graph(&forum.threads, *history, &config.params);
            let experts = extract_experts(
                &historical,
                forum.posts(),
                &ranking,
                cpe_map,
                config.indeg_threshold,
            );
            let assignment = louvain_communities(&historical, config.seed);
            let expert_comms = expert_communities(&assignment, &experts.members);
            for day in tau.days() {
                let idx = span.day_index(day).expect("tau inside study span");
                let day_window = TimeWindow::new(day, day).expect("single day");
                let daily = create_graph(&forum.threads, day_window, &config.params);
                let merged = merge(&historical, &daily);
                for feature in features {
                    let (value, coverage) = if daily.vertex_count() == 0 {
                        (0.0, Coverage::EmptyGraph)
                    } else if feature.is_graph_feature() && experts.is_empty() {
                        (0.0, Coverage::NoExperts)
                    } else {
                        evaluate_feature(
                            *feature,
                            forum,
                            day,
                            &merged,
                            &daily,
                            &experts.members,
                            &assignment,
                            &expert_comms,
                            config,
                        )
                    };
                    let series = out
                        .get_mut(&(*feature, forum_id.clone()))
                        .expect("series preallocated");
                    series.values[idx] = value;
                    series.coverage[idx] = coverage;
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_feature(
    feature: FeatureId,
    forum: &Forum,
    day: NaiveDate,
    merged: &ReplyGraph,
    daily: &ReplyGraph,
    experts: &BTreeSet<String>,
    assignment: &CommunityAssignment,
    expert_comms: &BTreeSet<usize>,
    config: &FeatureConfig,
) -> (f64, Coverage) {
    match feature {
        FeatureId::Conductance => match graph_conductance(merged, experts, config.stationary_mode)
        {
            Ok(v) => (v, Coverage::Computed),
            Err(_) => (0.0, Coverage::EmptyGraph),
        },
        FeatureId::ShortestPath => {
            let summary = avg_shortest_path(merged, experts, daily.vertices());
            if summary.included == 0 {
                (0.0, Coverage::EmptyGraph)
            } else {
                (summary.mean, Coverage::Computed)
            }
        }
        FeatureId::ExpertReplies => (
            expert_replies(merged, experts, config.replies_aggregation),
            Coverage::Computed,
        ),
        FeatureId::CommonCommunities => (
            common_communities(merged, daily.vertices(), experts, assignment, expert_comms)
                as f64,
            Coverage::Computed,
        ),
        FeatureId::NThreads
        | FeatureId::NUsers
        | FeatureId::NExpertThreads
        | FeatureId::NCveMentions => {
            let counts = metadata_features(forum, day, experts);
            let v = match feature {
                FeatureId::NThreads => counts.n_threads,
                FeatureId::NUsers => counts.n_users,
                FeatureId::NExpertThreads => counts.n_expert_threads,
                FeatureId::NCveMentions => counts.n_cve_mentions,
                _ => unreachable!(),
            };
            (v as f64, Coverage::Computed)
        }
    }
}

/// Wide CSV: rows = days, one column per (feature, forum).
pub fn write_feature_csv(
    series: &BTreeMap<(FeatureId, String), FeatureSeries>,
    mut out: impl Write,
) -> std::io::Result<()> {
    write_csv(series, &mut out, |s, i| format!("{}", s.values[i]))
}

/// Parallel coverage CSV with the same shape as the value CSV.
pub fn write_coverage_csv(
    series: &BTreeMap<(FeatureId, String), FeatureSeries>,
    mut out: impl Write,
) -> std::io::Result<()> {
    write_csv(series, &mut out, |s, i| s.coverage[i].as_str().to_string())
}

fn write_csv(
    series: &BTreeMap<(FeatureId, String), FeatureSeries>,
    out: &mut impl Write,
    cell: impl Fn(&FeatureSeries, usize) -> String,
) -> std::io::Result<()> {
    let Some(span) = series.values().next().map(|s| s.span) else {
        return Ok(());
    };
    write!(out, "day")?;
    for (feature, forum) in series.keys() {
        write!(out, ",{}:{}", feature.as_str(), forum)?;
    }
    writeln!(out)?;
    for (i, day) in span.days().enumerate() {
        write!(out, "{}", day.format("%Y-%m-%d"))?;
        for s in series.values() {
            write!(out, ",{}", cell(s, i))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Post;
    use crate::reply_graph::{build_window_schedule, ReplyEdge};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDateTime;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn window() -> TimeWindow {
        TimeWindow::new(
            NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2017, 1, 31).unwrap(),
        )
        .unwrap()
    }

    fn graph(edges: &[(&str, &str)], extra: &[&str]) -> ReplyGraph {
        let mut g = ReplyGraph::empty(window());
        for v in extra {
            g.add_vertex(v);
        }
        for (a, b) in edges {
            g.add_edge(ReplyEdge {
                replier: a.to_string(),
                replied_to: b.to_string(),
                reply_time: window().start.and_hms_opt(0, 0, 0).unwrap(),
            });
        }
        g
    }

    fn set(users: &[&str]) -> BTreeSet<String> {
        users.iter().map(|u| u.to_string()).collect()
    }

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M").unwrap()
    }

    fn post(forum: &str, thread: &str, id: u64, user: &str, time: &str, cves: &[&str]) -> Post {
        Post {
            forum_id: forum.to_string(),
            thread_id: thread.to_string(),
            post_id: id,
            user_id: user.to_string(),
            timestamp: ts(time),
            cve_mentions: cves.iter().map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn stationary_single_edge_symmetric() {
        let g = graph(&[("A", "B")], &[]);
        let pi = stationary_distribution(&g, StationaryMode::UndirectedDegree).unwrap();
        assert_abs_diff_eq!(pi.prob("A"), 0.5);
        assert_abs_diff_eq!(pi.prob("B"), 0.5);
    }

    #[test]
    fn stationary_star_by_degree() {
        let g = graph(&[("l1", "c"), ("l2", "c"), ("l3", "c")], &[]);
        let pi = stationary_distribution(&g, StationaryMode::UndirectedDegree).unwrap();
        assert_abs_diff_eq!(pi.prob("c"), 0.5);
        for leaf in ["l1", "l2", "l3"] {
            assert_abs_diff_eq!(pi.prob(leaf), 1.0 / 6.0);
        }
    }

    #[test]
    fn stationary_teleport_two_cycle_uniform() {
        let g = graph(&[("A", "B"), ("B", "A")], &[]);
        let pi = stationary_distribution(&g, StationaryMode::TeleportRandomWalk).unwrap();
        assert_abs_diff_eq!(pi.prob("A"), 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(pi.prob("B"), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn stationary_sums_to_one() {
        let g = graph(
            &[("a", "b"), ("b", "c"), ("c", "d"), ("d", "a"), ("a", "c")],
            &["iso"],
        );
        for mode in [StationaryMode::UndirectedDegree, StationaryMode::TeleportRandomWalk] {
            let pi = stationary_distribution(&g, mode).unwrap();
            let sum: f64 = pi.probs.values().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
            assert!(pi.probs.values().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn stationary_empty_graph_errors() {
        let g = graph(&[], &["x"]);
        assert!(stationary_distribution(&g, StationaryMode::UndirectedDegree).is_err());
    }

    #[test]
    fn conductance_singleton_expert_is_one() {
        let g = graph(&[("e", "u")], &[]);
        let phi = graph_conductance(&g, &set(&["e"]), StationaryMode::UndirectedDegree).unwrap();
        assert_abs_diff_eq!(phi, 1.0);
    }

    #[test]
    fn conductance_two_expert_hand_value() {
        // e1-e2, e1-u1, e2-u2: pi(e1)=pi(e2)=0.25, cross flow 0.25, pi(exp)=0.5.
        let g = graph(&[("e1", "e2"), ("u1", "e1"), ("u2", "e2")], &[]);
        let phi =
            graph_conductance(&g, &set(&["e1", "e2"]), StationaryMode::UndirectedDegree).unwrap();
        assert_abs_diff_eq!(phi, 0.5);
    }

    #[test]
    fn conductance_empty_or_full_expert_set_is_zero() {
        let g = graph(&[("a", "b")], &[]);
        assert_eq!(
            graph_conductance(&g, &set(&[]), StationaryMode::UndirectedDegree).unwrap(),
            0.0
        );
        assert_eq!(
            graph_conductance(&g, &set(&["a", "b"]), StationaryMode::UndirectedDegree).unwrap(),
            0.0
        );
    }

    /// Definitional brute force: explicit transition matrix, explicit sum.
    fn brute_conductance(g: &ReplyGraph, experts: &BTreeSet<String>, mode: StationaryMode) -> f64 {
        let names: Vec<&String> = g.vertices().iter().collect();
        let n = names.len();
        let idx: BTreeMap<&str, usize> =
            names.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        let mut p = vec![vec![0.0f64; n]; n];
        let pi = match mode {
            StationaryMode::UndirectedDegree => {
                let adj = g.undirected_adjacency();
                for (u, nb) in &adj {
                    for v in nb {
                        p[idx[u]][idx[*v]] = 1.0 / adj[u].len() as f64;
                    }
                }
                let two_m: f64 = adj.values().map(|x| x.len() as f64).sum();
                names
                    .iter()
                    .map(|v| adj[v.as_str()].len() as f64 / two_m)
                    .collect::<Vec<f64>>()
            }
            StationaryMode::TeleportRandomWalk => {
                for u in &names {
                    let out = g.out_neighbors(u);
                    for row in p[idx[u.as_str()]].iter_mut() {
                        *row = if out.is_empty() {
                            1.0 / n as f64
                        } else {
                            0.15 / n as f64
                        };
                    }
                    for v in out {
                        p[idx[u.as_str()]][idx[v]] += 0.85 / g.out_neighbors(u).len() as f64;
                    }
                }
                // Fixed point by repeated multiplication.
                let mut pi = vec![1.0 / n as f64; n];
                for _ in 0..100_000 {
                    let mut next = vec![0.0; n];
                    for (i, row) in p.iter().enumerate() {
                        for (j, &pij) in row.iter().enumerate() {
                            next[j] += pi[i] * pij;
                        }
                    }
                    let delta: f64 =
                        pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
                    pi = next;
                    if delta < 1e-14 {
                        break;
                    }
                }
                pi
            }
        };
        let exp_idx: BTreeSet<usize> = experts
            .iter()
            .filter_map(|e| idx.get(e.as_str()).copied())
            .collect();
        let pi_exp: f64 = exp_idx.iter().map(|&i| pi[i]).sum();
        if pi_exp == 0.0 {
            return 0.0;
        }
        let mut flow = 0.0;
        for &x in &exp_idx {
            for y in 0..n {
                if !exp_idx.contains(&y) {
                    flow += pi[x] * p[x][y];
                }
            }
        }
        (flow / pi_exp).clamp(0.0, 1.0)
    }

    #[test]
    fn conductance_matches_brute_force_on_small_graphs() {
        let mut rng = StdRng::seed_from_u64(7);
        let users = ["a", "b", "c", "d", "e", "f"];
        for trial in 0..200 {
            let n = rng.gen_range(2..=6);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.gen_bool(0.4) {
                        edges.push((users[i], users[j]));
                    }
                }
            }
            if edges.is_empty() {
                continue;
            }
            let g = graph(&edges, &users[..n].iter().copied().collect::<Vec<_>>());
            let k = rng.gen_range(1..n);
            let experts: BTreeSet<String> =
                users[..k].iter().map(|u| u.to_string()).collect();
            for mode in [StationaryMode::UndirectedDegree, StationaryMode::TeleportRandomWalk] {
                let fast = graph_conductance(&g, &experts, mode).unwrap();
                let slow = brute_conductance(&g, &experts, mode);
                assert!(
                    (fast - slow).abs() < 1e-8,
                    "trial {trial} mode {mode:?}: {fast} vs {slow}"
                );
                assert!((0.0..=1.0).contains(&fast));
            }
        }
    }

    #[test]
    fn shortest_path_direct_edge() {
        let g = graph(&[("e", "u")], &[]);
        let s = avg_shortest_path(&g, &set(&["e"]), &set(&["e", "u"]));
        assert_eq!(s.mean, 1.0);
        assert_eq!((s.included, s.excluded), (1, 0));
    }

    #[test]
    fn shortest_path_through_historical_node() {
        // a is historical-only: not in the current vertex set, so not a
        // target, but usable as a hop.
        let g = graph(&[("e", "a"), ("a", "u")], &[]);
        let s = avg_shortest_path(&g, &set(&["e"]), &set(&["u"]));
        assert_eq!(s.mean, 2.0);
    }

    #[test]
    fn shortest_path_unreachable_expert_excluded() {
        let g = graph(&[("e1", "u"), ("x", "e2")], &[]);
        let s = avg_shortest_path(&g, &set(&["e1", "e2"]), &set(&["u"]));
        assert_eq!(s.mean, 1.0);
        assert_eq!((s.included, s.excluded), (1, 1));
    }

    /// Floyd-Warshall oracle on random 8-node digraphs.
    #[test]
    fn shortest_path_matches_floyd_warshall() {
        let mut rng = StdRng::seed_from_u64(11);
        let users = ["a", "b", "c", "d", "e", "f", "g", "h"];
        for _ in 0..100 {
            let mut edges = Vec::new();
            for i in 0..8 {
                for j in 0..8 {
                    if i != j && rng.gen_bool(0.2) {
                        edges.push((users[i], users[j]));
                    }
                }
            }
            let g = graph(&edges, &users);
            let experts = set(&["a", "b"]);
            let current = set(&["c", "d", "e"]);
            const INF: usize = usize::MAX / 2;
            let mut dist = [[INF; 8]; 8];
            for (i, row) in dist.iter_mut().enumerate() {
                row[i] = 0;
            }
            for (u, v) in &edges {
                let ui = users.iter().position(|x| x == u).unwrap();
                let vi = users.iter().position(|x| x == v).unwrap();
                dist[ui][vi] = 1;
            }
            for k in 0..8 {
                for i in 0..8 {
                    for j in 0..8 {
                        dist[i][j] = dist[i][j].min(dist[i][k] + dist[k][j]);
                    }
                }
            }
            let mut total = 0.0;
            let mut included = 0;
            for e in ["a", "b"] {
                let ei = users.iter().position(|x| *x == e).unwrap();
                let best = [2usize, 3, 4]
                    .iter()
                    .map(|&t| dist[ei][t])
                    .filter(|&d| d > 0)
                    .min()
                    .unwrap_or(INF);
                if best < INF {
                    total += best as f64;
                    included += 1;
                }
            }
            let expected = if included > 0 { total / included as f64 } else { 0.0 };
            let s = avg_shortest_path(&g, &experts, &current);
            assert_eq!(s.included, included);
            assert_abs_diff_eq!(s.mean, expected);
        }
    }

    #[test]
    fn expert_replies_mean_and_total() {
        let g = graph(&[("e1", "a"), ("e1", "b"), ("e1", "c"), ("e1", "d")], &["e2"]);
        let experts = set(&["e1", "e2"]);
        assert_eq!(expert_replies(&g, &experts, ReplyAggregation::Mean), 2.0);
        assert_eq!(expert_replies(&g, &experts, ReplyAggregation::Total), 4.0);
        let one = set(&["e1"]);
        let g3 = graph(&[("e1", "a"), ("e1", "b"), ("e1", "c")], &[]);
        assert_eq!(expert_replies(&g3, &one, ReplyAggregation::Mean), 3.0);
    }

    fn assignment(pairs: &[(&str, usize)]) -> CommunityAssignment {
        CommunityAssignment {
            communities: pairs.iter().map(|(u, c)| (u.to_string(), *c)).collect(),
        }
    }

    #[test]
    fn common_communities_historical_share() {
        // u is historical and sits in the expert community.
        let merged = graph(&[("e", "x")], &["u"]);
        let a = assignment(&[("e", 0), ("u", 0), ("x", 1)]);
        let experts = set(&["e"]);
        let comms = expert_communities(&a, &experts);
        let n = common_communities(&merged, &set(&["u"]), &experts, &a, &comms);
        assert_eq!(n, 1);
    }

    #[test]
    fn common_communities_condition1_new_user() {
        // u is new (no community) but an expert replied to them today.
        let merged = graph(&[("e", "u")], &[]);
        let a = assignment(&[("e", 0)]);
        let experts = set(&["e"]);
        let comms = expert_communities(&a, &experts);
        assert_eq!(common_communities(&merged, &set(&["u"]), &experts, &a, &comms), 1);
    }

    #[test]
    fn common_communities_condition2_neighbor_community() {
        // u is new; their in-neighbor n sits in the expert community.
        let merged = graph(&[("n", "u")], &[]);
        let a = assignment(&[("e", 3), ("n", 3)]);
        let experts = set(&["e"]);
        let comms = expert_communities(&a, &experts);
        assert_eq!(common_communities(&merged, &set(&["u"]), &experts, &a, &comms), 1);
    }

    #[test]
    fn common_communities_counts_each_user_once() {
        // u satisfies the community test and both edge conditions: still 1.
        let merged = graph(&[("e", "u"), ("n", "u")], &[]);
        let a = assignment(&[("e", 0), ("n", 0), ("u", 0)]);
        let experts = set(&["e"]);
        let comms = expert_communities(&a, &experts);
        assert_eq!(common_communities(&merged, &set(&["u"]), &experts, &a, &comms), 1);
    }

    #[test]
    fn common_communities_excludes_experts_and_unrelated() {
        // e is an expert (never counted); w has no tie to the experts.
        let merged = graph(&[("e", "u"), ("z", "w")], &[]);
        let a = assignment(&[("e", 0), ("z", 1), ("w", 1)]);
        let experts = set(&["e"]);
        let comms = expert_communities(&a, &experts);
        let n = common_communities(&merged, &set(&["e", "u", "w"]), &experts, &a, &comms);
        assert_eq!(n, 1);
    }

    #[test]
    fn common_communities_hand_traces() {
        // Larger hand-traced cases: experts {e1,e2}, communities
        // {e1:0, e2:1, h1:0, h2:2, n1:1}.
        let a = assignment(&[("e1", 0), ("e2", 1), ("h1", 0), ("h2", 2), ("n1", 1)]);
        let experts = set(&["e1", "e2"]);
        let comms = expert_communities(&a, &experts);
        assert_eq!(comms, BTreeSet::from([0, 1]));
        let merged = graph(&[("e1", "h2"), ("n1", "fresh"), ("h2", "other")], &[]);
        // h1: community 0 -> counted. h2: community 2, expert edge e1->h2 ->
        // counted. fresh: in-neighbor n1 in community 1 -> counted.
        // other: in-neighbor h2 in community 2 -> not counted.
        let current = set(&["h1", "h2", "fresh", "other", "e1"]);
        assert_eq!(common_communities(&merged, &current, &experts, &a, &comms), 3);
    }

    #[test]
    fn metadata_counts_trivial_examples() {
        let forum = Forum {
            threads: BTreeMap::from([
                (
                    "h1".to_string(),
                    vec![
                        post("f", "h1", 1, "A", "2017-01-05 10:00", &["CVE-2017-0001"]),
                        post("f", "h1", 2, "B", "2017-01-05 11:00", &["CVE-2017-0001"]),
                    ],
                ),
                (
                    "h2".to_string(),
                    vec![post("f", "h2", 3, "A", "2017-01-05 12:00", &["CVE-2017-0002"])],
                ),
            ]),
        };
        let day = NaiveDate::from_ymd_opt(2017, 1, 5).unwrap();
        let counts = metadata_features(&forum, day, &set(&["A"]));
        assert_eq!(counts.n_threads, 2);
        assert_eq!(counts.n_users, 2);
        assert_eq!(counts.n_expert_threads, 2);
        assert_eq!(counts.n_cve_mentions, 2);
        let expert_in_one = metadata_features(&forum, day, &set(&["B"]));
        assert_eq!(expert_in_one.n_expert_threads, 1);
        let off_day = metadata_features(&forum, NaiveDate::from_ymd_opt(2017, 1, 6).unwrap(), &set(&[]));
        assert_eq!(off_day, MetadataCounts::default());
    }

    #[test]
    fn metadata_monotone_under_added_posts() {
        let mut forum = Forum {
            threads: BTreeMap::from([(
                "h1".to_string(),
                vec![post("f", "h1", 1, "A", "2017-01-05 10:00", &[])],
            )]),
        };
        let day = NaiveDate::from_ymd_opt(2017, 1, 5).unwrap();
        let before = metadata_features(&forum, day, &set(&[]));
        forum
            .threads
            .entry("h3".to_string())
            .or_default()
            .push(post("f", "h3", 9, "C", "2017-01-05 13:00", &["CVE-2017-9999"]));
        let after = metadata_features(&forum, day, &set(&[]));
        assert!(after.n_threads >= before.n_threads);
        assert!(after.n_users >= before.n_users);
        assert!(after.n_expert_threads >= before.n_expert_threads);
        assert!(after.n_cve_mentions >= before.n_cve_mentions);
    }

    /// Corpus with one forum: a historical phase dense enough to make
    /// `hub` an expert, then some current-month activity.
    fn driver_corpus() -> (Corpus, CpeMap) {
        let mut posts = Vec::new();
        let mut id = 0;
        // History (January..March): hub starts 12 threads, each answered
        // quickly by a distinct user, giving hub in-degree 12.
        for i in 0..12 {
            id += 1;
            let day = 1 + (i % 25) as u32;
            let month = 1 + (i % 3) as u32;
            posts.push(post(
                "f1",
                &format!("t{i}"),
                id,
                "hub",
                &format!("2017-{month:02}-{day:02} 10:00"),
                &["CVE-2017-0001"],
            ));
            id += 1;
            posts.push(post(
                "f1",
                &format!("t{i}"),
                id,
                &format!("u{i}"),
                &format!("2017-{month:02}-{day:02} 10:05"),
                &[],
            ));
        }
        // April (the scored month): v1 opens a thread on the 2nd and hub
        // replies to it; on the 3rd hub posts alone.
        for (day, th, user) in [(2, "a1", "v1"), (2, "a1", "hub"), (3, "a2", "hub")] {
            id += 1;
            let minute = id % 50;
            posts.push(post(
                "f1",
                th,
                id,
                user,
                &format!("2017-04-{day:02} 10:{minute:02}"),
                &[],
            ));
        }
        let corpus = crate::corpus::Corpus::from_posts(posts);
        let mut cpe = CpeMap::default();
        cpe.insert("CVE-2017-0001", ["vendor:prod".to_string()]);
        (corpus, cpe)
    }

    #[test]
    fn driver_emits_full_span_with_flags() {
        let (corpus, cpe) = driver_corpus();
        let span = TimeWindow::new(
            NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2017, 4, 30).unwrap(),
        )
        .unwrap();
        let schedule = build_window_schedule(span, 1, 3).unwrap();
        assert_eq!(schedule.pairs.len(), 1);
        let config = FeatureConfig::default();
        let series =
            compute_feature_series(&corpus, &cpe, &schedule, &config, &FeatureId::ALL).unwrap();
        assert_eq!(series.len(), 8);
        let replies = &series[&(FeatureId::ExpertReplies, "f1".to_string())];
        assert_eq!(replies.values.len(), 30);
        // hub posted on April 2-3; silent days are flagged.
        let apr2 = replies.span.day_index(NaiveDate::from_ymd_opt(2017, 4, 2).unwrap()).unwrap();
        assert_eq!(replies.coverage[apr2], Coverage::Computed);
        assert!(replies.values[apr2] > 0.0);
        let apr10 = replies.span.day_index(NaiveDate::from_ymd_opt(2017, 4, 10).unwrap()).unwrap();
        assert_eq!(replies.coverage[apr10], Coverage::EmptyGraph);
        assert_eq!(replies.values[apr10], 0.0);
        // Metadata on an active day.
        let threads = &series[&(FeatureId::NThreads, "f1".to_string())];
        assert_eq!(threads.values[apr2], 1.0);
    }

    #[test]
    fn driver_deterministic() {
        let (corpus, cpe) = driver_corpus();
        let span = corpus.span().unwrap();
        let schedule = build_window_schedule(span, 1, 3).unwrap();
        let config = FeatureConfig::default();
        let a = compute_feature_series(&corpus, &cpe, &schedule, &config, &FeatureId::ALL).unwrap();
        let b = compute_feature_series(&corpus, &cpe, &schedule, &config, &FeatureId::ALL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn driver_no_experts_flag() {
        // Strip the CVE mentions so nobody qualifies as an expert.
        let (mut corpus, cpe) = driver_corpus();
        for forum in corpus.forums.values_mut() {
            for posts in forum.threads.values_mut() {
                for p in posts {
                    p.cve_mentions.clear();
                }
            }
        }
        let span = corpus.span().unwrap();
        let schedule = build_window_schedule(span, 1, 3).unwrap();
        let config = FeatureConfig::default();
        let series =
            compute_feature_series(&corpus, &cpe, &schedule, &config, &[FeatureId::Conductance])
                .unwrap();
        let s = &series[&(FeatureId::Conductance, "f1".to_string())];
        let apr2 = s.span.day_index(NaiveDate::from_ymd_opt(2017, 4, 2).unwrap()).unwrap();
        assert_eq!(s.coverage[apr2], Coverage::NoExperts);
    }

    #[test]
    fn csv_round_shape() {
        let (corpus, cpe) = driver_corpus();
        let span = corpus.span().unwrap();
        let schedule = build_window_schedule(span, 1, 3).unwrap();
        let config = FeatureConfig::default();
        let series =
            compute_feature_series(&corpus, &cpe, &schedule, &config, &FeatureId::ALL).unwrap();
        let mut values = Vec::new();
        write_feature_csv(&series, &mut values).unwrap();
        let text = String::from_utf8(values).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Header plus the three clamped April days.
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("day,"));
        assert_eq!(lines[0].split(',').count(), 9);
        let mut flags = Vec::new();
        write_coverage_csv(&series, &mut flags).unwrap();
        let flag_text = String::from_utf8(flags).unwrap();
        assert_eq!(flag_text.lines().count(), 4);
        // April 1 is silent.
        assert!(flag_text.contains("empty-graph"));
    }

    #[test]
    fn tau_of_one_month_scores_days_of_that_month() {
        let (corpus, cpe) = driver_corpus();
        let span = corpus.span().unwrap();
        let schedule = build_window_schedule(span, 1, 3).unwrap();
        let (tau, hist) = &schedule.pairs[0];
        assert_eq!(tau.start, NaiveDate::from_ymd_opt(2017, 4, 1).unwrap());
        assert_eq!(hist.start, NaiveDate::from_ymd_opt(2017, 1, 1).unwrap());
        assert_eq!(hist.end, NaiveDate::from_ymd_opt(2017, 3, 31).unwrap());
        let config = FeatureConfig::default();
        let series = compute_feature_series(
            &corpus,
            &cpe,
            &schedule,
            &config,
            &[FeatureId::ShortestPath],
        )
        .unwrap();
        let s = &series[&(FeatureId::ShortestPath, "f1".to_string())];
        // The last window is clamped to the span end (April 3).
        assert_eq!(s.values.len(), 3);
        // On April 2 hub replies to v1 within thresh_temp: hub -> v1, a
        // current-day non-expert, so the distance is 1.
        let apr2 = s.span.day_index(NaiveDate::from_ymd_opt(2017, 4, 2).unwrap()).unwrap();
        assert_eq!(s.coverage[apr2], Coverage::Computed);
        assert_eq!(s.values[apr2], 1.0);
        // On April 3 hub posts alone: no current-day non-expert target.
        let apr3 = s.span.day_index(NaiveDate::from_ymd_opt(2017, 4, 3).unwrap()).unwrap();
        assert_eq!(s.coverage[apr3], Coverage::EmptyGraph);
    }
}
