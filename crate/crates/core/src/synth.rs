//! Synthetic corpus generator with planted attacks: background chatter,
//! weekly expert anchor threads, and dense expert reply bursts in the days
//! leading up to each planted attack. Deterministic under the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{AttackData, Corpus, CpeMap, EventType, Post, TimeWindow};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub n_forums: usize,
    pub n_users_per_forum: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    /// Zero-based day offsets of planted attacks.
    pub planted_attack_days: BTreeSet<usize>,
    pub event_type: EventType,
    /// Days between the start of the planted attention burst and the attack.
    pub burst_lead: usize,
    /// Expected background threads per forum per day.
    pub noise_rate: f64,
    /// Target ratio of burst-day expert replies to background expert replies.
    pub burst_factor: f64,
    pub n_experts_per_forum: usize,
    pub seed: u64,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        SyntheticScenario {
            n_forums: 10,
            n_users_per_forum: 300,
            n_days: 540,
            start: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
            // Attacks spread across the span past the first history months,
            // spaced so that pre-attack bursts never touch a neighbor's
            // detection window.
            planted_attack_days: (0..13).map(|i| 130 + i * 30).collect(),
            event_type: EventType::MaliciousEmail,
            burst_lead: 8,
            noise_rate: 2.0,
            burst_factor: 5.0,
            n_experts_per_forum: 3,
            seed: 1,
        }
    }
}

impl SyntheticScenario {
    pub fn span(&self) -> TimeWindow {
        TimeWindow {
            start: self.start,
            end: self.start + Duration::days(self.n_days as i64 - 1),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidScenario(m.to_string()));
        if self.n_forums == 0 || self.n_users_per_forum < 10 || self.n_days == 0 {
            return bad("need forums, at least 10 users per forum, and days");
        }
        if self.burst_lead == 0 {
            return bad("burst_lead must be positive");
        }
        if self.n_experts_per_forum == 0 || self.n_experts_per_forum * 4 > self.n_users_per_forum
        {
            return bad("experts must be a small fraction of the users");
        }
        if self.noise_rate < 0.0 || self.burst_factor < 1.0 {
            return bad("noise_rate must be >= 0 and burst_factor >= 1");
        }
        for &d in &self.planted_attack_days {
            if d < self.burst_lead || d >= self.n_days {
                return bad("attack days must leave room for their burst and fit the span");
            }
        }
        Ok(())
    }
}

/// Planted ground truth, kept for oracles and run summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPlan {
    pub span: TimeWindow,
    pub attack_days: BTreeSet<NaiveDate>,
    /// Days covered by some pre-attack burst.
    pub burst_days: BTreeSet<NaiveDate>,
    /// forum -> planted expert user ids.
    pub experts: BTreeMap<String, BTreeSet<String>>,
    pub post_count: usize,
    pub cve_pool: usize,
    pub top_groups: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub attacks: AttackData,
    pub cpe_map: CpeMap,
    pub plan: GeneratorPlan,
}

const CORE_CVES: usize = 30;
const RARE_CVES: usize = 20;
const CORE_GROUPS: usize = 5;
const RARE_GROUPS: usize = 5;
const ANCHOR_REPLIES: usize = 5;

fn cve_name(i: usize) -> String {
    format!("CVE-2015-{}", 1000 + i)
}

fn build_cpe_map() -> CpeMap {
    let mut map = CpeMap::default();
    for i in 0..CORE_CVES {
        // Core CVEs land in one or two of the five core groups.
        let a = format!("vendor{}:app{}", i % CORE_GROUPS, i % CORE_GROUPS);
        if i % 3 == 0 {
            let b = format!(
                "vendor{}:app{}",
                (i + 1) % CORE_GROUPS,
                (i + 1) % CORE_GROUPS
            );
            map.insert(&cve_name(i), [a, b]);
        } else {
            map.insert(&cve_name(i), [a]);
        }
    }
    for i in 0..RARE_CVES {
        let g = format!("rare{}:tool{}", i % RARE_GROUPS, i % RARE_GROUPS);
        map.insert(&cve_name(CORE_CVES + i), [g]);
    }
    map
}

/// Zipf-like draw over 0..pool: P(i) proportional to 1/(i+1).
fn zipf_index(rng: &mut ChaCha8Rng, pool: usize) -> usize {
    let total: f64 = (1..=pool).map(|i| 1.0 / i as f64).sum();
    let mut target = rng.gen_range(0.0..total);
    for i in 0..pool {
        target -= 1.0 / (i + 1) as f64;
        if target <= 0.0 {
            return i;
        }
    }
    pool - 1
}

struct ForumState {
    forum_id: String,
    experts: Vec<String>,
    users: Vec<String>,
    next_thread: usize,
    next_post: u64,
    rotate: usize,
}

impl ForumState {
    fn new_thread(&mut self) -> String {
        self.next_thread += 1;
        format!("{}-t{}", self.forum_id, self.next_thread)
    }

    fn next_post_id(&mut self) -> u64 {
        self.next_post += 1;
        self.next_post
    }

    /// Deterministically rotating distinct non-expert users.
    fn take_users(&mut self, n: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.users[self.rotate % self.users.len()].clone());
            self.rotate += 1;
        }
        out
    }
}

fn at(day: NaiveDate, hour: u32, minute: u32) -> NaiveDateTime {
    day.and_hms_opt(hour, minute % 60, 0).expect("valid time")
}

pub fn synthesize_corpus(scenario: &SyntheticScenario) -> Result<SyntheticCorpus, SynthError> {
    scenario.validate()?;
    let span = scenario.span();
    let cpe_map = build_cpe_map();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut posts: Vec<Post> = Vec::new();
    let attack_days: BTreeSet<NaiveDate> = scenario
        .planted_attack_days
        .iter()
        .map(|&d| scenario.start + Duration::days(d as i64))
        .collect();
    let mut burst_days: BTreeSet<NaiveDate> = BTreeSet::new();
    for &a in &attack_days {
        for back in 1..=scenario.burst_lead {
            burst_days.insert(a - Duration::days(back as i64));
        }
    }
    let mut forums: Vec<ForumState> = (0..scenario.n_forums)
        .map(|f| {
            let forum_id = format!("forum{f:02}");
            let experts: Vec<String> = (0..scenario.n_experts_per_forum)
                .map(|e| format!("{forum_id}-exp{e}"))
                .collect();
            let users: Vec<String> = (0..scenario.n_users_per_forum
                - scenario.n_experts_per_forum)
                .map(|u| format!("{forum_id}-u{u:04}"))
                .collect();
            ForumState {
                forum_id,
                experts,
                users,
                next_thread: 0,
                next_post: 0,
                rotate: 0,
            }
        })
        .collect();
    let mut plan_experts: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for forum in &forums {
        plan_experts.insert(
            forum.forum_id.clone(),
            forum.experts.iter().cloned().collect(),
        );
    }
    for (day_idx, day) in span.days().enumerate() {
        let in_burst = burst_days.contains(&day);
        // One shared activity level per day: background volume and expert
        // chatter co-move across every forum, so normal day-to-day variation
        // is low-rank while burst amplitudes below stay forum-specific.
        let activity = rng.gen_range(0.0..1.0f64);
        let expert_reply_p = 0.05 + 0.35 * activity;
        for forum in &mut forums {
            // Weekly anchor threads keep each expert's CVE activity and
            // in-degree alive in every history window.
            if day_idx % 7 == 0 {
                for e in 0..forum.experts.len() {
                    let expert = forum.experts[e].clone();
                    let thread = forum.new_thread();
                    let base_minute = (7 * e) as u32;
                    let cve = cve_name(zipf_index(&mut rng, CORE_CVES));
                    posts.push(Post {
                        forum_id: forum.forum_id.clone(),
                        thread_id: thread.clone(),
                        post_id: forum.next_post_id(),
                        user_id: expert,
                        timestamp: at(day, 8 + e as u32, base_minute),
                        cve_mentions: BTreeSet::from([cve]),
                    });
                    for (k, replier) in forum.take_users(ANCHOR_REPLIES).into_iter().enumerate()
                    {
                        posts.push(Post {
                            forum_id: forum.forum_id.clone(),
                            thread_id: thread.clone(),
                            post_id: forum.next_post_id(),
                            user_id: replier,
                            timestamp: at(day, 8 + e as u32, base_minute + 1 + k as u32),
                            cve_mentions: BTreeSet::new(),
                        });
                    }
                }
            }
            // Background chatter: short threads, occasional CVE talk, and a
            // small steady trickle of expert replies.
            let n_noise = (scenario.noise_rate * (0.5 + 1.5 * activity)) as usize
                + rng.gen_range(0..2);
            for _ in 0..n_noise {
                let thread = forum.new_thread();
                let pair = forum.take_users(2);
                let hour = rng.gen_range(10..20);
                let minute = rng.gen_range(0..40) as u32;
                let mentions = if rng.gen_bool(0.1) {
                    BTreeSet::from([cve_name(zipf_index(&mut rng, CORE_CVES + RARE_CVES))])
                } else {
                    BTreeSet::new()
                };
                posts.push(Post {
                    forum_id: forum.forum_id.clone(),
                    thread_id: thread.clone(),
                    post_id: forum.next_post_id(),
                    user_id: pair[0].clone(),
                    timestamp: at(day, hour, minute),
                    cve_mentions: mentions,
                });
                posts.push(Post {
                    forum_id: forum.forum_id.clone(),
                    thread_id: thread.clone(),
                    post_id: forum.next_post_id(),
                    user_id: pair[1].clone(),
                    timestamp: at(day, hour, minute + rng.gen_range(1..10) as u32),
                    cve_mentions: BTreeSet::new(),
                });
                // Background expert replies follow the shared activity level.
                if rng.gen_bool(expert_reply_p) {
                    let e = rng.gen_range(0..forum.experts.len());
                    posts.push(Post {
                        forum_id: forum.forum_id.clone(),
                        thread_id: thread,
                        post_id: forum.next_post_id(),
                        user_id: forum.experts[e].clone(),
                        timestamp: at(day, hour, minute + rng.gen_range(10..14) as u32),
                        cve_mentions: BTreeSet::new(),
                    });
                }
            }
            // Pre-attack burst: fresh threads where every expert replies.
            // Amplitudes are bimodal and independent per forum per day, so
            // the burst displacement never lines up along one direction that
            // a low-rank normal model could absorb.
            if in_burst {
                let amplitude = if rng.gen_bool(0.5) {
                    rng.gen_range(6..=12)
                } else {
                    rng.gen_range(0..=1)
                };
                for _ in 0..amplitude {
                    let thread = forum.new_thread();
                    let opener = forum.take_users(1).remove(0);
                    let hour = rng.gen_range(12..18);
                    let minute = rng.gen_range(0..30) as u32;
                    posts.push(Post {
                        forum_id: forum.forum_id.clone(),
                        thread_id: thread.clone(),
                        post_id: forum.next_post_id(),
                        user_id: opener,
                        timestamp: at(day, hour, minute),
                        cve_mentions: BTreeSet::from([cve_name(zipf_index(
                            &mut rng, CORE_CVES,
                        ))]),
                    });
                    for (k, expert) in forum.experts.clone().into_iter().enumerate() {
                        posts.push(Post {
                            forum_id: forum.forum_id.clone(),
                            thread_id: thread.clone(),
                            post_id: forum.next_post_id(),
                            user_id: expert,
                            timestamp: at(day, hour, minute + 1 + k as u32),
                            cve_mentions: BTreeSet::new(),
                        });
                    }
                    // Two trailing non-expert replies keep traffic flowing
                    // both ways across the expert boundary.
                    for (k, replier) in forum.take_users(2).into_iter().enumerate() {
                        posts.push(Post {
                            forum_id: forum.forum_id.clone(),
                            thread_id: thread.clone(),
                            post_id: forum.next_post_id(),
                            user_id: replier,
                            timestamp: at(
                                day,
                                hour,
                                minute + 1 + forum.experts.len() as u32 + k as u32,
                            ),
                            cve_mentions: BTreeSet::new(),
                        });
                    }
                }
            }
        }
    }
    let post_count = posts.len();
    let corpus = Corpus::from_posts(posts);
    let attacks = AttackData::from_records(
        attack_days.iter().map(|&d| (scenario.event_type, d)),
    );
    let top_groups = (0..CORE_GROUPS)
        .map(|g| format!("vendor{g}:app{g}"))
        .collect();
    Ok(SyntheticCorpus {
        corpus,
        attacks,
        cpe_map,
        plan: GeneratorPlan {
            span,
            attack_days,
            burst_days,
            experts: plan_experts,
            post_count,
            cve_pool: CORE_CVES + RARE_CVES,
            top_groups,
        },
    })
}

/// Plan file: planted truth in a line-oriented text form.
pub fn write_plan(plan: &GeneratorPlan, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "generator-plan v1")?;
    writeln!(out, "span {}", plan.span)?;
    writeln!(out, "post_count {}", plan.post_count)?;
    writeln!(out, "cve_pool {}", plan.cve_pool)?;
    for day in &plan.attack_days {
        writeln!(out, "attack_day {}", day.format("%Y-%m-%d"))?;
    }
    for day in &plan.burst_days {
        writeln!(out, "burst_day {}", day.format("%Y-%m-%d"))?;
    }
    for (forum, experts) in &plan.experts {
        for e in experts {
            writeln!(out, "expert {forum} {e}")?;
        }
    }
    for g in &plan.top_groups {
        writeln!(out, "top_group {g}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_posts;
    use crate::experts::{extract_experts, rank_cpe_groups};
    use crate::reply_graph::{create_graph, ConstructionParams};

    fn small_scenario() -> SyntheticScenario {
        SyntheticScenario {
            n_forums: 2,
            n_users_per_forum: 60,
            n_days: 160,
            planted_attack_days: BTreeSet::from([120, 140]),
            ..SyntheticScenario::default()
        }
    }

    #[test]
    fn zero_attacks_means_zero_labels() {
        let mut scenario = small_scenario();
        scenario.planted_attack_days.clear();
        let out = synthesize_corpus(&scenario).unwrap();
        let labels = out
            .attacks
            .daily_labels(scenario.event_type, scenario.span());
        assert!(labels.iter().all(|&l| l == 0));
        assert!(out.plan.burst_days.is_empty());
    }

    #[test]
    fn same_seed_byte_identical() {
        let scenario = small_scenario();
        let a = synthesize_corpus(&scenario).unwrap();
        let b = synthesize_corpus(&scenario).unwrap();
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        write_posts(&a.corpus, &mut fa).unwrap();
        write_posts(&b.corpus, &mut fb).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(a.plan, b.plan);
    }

    #[test]
    fn different_seed_differs() {
        let scenario = small_scenario();
        let mut other = scenario.clone();
        other.seed = 99;
        let a = synthesize_corpus(&scenario).unwrap();
        let b = synthesize_corpus(&other).unwrap();
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        write_posts(&a.corpus, &mut fa).unwrap();
        write_posts(&b.corpus, &mut fb).unwrap();
        assert_ne!(fa, fb);
    }

    #[test]
    fn burst_expert_volume_exceeds_background_by_factor() {
        let scenario = small_scenario();
        let out = synthesize_corpus(&scenario).unwrap();
        let experts: BTreeSet<&String> =
            out.plan.experts.values().flatten().collect();
        let mut per_day: BTreeMap<NaiveDate, usize> = BTreeMap::new();
        for post in out.corpus.posts() {
            if experts.contains(&post.user_id) {
                *per_day.entry(post.date()).or_insert(0) += 1;
            }
        }
        // Expert replies only (anchors are expert thread-openers on every
        // 7th day, counted in both means; the burst signal dominates).
        let mut burst_total = 0usize;
        let mut burst_days = 0usize;
        let mut background_total = 0usize;
        let mut background_days = 0usize;
        for day in scenario.span().days() {
            let c = per_day.get(&day).copied().unwrap_or(0);
            if out.plan.burst_days.contains(&day) {
                burst_total += c;
                burst_days += 1;
            } else {
                background_total += c;
                background_days += 1;
            }
        }
        let burst_mean = burst_total as f64 / burst_days as f64;
        let background_mean = background_total as f64 / background_days as f64;
        assert!(
            burst_mean > scenario.burst_factor * background_mean,
            "burst {burst_mean} vs background {background_mean}"
        );
    }

    #[test]
    fn planted_experts_qualify_in_history_windows() {
        let scenario = small_scenario();
        let out = synthesize_corpus(&scenario).unwrap();
        let history = TimeWindow::new(
            scenario.start,
            scenario.start + Duration::days(89),
        )
        .unwrap();
        let ranking = rank_cpe_groups(out.corpus.posts(), &out.cpe_map, history, 5);
        assert_eq!(
            ranking.top_set(),
            out.plan.top_groups.iter().map(String::as_str).collect()
        );
        for (forum_id, forum) in &out.corpus.forums {
            let graph = create_graph(&forum.threads, history, &ConstructionParams::default());
            let experts = extract_experts(&graph, forum.posts(), &ranking, &out.cpe_map, 10);
            for planted in &out.plan.experts[forum_id] {
                assert!(
                    experts.contains(planted),
                    "{planted} missing from {forum_id} expert set {:?}",
                    experts.members
                );
            }
        }
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut s = small_scenario();
        s.burst_lead = 0;
        assert!(synthesize_corpus(&s).is_err());
        let mut s = small_scenario();
        s.planted_attack_days = BTreeSet::from([3]);
        assert!(synthesize_corpus(&s).is_err());
        let mut s = small_scenario();
        s.planted_attack_days = BTreeSet::from([500]);
        assert!(synthesize_corpus(&s).is_err());
        let mut s = small_scenario();
        s.n_users_per_forum = 5;
        assert!(synthesize_corpus(&s).is_err());
    }

    #[test]
    fn plan_file_lists_planted_truth() {
        let scenario = small_scenario();
        let out = synthesize_corpus(&scenario).unwrap();
        let mut bytes = Vec::new();
        write_plan(&out.plan, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("generator-plan v1"));
        assert_eq!(text.matches("attack_day ").count(), 2);
        assert_eq!(
            text.matches("expert ").count(),
            scenario.n_forums * scenario.n_experts_per_forum
        );
        assert!(text.contains(&format!("post_count {}", out.plan.post_count)));
    }
}
