//! forumcast: pipeline driver over the core library.
//!
//! Subcommands chain through files in the configured output directory:
//! simulate/ingest -> features -> (detect | train -> predict) -> evaluate.
//! Every run writes the resolved configuration beside its outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use clap::{Parser, Subcommand};

use forumcast_core::anomaly::{
    assemble_matrix, fit_subspace, flag_anomalies, predict_attacks_unsupervised, spe_series,
    write_model, ThresholdSpec,
};
use forumcast_core::corpus::{
    load_attacks, load_cpe_map, load_posts, AttackData, Corpus, CpeMap, EventType, PostsFormat,
    TimeWindow,
};
use forumcast_core::evaluation::{
    chrono_split, high_activity_filter, prf1, roc_auc, sampled_baseline_f1, score_grid,
    write_roc_csv, MetricsReport, SplitSpec,
};
use forumcast_core::features::{
    compute_feature_series, write_coverage_csv, write_feature_csv, Coverage, FeatureConfig,
    FeatureId, FeatureSeries, ReplyAggregation, StationaryMode,
};
use forumcast_core::reply_graph::{build_window_schedule, ConstructionParams};
use forumcast_core::supervised::{
    build_lag_features, forum_average, read_logit_model, smote_oversample, train_group_lasso_logit,
    train_ridge_logit, write_logit_model, LagDataset, TrainConfig,
};
use forumcast_core::synth::{synthesize_corpus, write_plan, SyntheticScenario};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "forumcast",
    about = "Forum reply-network features for daily attack prediction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate inputs and write a corpus summary.
    Ingest(ConfigArgs),
    /// Compute per-(feature, forum) daily series.
    Features(ConfigArgs),
    /// Fit subspace models and emit unsupervised predictions.
    Detect(ConfigArgs),
    /// Train a supervised model on the chronological training split.
    Train(ConfigArgs),
    /// Score all eligible days with the trained model.
    Predict(ConfigArgs),
    /// Report precision/recall/F1/AUC against the attack feed.
    Evaluate(ConfigArgs),
    /// Generate a synthetic corpus from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Cap on worker threads (stages here are single-threaded).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Flat key = value scenario file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Flat `key = value` file; `#` starts a comment line.
fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_err(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                i + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct RawConfig {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl RawConfig {
    fn get(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key).map(String::as_str);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| config_err(format!("bad value for {key}: '{raw}'"))),
        }
    }

    fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.map
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }
}

struct PipelineConfig {
    posts_path: PathBuf,
    attacks_path: PathBuf,
    cpe_map_path: PathBuf,
    out_dir: PathBuf,
    posts_format: PostsFormat,
    forum_min_posts: usize,
    params: ConstructionParams,
    tau_months: u32,
    history_months: u32,
    indeg_threshold: usize,
    top_k: usize,
    features: Vec<FeatureId>,
    stationary_mode: StationaryMode,
    replies_aggregation: ReplyAggregation,
    eta: usize,
    delta: usize,
    zeta: u32,
    anomaly_k: usize,
    anomaly_r: usize,
    threshold_spec: ThresholdSpec,
    model_kind: ModelKind,
    lambda: f64,
    m: f64,
    l: f64,
    g: f64,
    smote_k: usize,
    smote_target_ratio: f64,
    decision_threshold: f64,
    event_type: EventType,
    train_ratio: f64,
    high_activity_min_per_week: u32,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ModelKind {
    Ridge,
    GroupLasso,
}

impl ModelKind {
    fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Ridge => "ridge",
            ModelKind::GroupLasso => "group-lasso",
        }
    }
}

fn env_or_key(raw: &RawConfig, env: &str, key: &str) -> Option<String> {
    // Environment overrides are for paths only.
    std::env::var(env)
        .ok()
        .or_else(|| raw.get(key).map(str::to_string))
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(config_err(format!("{name} must be positive, got {v}")))
    }
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, CliError> {
    let raw = RawConfig {
        map: parse_kv_file(&args.config)?,
        used: Default::default(),
    };
    let path_of = |env: &str, key: &str| -> Result<PathBuf, CliError> {
        env_or_key(&raw, env, key)
            .map(PathBuf::from)
            .ok_or_else(|| config_err(format!("missing required key {key}")))
    };
    let posts_path = path_of("FORUMCAST_POSTS", "posts_path")?;
    let attacks_path = path_of("FORUMCAST_ATTACKS", "attacks_path")?;
    let cpe_map_path = path_of("FORUMCAST_CPE_MAP", "cpe_map_path")?;
    let out_dir = match &args.out_dir {
        Some(dir) => dir.clone(),
        None => path_of("FORUMCAST_OUT_DIR", "out_dir")?,
    };
    let posts_format = match raw.get("posts_format").unwrap_or("cve-list") {
        "cve-list" => PostsFormat::CveList,
        "extract-cves" => PostsFormat::ExtractCves,
        other => return Err(config_err(format!("unknown posts_format '{other}'"))),
    };
    let thresh_spat: usize = raw.parse_or("thresh_spat", 10)?;
    let thresh_temp_minutes: i64 = raw.parse_or("thresh_temp_minutes", 15)?;
    if thresh_spat == 0 || thresh_temp_minutes <= 0 {
        return Err(config_err("thresh_spat and thresh_temp_minutes must be positive"));
    }
    let features = match raw.get("features").unwrap_or("all") {
        "all" => FeatureId::ALL.to_vec(),
        list => {
            let mut out = Vec::new();
            for name in list.split(',') {
                let f = FeatureId::from_str(name.trim())
                    .map_err(|e| config_err(format!("features: {e}")))?;
                if !out.contains(&f) {
                    out.push(f);
                }
            }
            out
        }
    };
    if features.is_empty() {
        return Err(config_err("features list is empty"));
    }
    let stationary_mode = match raw.get("stationary_mode").unwrap_or("undirected-degree") {
        "undirected-degree" => StationaryMode::UndirectedDegree,
        "teleport-random-walk" => StationaryMode::TeleportRandomWalk,
        other => return Err(config_err(format!("unknown stationary_mode '{other}'"))),
    };
    let replies_aggregation = match raw.get("replies_aggregation").unwrap_or("mean") {
        "mean" => ReplyAggregation::Mean,
        "total" => ReplyAggregation::Total,
        other => return Err(config_err(format!("unknown replies_aggregation '{other}'"))),
    };
    let anomaly_k: usize = raw.parse_or("anomaly_k", 8)?;
    let anomaly_r: usize = raw.parse_or("anomaly_r", 3)?;
    if anomaly_r >= anomaly_k {
        return Err(config_err(format!(
            "anomaly_r ({anomaly_r}) must be below anomaly_k ({anomaly_k})"
        )));
    }
    let threshold_spec = if let Some(t) = raw.get("threshold_absolute") {
        let t: f64 = t
            .parse()
            .map_err(|_| config_err(format!("bad threshold_absolute '{t}'")))?;
        ThresholdSpec::Absolute(positive("threshold_absolute", t)?)
    } else {
        let q: f64 = raw.parse_or("threshold_quantile", 0.9)?;
        if !(0.0 < q && q < 1.0) {
            return Err(config_err(format!("threshold_quantile must be in (0,1), got {q}")));
        }
        ThresholdSpec::TrainingQuantile(q)
    };
    let model_kind = match raw.get("model").unwrap_or("ridge") {
        "ridge" => ModelKind::Ridge,
        "group-lasso" => ModelKind::GroupLasso,
        other => return Err(config_err(format!("unknown model '{other}'"))),
    };
    let event_type = raw
        .get("event_type")
        .unwrap_or("malicious-email")
        .parse::<EventType>()
        .map_err(|e| config_err(e.to_string()))?;
    let train_ratio: f64 = raw.parse_or("train_ratio", 0.7)?;
    if !(0.0 < train_ratio && train_ratio < 1.0) {
        return Err(config_err(format!("train_ratio must be in (0,1), got {train_ratio}")));
    }
    let decision_threshold: f64 = raw.parse_or("decision_threshold", 0.5)?;
    if !(0.0..=1.0).contains(&decision_threshold) {
        return Err(config_err("decision_threshold must be in [0,1]"));
    }
    let smote_target_ratio: f64 = raw.parse_or("smote_target_ratio", 0.0)?;
    if smote_target_ratio < 0.0 {
        return Err(config_err("smote_target_ratio must be >= 0 (0 disables SMOTE)"));
    }
    let config = PipelineConfig {
        posts_path,
        attacks_path,
        cpe_map_path,
        out_dir,
        posts_format,
        forum_min_posts: raw.parse_or("forum_min_posts", 5000)?,
        params: ConstructionParams::new(thresh_spat, Duration::minutes(thresh_temp_minutes)),
        tau_months: raw.parse_or("tau_months", 1)?,
        history_months: raw.parse_or("history_months", 3)?,
        indeg_threshold: raw.parse_or("indeg_threshold", 10)?,
        top_k: raw.parse_or("top_k", 5)?,
        features,
        stationary_mode,
        replies_aggregation,
        eta: raw.parse_or("eta", 7)?,
        delta: raw.parse_or("delta", 1)?,
        zeta: raw.parse_or("zeta", 7)?,
        anomaly_k,
        anomaly_r,
        threshold_spec,
        model_kind,
        lambda: positive("lambda", raw.parse_or("lambda", 1.0)?)?,
        m: positive("m", raw.parse_or("m", 1.0)?)?,
        l: positive("l", raw.parse_or("l", 0.01)?)?,
        g: positive("g", raw.parse_or("g", 0.01)?)?,
        smote_k: raw.parse_or("smote_k", 5)?,
        smote_target_ratio,
        decision_threshold,
        event_type,
        train_ratio,
        high_activity_min_per_week: raw.parse_or("high_activity_min_per_week", 0)?,
        seed: raw.parse_or("seed", 0)?,
    };
    if config.tau_months == 0 || config.history_months == 0 {
        return Err(config_err("tau_months and history_months must be positive"));
    }
    if config.top_k == 0 {
        return Err(config_err("top_k must be positive"));
    }
    let unused = raw.unused_keys();
    if !unused.is_empty() {
        return Err(config_err(format!("unknown config keys: {}", unused.join(", "))));
    }
    Ok(config)
}

impl PipelineConfig {
    fn resolved(&self) -> String {
        let mut s = String::new();
        let threshold = match self.threshold_spec {
            ThresholdSpec::Absolute(t) => format!("threshold_absolute = {t}"),
            ThresholdSpec::TrainingQuantile(q) => format!("threshold_quantile = {q}"),
        };
        let features: Vec<&str> = self.features.iter().map(|f| f.as_str()).collect();
        let _ = writeln!(s, "posts_path = {}", self.posts_path.display());
        let _ = writeln!(s, "attacks_path = {}", self.attacks_path.display());
        let _ = writeln!(s, "cpe_map_path = {}", self.cpe_map_path.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(
            s,
            "posts_format = {}",
            match self.posts_format {
                PostsFormat::CveList => "cve-list",
                PostsFormat::ExtractCves => "extract-cves",
            }
        );
        let _ = writeln!(s, "forum_min_posts = {}", self.forum_min_posts);
        let _ = writeln!(s, "thresh_spat = {}", self.params.thresh_spat);
        let _ = writeln!(
            s,
            "thresh_temp_minutes = {}",
            self.params.thresh_temp.num_minutes()
        );
        let _ = writeln!(s, "tau_months = {}", self.tau_months);
        let _ = writeln!(s, "history_months = {}", self.history_months);
        let _ = writeln!(s, "indeg_threshold = {}", self.indeg_threshold);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "features = {}", features.join(","));
        let _ = writeln!(
            s,
            "stationary_mode = {}",
            match self.stationary_mode {
                StationaryMode::UndirectedDegree => "undirected-degree",
                StationaryMode::TeleportRandomWalk => "teleport-random-walk",
            }
        );
        let _ = writeln!(
            s,
            "replies_aggregation = {}",
            match self.replies_aggregation {
                ReplyAggregation::Mean => "mean",
                ReplyAggregation::Total => "total",
            }
        );
        let _ = writeln!(s, "eta = {}", self.eta);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "zeta = {}", self.zeta);
        let _ = writeln!(s, "anomaly_k = {}", self.anomaly_k);
        let _ = writeln!(s, "anomaly_r = {}", self.anomaly_r);
        let _ = writeln!(s, "{threshold}");
        let _ = writeln!(s, "model = {}", self.model_kind.as_str());
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "l = {}", self.l);
        let _ = writeln!(s, "g = {}", self.g);
        let _ = writeln!(s, "smote_k = {}", self.smote_k);
        let _ = writeln!(s, "smote_target_ratio = {}", self.smote_target_ratio);
        let _ = writeln!(s, "decision_threshold = {}", self.decision_threshold);
        let _ = writeln!(s, "event_type = {}", self.event_type);
        let _ = writeln!(s, "train_ratio = {}", self.train_ratio);
        let _ = writeln!(
            s,
            "high_activity_min_per_week = {}",
            self.high_activity_min_per_week
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_output(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out_path(name);
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))
    }

    fn prepare_out_dir(&self, command: &str) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| io_err(&self.out_dir, e))?;
        self.write_output(&format!("resolved_config_{command}.txt"), &self.resolved())
    }
}

struct Inputs {
    corpus: Corpus,
    attacks: AttackData,
    cpe_map: CpeMap,
    diagnostics: Vec<String>,
}

fn load_inputs(config: &PipelineConfig) -> Result<Inputs, CliError> {
    let (raw_corpus, post_diags) = load_posts(&config.posts_path, config.posts_format)
        .map_err(|e| data_err(format!("{}: {e}", config.posts_path.display())))?;
    if raw_corpus.post_count() == 0 {
        return Err(data_err(format!(
            "{}: no valid posts",
            config.posts_path.display()
        )));
    }
    let corpus = raw_corpus.filter_min_posts(config.forum_min_posts);
    if corpus.post_count() == 0 {
        return Err(data_err(format!(
            "forum_min_posts = {} removed every forum",
            config.forum_min_posts
        )));
    }
    let (attacks, attack_diags) = load_attacks(&config.attacks_path)
        .map_err(|e| data_err(format!("{}: {e}", config.attacks_path.display())))?;
    let (cpe_map, cpe_diags) = load_cpe_map(&config.cpe_map_path)
        .map_err(|e| data_err(format!("{}: {e}", config.cpe_map_path.display())))?;
    let mut diagnostics = Vec::new();
    for (source, diags) in [
        (&config.posts_path, post_diags),
        (&config.attacks_path, attack_diags),
        (&config.cpe_map_path, cpe_diags),
    ] {
        for d in diags {
            diagnostics.push(format!("{}:{}", source.display(), d));
        }
    }
    Ok(Inputs {
        corpus,
        attacks,
        cpe_map,
        diagnostics,
    })
}

fn cmd_ingest(config: &PipelineConfig) -> Result<(), CliError> {
    config.prepare_out_dir("ingest")?;
    let inputs = load_inputs(config)?;
    let corpus = &inputs.corpus;
    let span = corpus
        .span()
        .ok_or_else(|| data_err("corpus has no posts after filtering"))?;
    let mut cve_mentions = 0usize;
    let mut distinct_cves: BTreeSet<&str> = BTreeSet::new();
    let mut mapped = 0usize;
    for post in corpus.posts() {
        for cve in &post.cve_mentions {
            cve_mentions += 1;
            distinct_cves.insert(cve);
            if inputs.cpe_map.lookup(cve).is_some() {
                mapped += 1;
            }
        }
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "forums {}", corpus.forums.len());
    let _ = writeln!(summary, "posts {}", corpus.post_count());
    let _ = writeln!(summary, "span {span}");
    let _ = writeln!(summary, "cve_mentions {cve_mentions}");
    let _ = writeln!(summary, "distinct_cves {}", distinct_cves.len());
    let _ = writeln!(summary, "mapped_cve_mentions {mapped}");
    for event in EventType::ALL {
        let _ = writeln!(
            summary,
            "incidents_{} {}",
            event,
            inputs.attacks.total_incidents(event)
        );
    }
    let _ = writeln!(summary, "cpe_map_entries {}", inputs.cpe_map.len());
    let _ = writeln!(summary, "rejected_input_lines {}", inputs.diagnostics.len());
    for d in &inputs.diagnostics {
        let _ = writeln!(summary, "rejected {d}");
    }
    config.write_output("ingest_summary.txt", &summary)?;
    println!("ingest: {} forums, {} posts, span {span}", corpus.forums.len(), corpus.post_count());
    Ok(())
}

fn feature_config(config: &PipelineConfig) -> FeatureConfig {
    FeatureConfig {
        params: config.params.clone(),
        indeg_threshold: config.indeg_threshold,
        top_k: config.top_k,
        seed: config.seed,
        stationary_mode: config.stationary_mode,
        replies_aggregation: config.replies_aggregation,
    }
}

fn cmd_features(config: &PipelineConfig) -> Result<(), CliError> {
    config.prepare_out_dir("features")?;
    let inputs = load_inputs(config)?;
    let span = inputs
        .corpus
        .span()
        .ok_or_else(|| data_err("corpus has no posts after filtering"))?;
    let schedule = build_window_schedule(span, config.tau_months, config.history_months)
        .map_err(|e| data_err(format!("window schedule: {e}")))?;
    let series = compute_feature_series(
        &inputs.corpus,
        &inputs.cpe_map,
        &schedule,
        &feature_config(config),
        &config.features,
    )
    .map_err(|e| CliError::Numeric(format!("feature computation: {e}")))?;
    let mut values = Vec::new();
    write_feature_csv(&series, &mut values).map_err(|e| data_err(e.to_string()))?;
    let mut coverage = Vec::new();
    write_coverage_csv(&series, &mut coverage).map_err(|e| data_err(e.to_string()))?;
    config.write_output("features.csv", &String::from_utf8(values).expect("utf8"))?;
    config.write_output("coverage.csv", &String::from_utf8(coverage).expect("utf8"))?;
    let study = schedule.study_span().expect("non-empty schedule");
    println!(
        "features: {} series over {} days ({study})",
        series.len(),
        study.num_days()
    );
    Ok(())
}

/// Read the wide CSV written by the features stage back into per-column
/// series. Coverage is not needed downstream and is marked computed.
fn read_feature_csv(
    path: &Path,
) -> Result<BTreeMap<(FeatureId, String), FeatureSeries>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| data_err(format!("{}: empty file", path.display())))?;
    let mut columns: Vec<(FeatureId, String)> = Vec::new();
    for (i, label) in header.split(',').enumerate() {
        if i == 0 {
            if label != "day" {
                return Err(data_err(format!("{}: bad header", path.display())));
            }
            continue;
        }
        let (feature, forum) = label
            .split_once(':')
            .ok_or_else(|| data_err(format!("{}: bad column '{label}'", path.display())))?;
        let feature = FeatureId::from_str(feature)
            .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        columns.push((feature, forum.to_string()));
    }
    let mut days: Vec<NaiveDate> = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() + 1 {
            return Err(data_err(format!(
                "{}:{}: expected {} fields",
                path.display(),
                lineno + 2,
                columns.len() + 1
            )));
        }
        let day = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
            .map_err(|_| data_err(format!("{}:{}: bad date", path.display(), lineno + 2)))?;
        days.push(day);
        for (c, raw) in fields[1..].iter().enumerate() {
            let v: f64 = raw.parse().map_err(|_| {
                data_err(format!("{}:{}: bad value '{raw}'", path.display(), lineno + 2))
            })?;
            values[c].push(v);
        }
    }
    let (&first, &last) = match (days.first(), days.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(data_err(format!("{}: no data rows", path.display()))),
    };
    let span = TimeWindow::new(first, last).map_err(|e| data_err(e.to_string()))?;
    if span.num_days() != days.len() {
        return Err(data_err(format!("{}: days are not contiguous", path.display())));
    }
    let mut out = BTreeMap::new();
    for ((feature, forum), vals) in columns.into_iter().zip(values) {
        let coverage = vec![Coverage::Computed; vals.len()];
        out.insert(
            (feature, forum.clone()),
            FeatureSeries {
                feature_id: feature,
                forum_id: forum,
                span,
                values: vals,
                coverage,
            },
        );
    }
    Ok(out)
}

fn load_feature_series(
    config: &PipelineConfig,
) -> Result<BTreeMap<(FeatureId, String), FeatureSeries>, CliError> {
    read_feature_csv(&config.out_path("features.csv"))
}

fn split_of(config: &PipelineConfig, span: TimeWindow) -> Result<SplitSpec, CliError> {
    chrono_split(span, config.train_ratio).map_err(|e| data_err(e.to_string()))
}

fn test_labels(
    attacks: &AttackData,
    event: EventType,
    span: TimeWindow,
) -> Vec<bool> {
    attacks
        .daily_labels(event, span)
        .into_iter()
        .map(|l| l > 0)
        .collect()
}

fn cmd_detect(config: &PipelineConfig) -> Result<(), CliError> {
    config.prepare_out_dir("detect")?;
    let series = load_feature_series(config)?;
    let (attacks, _) = load_attacks(&config.attacks_path)
        .map_err(|e| data_err(format!("{}: {e}", config.attacks_path.display())))?;
    let span = series
        .values()
        .next()
        .map(|s| s.span)
        .ok_or_else(|| data_err("features.csv holds no series"))?;
    let split = split_of(config, span)?;
    let labels = test_labels(&attacks, config.event_type, span);
    let test_start = span.day_index(split.test.start).expect("test span within span");
    let mut failures: Vec<String> = Vec::new();
    let mut succeeded = 0usize;
    for &feature in &config.features {
        match detect_one(config, &series, feature, span, &split, &labels, test_start) {
            Ok(report) => {
                succeeded += 1;
                println!("detect {}: {report}", feature.as_str());
            }
            Err(e) => {
                failures.push(format!("{}: {}", feature.as_str(), e.message()));
            }
        }
    }
    let mut log = String::new();
    for f in &failures {
        let _ = writeln!(log, "{f}");
    }
    config.write_output("detect_errors.txt", &log)?;
    if succeeded == 0 {
        return Err(CliError::Numeric(format!(
            "all features degenerate: {}",
            failures.join("; ")
        )));
    }
    for f in &failures {
        eprintln!("detect: skipped {f}");
    }
    Ok(())
}

fn detect_one(
    config: &PipelineConfig,
    series: &BTreeMap<(FeatureId, String), FeatureSeries>,
    feature: FeatureId,
    span: TimeWindow,
    split: &SplitSpec,
    labels: &[bool],
    test_start: usize,
) -> Result<String, CliError> {
    let per_forum: Vec<&FeatureSeries> = series
        .iter()
        .filter(|((f, _), _)| *f == feature)
        .map(|(_, s)| s)
        .collect();
    if per_forum.is_empty() {
        return Err(data_err("feature missing from features.csv".to_string()));
    }
    let k = config.anomaly_k.min(per_forum.len());
    let r = config.anomaly_r.min(k.saturating_sub(1));
    if r == 0 {
        return Err(CliError::Numeric(
            "not enough forum columns for a residual subspace".to_string(),
        ));
    }
    let train_matrix = assemble_matrix(per_forum.iter().copied(), split.train)
        .map_err(|e| data_err(e.to_string()))?;
    let full_matrix = assemble_matrix(per_forum.iter().copied(), span)
        .map_err(|e| data_err(e.to_string()))?;
    let model =
        fit_subspace(&train_matrix, k, r).map_err(|e| CliError::Numeric(e.to_string()))?;
    let train_spe = spe_series(&model, &train_matrix)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let residuals =
        spe_series(&model, &full_matrix).map_err(|e| CliError::Numeric(e.to_string()))?;
    let flagged = flag_anomalies(&residuals, config.threshold_spec, &train_spe.spe);
    let predictions = predict_attacks_unsupervised(&flagged, config.eta, config.delta, config.zeta);
    let name = feature.as_str();
    let mut model_text = Vec::new();
    write_model(&model, &mut model_text).map_err(|e| data_err(e.to_string()))?;
    config.write_output(
        &format!("subspace_{name}.model"),
        &String::from_utf8(model_text).expect("utf8"),
    )?;
    let mut spe_csv = String::from("day,spe,flag,prediction,label\n");
    for (i, day) in span.days().enumerate() {
        let pred = match predictions.predictions[i] {
            None => "abstain",
            Some(true) => "1",
            Some(false) => "0",
        };
        let _ = writeln!(
            spe_csv,
            "{},{},{},{},{}",
            day.format("%Y-%m-%d"),
            flagged.spe[i],
            flagged.flags[i] as u8,
            pred,
            labels[i] as u8
        );
    }
    config.write_output(&format!("detect_{name}.csv"), &spe_csv)?;
    // Test-day metrics at the configured threshold, plus a ROC sweep where
    // the day score is the peak SPE over its lookback window.
    let test_preds: Vec<Option<bool>> = predictions.predictions[test_start..].to_vec();
    let test_label_slice = &labels[test_start..];
    let mut report =
        prf1(&test_preds, test_label_slice).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut scores = Vec::new();
    let mut score_labels = Vec::new();
    for (offset, &label) in test_label_slice.iter().enumerate() {
        let t = test_start + offset;
        if t < config.eta + config.delta {
            continue;
        }
        let lo = t - config.eta - config.delta;
        let hi = t - config.delta;
        let peak = flagged.spe[lo..=hi].iter().cloned().fold(f64::MIN, f64::max);
        scores.push(peak);
        score_labels.push(label);
    }
    let auc = if score_labels.iter().any(|&l| l) && score_labels.iter().any(|&l| !l) {
        let grid = score_grid(&scores);
        let (points, auc) =
            roc_auc(&scores, &score_labels, &grid).map_err(|e| CliError::Numeric(e.to_string()))?;
        let mut roc = Vec::new();
        write_roc_csv(&points, &mut roc).map_err(|e| data_err(e.to_string()))?;
        config.write_output(
            &format!("roc_{name}.csv"),
            &String::from_utf8(roc).expect("utf8"),
        )?;
        Some(auc)
    } else {
        None
    };
    report.auc = auc;
    config.write_output(
        &format!("metrics_detect_{name}.csv"),
        &format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    Ok(format!(
        "f1 {:.4}, auc {}",
        report.f1,
        auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".to_string())
    ))
}

fn lag_dataset(
    config: &PipelineConfig,
    series: &BTreeMap<(FeatureId, String), FeatureSeries>,
    attacks: &AttackData,
    span: TimeWindow,
) -> Result<LagDataset, CliError> {
    let mut aggregates = Vec::new();
    for &feature in &config.features {
        let agg = forum_average(series, feature)
            .ok_or_else(|| data_err(format!("{} missing from features.csv", feature.as_str())))?;
        aggregates.push(agg);
    }
    let attack_days: BTreeSet<NaiveDate> = attacks
        .counts
        .get(&config.event_type)
        .map(|days| days.keys().copied().collect())
        .unwrap_or_default();
    Ok(build_lag_features(
        &aggregates,
        &attack_days,
        config.eta,
        config.delta,
        span,
    ))
}

fn cmd_train(config: &PipelineConfig) -> Result<(), CliError> {
    config.prepare_out_dir("train")?;
    let series = load_feature_series(config)?;
    let (attacks, _) = load_attacks(&config.attacks_path)
        .map_err(|e| data_err(format!("{}: {e}", config.attacks_path.display())))?;
    let span = series
        .values()
        .next()
        .map(|s| s.span)
        .ok_or_else(|| data_err("features.csv holds no series"))?;
    let split = split_of(config, span)?;
    let mut dataset = lag_dataset(config, &series, &attacks, split.train)?;
    if dataset.rows.is_empty() {
        return Err(data_err("no training rows after lag exclusion"));
    }
    if config.smote_target_ratio > 0.0 {
        let (rows, labels) = smote_oversample(
            &dataset.rows,
            &dataset.labels,
            config.smote_k,
            config.smote_target_ratio,
            config.seed,
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        // Synthetic rows carry no day; training only needs rows + labels.
        dataset.rows = rows;
        dataset.labels = labels;
    }
    let train_cfg = TrainConfig::default();
    let mut model = match config.model_kind {
        ModelKind::Ridge => {
            train_ridge_logit(&dataset, config.lambda, &train_cfg, Some(config.event_type))
                .map_err(|e| CliError::Numeric(e.to_string()))?
        }
        ModelKind::GroupLasso => train_group_lasso_logit(
            &dataset,
            config.m,
            config.l,
            config.g,
            &train_cfg,
            Some(config.event_type),
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?,
    };
    model.decision_threshold = config.decision_threshold;
    let mut text = Vec::new();
    write_logit_model(&model, &mut text).map_err(|e| data_err(e.to_string()))?;
    config.write_output("logit.model", &String::from_utf8(text).expect("utf8"))?;
    let mut train_csv = String::from("day,prob,prediction,label\n");
    for (i, row) in dataset.rows.iter().enumerate() {
        let (prob, pred) = model
            .predict(row)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let day = dataset
            .days
            .get(i)
            .map(|d| d.format("%Y-%m-%d").to_string())
            .unwrap_or_else(|| "synthetic".to_string());
        let _ = writeln!(train_csv, "{day},{prob},{},{}", pred as u8, dataset.labels[i] as u8);
    }
    config.write_output("train_predictions.csv", &train_csv)?;
    println!(
        "train: {} model on {} rows ({} positive)",
        config.model_kind.as_str(),
        dataset.rows.len(),
        dataset.labels.iter().filter(|&&l| l).count()
    );
    Ok(())
}

fn cmd_predict(config: &PipelineConfig) -> Result<(), CliError> {
    config.prepare_out_dir("predict")?;
    let model_path = config.out_path("logit.model");
    let file = std::fs::File::open(&model_path).map_err(|e| io_err(&model_path, e))?;
    let model = read_logit_model(std::io::BufReader::new(file))
        .map_err(|e| data_err(format!("{}: {e}", model_path.display())))?;
    let series = load_feature_series(config)?;
    let (attacks, _) = load_attacks(&config.attacks_path)
        .map_err(|e| data_err(format!("{}: {e}", config.attacks_path.display())))?;
    let span = series
        .values()
        .next()
        .map(|s| s.span)
        .ok_or_else(|| data_err("features.csv holds no series"))?;
    let dataset = lag_dataset(config, &series, &attacks, span)?;
    if dataset.layout != model.layout {
        return Err(data_err(
            "model layout does not match configured features/eta/delta".to_string(),
        ));
    }
    let mut csv = String::from("day,prob,prediction,label\n");
    for (i, row) in dataset.rows.iter().enumerate() {
        let (prob, pred) = model
            .predict(row)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let _ = writeln!(
            csv,
            "{},{prob},{},{}",
            dataset.days[i].format("%Y-%m-%d"),
            pred as u8,
            dataset.labels[i] as u8
        );
    }
    config.write_output("predictions.csv", &csv)?;
    println!(
        "predict: {} days scored, {} excluded for missing lag history",
        dataset.days.len(),
        dataset.excluded.len()
    );
    Ok(())
}

struct PredictionRows {
    days: Vec<NaiveDate>,
    probs: Vec<f64>,
    preds: Vec<bool>,
    labels: Vec<bool>,
}

fn read_predictions(path: &Path) -> Result<PredictionRows, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = PredictionRows {
        days: Vec::new(),
        probs: Vec::new(),
        preds: Vec::new(),
        labels: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "day,prob,prediction,label" {
                return Err(data_err(format!("{}: bad header", path.display())));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || data_err(format!("{}:{}: bad row", path.display(), i + 1));
        if fields.len() != 4 {
            return Err(bad());
        }
        rows.days
            .push(NaiveDate::parse_from_str(fields[0], "%Y-%m-%d").map_err(|_| bad())?);
        rows.probs.push(fields[1].parse().map_err(|_| bad())?);
        rows.preds.push(fields[2] == "1");
        rows.labels.push(fields[3] == "1");
    }
    if rows.days.is_empty() {
        return Err(data_err(format!("{}: no prediction rows", path.display())));
    }
    Ok(rows)
}

fn cmd_evaluate(config: &PipelineConfig) -> Result<(), CliError> {
    config.prepare_out_dir("evaluate")?;
    let rows = read_predictions(&config.out_path("predictions.csv"))?;
    let span = TimeWindow::new(rows.days[0], *rows.days.last().expect("non-empty"))
        .map_err(|e| data_err(e.to_string()))?;
    let split = split_of(config, span)?;
    let mut keep: Vec<usize> = (0..rows.days.len())
        .filter(|&i| split.test.contains(rows.days[i]))
        .collect();
    if keep.is_empty() {
        return Err(data_err("no predictions fall in the test period".to_string()));
    }
    if config.high_activity_min_per_week > 0 {
        let (attacks, _) = load_attacks(&config.attacks_path)
            .map_err(|e| data_err(format!("{}: {e}", config.attacks_path.display())))?;
        let counts = attacks
            .counts
            .get(&config.event_type)
            .cloned()
            .unwrap_or_default();
        let mask = high_activity_filter(&counts, span, config.high_activity_min_per_week);
        keep.retain(|&i| {
            span.day_index(rows.days[i])
                .map(|d| mask[d])
                .unwrap_or(false)
        });
        if keep.is_empty() {
            return Err(data_err("high-activity filter removed every test day".to_string()));
        }
    }
    let preds: Vec<Option<bool>> = keep.iter().map(|&i| Some(rows.preds[i])).collect();
    let labels: Vec<bool> = keep.iter().map(|&i| rows.labels[i]).collect();
    let scores: Vec<f64> = keep.iter().map(|&i| rows.probs[i]).collect();
    let mut report = prf1(&preds, &labels).map_err(|e| CliError::Numeric(e.to_string()))?;
    if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        let grid = score_grid(&scores);
        let (points, auc) =
            roc_auc(&scores, &labels, &grid).map_err(|e| CliError::Numeric(e.to_string()))?;
        let mut roc = Vec::new();
        write_roc_csv(&points, &mut roc).map_err(|e| data_err(e.to_string()))?;
        config.write_output("roc_supervised.csv", &String::from_utf8(roc).expect("utf8"))?;
        report.auc = Some(auc);
    }
    let sampled_uniform = sampled_baseline_f1(&labels, false, config.seed, 2000);
    let sampled_prior = sampled_baseline_f1(&labels, true, config.seed, 2000);
    let mut text = String::new();
    let _ = writeln!(text, "{report}");
    let _ = writeln!(text, "sampled_uniform_f1 {sampled_uniform}");
    let _ = writeln!(text, "sampled_prior_f1 {sampled_prior}");
    config.write_output("evaluation.txt", &text)?;
    config.write_output(
        "metrics_supervised.csv",
        &format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    println!(
        "evaluate: {} test days, f1 {:.4} (baselines: uniform {:.4}, prior {:.4})",
        keep.len(),
        report.f1,
        report.baseline_uniform_f1,
        report.baseline_prior_f1
    );
    Ok(())
}

fn parse_scenario(path: &Path) -> Result<SyntheticScenario, CliError> {
    let raw = RawConfig {
        map: parse_kv_file(path)?,
        used: Default::default(),
    };
    let mut scenario = SyntheticScenario::default();
    scenario.n_forums = raw.parse_or("n_forums", scenario.n_forums)?;
    scenario.n_users_per_forum = raw.parse_or("n_users_per_forum", scenario.n_users_per_forum)?;
    scenario.n_days = raw.parse_or("n_days", scenario.n_days)?;
    if let Some(start) = raw.get("start") {
        scenario.start = NaiveDate::parse_from_str(start, "%Y-%m-%d")
            .map_err(|_| config_err(format!("bad start date '{start}'")))?;
    }
    if let Some(days) = raw.get("attack_days") {
        let mut parsed = BTreeSet::new();
        for d in days.split(',') {
            let d = d.trim();
            if d.is_empty() {
                continue;
            }
            parsed.insert(
                d.parse::<usize>()
                    .map_err(|_| config_err(format!("bad attack day offset '{d}'")))?,
            );
        }
        scenario.planted_attack_days = parsed;
    }
    if let Some(event) = raw.get("event_type") {
        scenario.event_type = event
            .parse()
            .map_err(|_| config_err(format!("unknown event_type '{event}'")))?;
    }
    scenario.burst_lead = raw.parse_or("burst_lead", scenario.burst_lead)?;
    scenario.noise_rate = raw.parse_or("noise_rate", scenario.noise_rate)?;
    scenario.burst_factor = raw.parse_or("burst_factor", scenario.burst_factor)?;
    scenario.n_experts_per_forum =
        raw.parse_or("n_experts_per_forum", scenario.n_experts_per_forum)?;
    scenario.seed = raw.parse_or("seed", scenario.seed)?;
    let unused = raw.unused_keys();
    if !unused.is_empty() {
        return Err(config_err(format!("unknown scenario keys: {}", unused.join(", "))));
    }
    Ok(scenario)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let scenario = parse_scenario(&args.scenario)?;
    let out = synthesize_corpus(&scenario).map_err(|e| config_err(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_err(&args.out_dir, e))?;
    let write = |name: &str, body: Vec<u8>| -> Result<(), CliError> {
        let path = args.out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))
    };
    let mut posts = Vec::new();
    forumcast_core::corpus::write_posts(&out.corpus, &mut posts)
        .map_err(|e| data_err(e.to_string()))?;
    write("posts.tsv", posts)?;
    let mut attacks = Vec::new();
    forumcast_core::corpus::write_attacks(&out.attacks, &mut attacks)
        .map_err(|e| data_err(e.to_string()))?;
    write("attacks.tsv", attacks)?;
    let mut cpe = Vec::new();
    forumcast_core::corpus::write_cpe_map(&out.cpe_map, &mut cpe)
        .map_err(|e| data_err(e.to_string()))?;
    write("cpe_map.tsv", cpe)?;
    let mut plan = Vec::new();
    write_plan(&out.plan, &mut plan).map_err(|e| data_err(e.to_string()))?;
    write("plan.txt", plan)?;
    let mut resolved = String::new();
    let _ = writeln!(resolved, "n_forums = {}", scenario.n_forums);
    let _ = writeln!(resolved, "n_users_per_forum = {}", scenario.n_users_per_forum);
    let _ = writeln!(resolved, "n_days = {}", scenario.n_days);
    let _ = writeln!(resolved, "start = {}", scenario.start.format("%Y-%m-%d"));
    let days: Vec<String> = scenario
        .planted_attack_days
        .iter()
        .map(|d| d.to_string())
        .collect();
    let _ = writeln!(resolved, "attack_days = {}", days.join(","));
    let _ = writeln!(resolved, "event_type = {}", scenario.event_type);
    let _ = writeln!(resolved, "burst_lead = {}", scenario.burst_lead);
    let _ = writeln!(resolved, "noise_rate = {}", scenario.noise_rate);
    let _ = writeln!(resolved, "burst_factor = {}", scenario.burst_factor);
    let _ = writeln!(resolved, "n_experts_per_forum = {}", scenario.n_experts_per_forum);
    let _ = writeln!(resolved, "seed = {}", scenario.seed);
    write("resolved_scenario.txt", resolved.into_bytes())?;
    println!(
        "simulate: {} posts across {} forums, {} planted attacks",
        out.plan.post_count,
        scenario.n_forums,
        out.plan.attack_days.len()
    );
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Ingest(args) => cmd_ingest(&load_config(args)?),
        Command::Features(args) => cmd_features(&load_config(args)?),
        Command::Detect(args) => cmd_detect(&load_config(args)?),
        Command::Train(args) => cmd_train(&load_config(args)?),
        Command::Predict(args) => cmd_predict(&load_config(args)?),
        Command::Evaluate(args) => cmd_evaluate(&load_config(args)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("forumcast: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
