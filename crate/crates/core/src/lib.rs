//! Core library: forum corpus ingestion, reply-network construction, expert
//! extraction, network features, anomaly detection, and supervised prediction
//! of daily attack occurrence.

pub mod anomaly;
pub mod corpus;
pub mod evaluation;
pub mod experts;
pub mod features;
pub mod louvain;
pub mod reply_graph;
pub mod supervised;
pub mod synth;
