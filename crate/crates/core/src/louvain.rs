//! Louvain community detection on the undirected, unweighted projection of a
//! reply graph. Deterministic under a fixed seed and canonical node order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::reply_graph::ReplyGraph;

/// Node-to-community assignment over the historical vertex set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommunityAssignment {
    pub communities: BTreeMap<String, usize>,
}

impl CommunityAssignment {
    pub fn community_of(&self, user: &str) -> Option<usize> {
        self.communities.get(user).copied()
    }

    pub fn community_count(&self) -> usize {
        let mut seen: Vec<usize> = self.communities.values().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

struct WeightedGraph {
    /// adjacency[u] = (v, weight); self-loops carry the full internal weight.
    adjacency: Vec<Vec<(usize, f64)>>,
    total_weight: f64,
}

impl WeightedGraph {
    fn weighted_degree(&self, u: usize) -> f64 {
        self.adjacency[u]
            .iter()
            .map(|&(v, w)| if v == u { 2.0 * w } else { w })
            .sum()
    }
}

/// Modularity of a partition, used by the exhaustive test oracle as well.
pub fn modularity(adjacency: &[Vec<usize>], partition: &[usize]) -> f64 {
    let m2: f64 = adjacency.iter().map(|n| n.len() as f64).sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for (u, neighbors) in adjacency.iter().enumerate() {
        for &v in neighbors {
            if partition[u] == partition[v] {
                q += 1.0;
            }
        }
    }
    let mut degree_sums: BTreeMap<usize, f64> = BTreeMap::new();
    for (u, neighbors) in adjacency.iter().enumerate() {
        *degree_sums.entry(partition[u]).or_insert(0.0) += neighbors.len() as f64;
    }
    q / m2 - degree_sums.values().map(|d| (d / m2).powi(2)).sum::<f64>()
}

fn one_level(graph: &WeightedGraph, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = graph.adjacency.len();
    let mut community: Vec<usize> = (0..n).collect();
    let mut community_total: Vec<f64> = (0..n).map(|u| graph.weighted_degree(u)).collect();
    let m2 = graph.total_weight * 2.0;
    let mut improved = false;
    let mut moved = true;
    while moved {
        moved = false;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for &u in &order {
            let ku = graph.weighted_degree(u);
            let current = community[u];
            // Weight from u into each neighbor community (self-loops ignored).
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            for &(v, w) in &graph.adjacency[u] {
                if v != u {
                    *links.entry(community[v]).or_insert(0.0) += w;
                }
            }
            community_total[current] -= ku;
            let base = links.get(&current).copied().unwrap_or(0.0)
                - community_total[current] * ku / m2;
            let mut best = (current, base);
            for (&c, &w_in) in &links {
                if c == current {
                    continue;
                }
                let gain = w_in - community_total[c] * ku / m2;
                if gain > best.1 + 1e-12 || (gain > best.1 - 1e-12 && c < best.0 && gain >= base) {
                    best = (c, gain);
                }
            }
            community[u] = best.0;
            community_total[best.0] += ku;
            if best.0 != current {
                moved = true;
                improved = true;
            }
        }
    }
    (community, improved)
}

fn aggregate(graph: &WeightedGraph, community: &[usize]) -> (WeightedGraph, Vec<usize>) {
    // Renumber communities densely in index order.
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in community {
        let next = remap.len();
        remap.entry(c).or_insert(next);
    }
    let k = remap.len();
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (u, neighbors) in graph.adjacency.iter().enumerate() {
        let cu = remap[&community[u]];
        for &(v, w) in neighbors {
            let cv = remap[&community[v]];
            if u <= v {
                let key = (cu.min(cv), cu.max(cv));
                *weights.entry(key).or_insert(0.0) += w;
            }
        }
    }
    let mut adjacency = vec![Vec::new(); k];
    for ((a, b), w) in weights {
        if a == b {
            adjacency[a].push((a, w));
        } else {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
    }
    let total_weight = graph.total_weight;
    (
        WeightedGraph {
            adjacency,
            total_weight,
        },
        community.iter().map(|&c| remap[&c]).collect(),
    )
}

/// Run Louvain on the undirected projection. Isolated nodes end up in
/// singleton communities; community indices are renumbered by first
/// appearance in canonical (sorted user id) order.
pub fn louvain_communities(graph: &ReplyGraph, seed: u64) -> CommunityAssignment {
    let names: Vec<&str> = graph.vertices().iter().map(String::as_str).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); names.len()];
    let undirected = graph.undirected_adjacency();
    let mut edge_count = 0usize;
    for (u, neighbors) in &undirected {
        let ui = index[u];
        for &v in neighbors {
            adjacency[ui].push((index[v], 1.0));
            edge_count += 1;
        }
    }
    let mut work = WeightedGraph {
        adjacency,
        total_weight: edge_count as f64 / 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // node_community[i] = community of original node i in the current level.
    let mut node_community: Vec<usize> = (0..names.len()).collect();
    if work.total_weight > 0.0 {
        loop {
            let (community, improved) = one_level(&work, &mut rng);
            if !improved {
                break;
            }
            let (aggregated, dense) = aggregate(&work, &community);
            node_community = node_community.iter().map(|&c| dense[c]).collect();
            work = aggregated;
        }
    }
    // Canonical renumbering by first appearance over sorted names.
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut communities = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        let next = remap.len();
        let id = *remap.entry(node_community[i]).or_insert(next);
        communities.insert(name.to_string(), id);
    }
    CommunityAssignment { communities }
}
