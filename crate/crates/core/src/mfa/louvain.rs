use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::MobilityGraph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Modularity resolution; 1 is plain modularity.
    pub resolution: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { resolution: 1.0 }
    }
}

/// One day's partition. Clusters are sorted internally and ordered by their
/// lowest zone code; zones without any flow to another zone are listed in
/// `singletons` instead.
#[derive(Clone, Debug, PartialEq)]
pub struct DailyMfa {
    pub day: NaiveDate,
    pub clusters: Vec<Vec<Arc<str>>>,
    pub modularity: f64,
    pub singletons: Vec<Arc<str>>,
}

pub fn cluster_daily(graph: &MobilityGraph) -> DailyMfa {
    cluster_daily_with(graph, &ClusterConfig::default())
}

/// Multi-level greedy modularity maximisation.
///
/// Nodes are visited in ascending code order and a node only leaves its
/// community for a strictly better one; among equally good candidates the
/// one with the lowest label wins. The result is never worse than putting
/// each connected component in its own cluster.
pub fn cluster_daily_with(graph: &MobilityGraph, config: &ClusterConfig) -> DailyMfa {
    let degree = graph.degrees();
    let active: Vec<usize> = (0..graph.nodes.len()).filter(|&i| degree[i] > 0.0).collect();
    let singletons = (0..graph.nodes.len()).filter(|&i| degree[i] == 0.0).map(|i| graph.nodes[i].clone()).collect();

    let mut label = vec![usize::MAX; graph.nodes.len()];
    if !active.is_empty() {
        let louvain = louvain(graph, &active, config.resolution);
        let components = components(graph, &active);
        label = if partition_quality(graph, &louvain, config.resolution) + 1e-12
            >= partition_quality(graph, &components, config.resolution)
        {
            louvain
        } else {
            components
        };
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &active {
        groups.entry(label[i]).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
    clusters.sort_by_key(|c| c[0]);
    let modularity = modularity(graph, &clusters, config.resolution);
    DailyMfa {
        day: graph.day,
        clusters: clusters.iter().map(|c| c.iter().map(|&i| graph.nodes[i].clone()).collect()).collect(),
        modularity,
        singletons,
    }
}

/// Weighted modularity of a partition given as node-index clusters. Nodes left
/// out of every cluster contribute nothing. Zero for a graph without edges.
pub fn modularity(graph: &MobilityGraph, clusters: &[Vec<usize>], resolution: f64) -> f64 {
    let two_m = 2.0 * graph.total_weight();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut label = vec![usize::MAX; graph.nodes.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            label[i] = c;
        }
    }
    let mut internal = vec![0.0; clusters.len()];
    let mut total = vec![0.0; clusters.len()];
    for (&(i, j), &w) in &graph.edges {
        if label[i] != usize::MAX {
            total[label[i]] += w;
        }
        if label[j] != usize::MAX {
            total[label[j]] += w;
        }
        if label[i] == label[j] && label[i] != usize::MAX {
            internal[label[i]] += 2.0 * w;
        }
    }
    internal.iter().zip(&total).map(|(a, k)| a / two_m - resolution * (k / two_m).powi(2)).sum()
}

fn partition_quality(graph: &MobilityGraph, label: &[usize], resolution: f64) -> f64 {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in label.iter().enumerate() {
        if l != usize::MAX {
            groups.entry(l).or_default().push(i);
        }
    }
    modularity(graph, &groups.into_values().collect::<Vec<_>>(), resolution)
}

/// Component label (lowest member index) for each active node.
fn components(graph: &MobilityGraph, active: &[usize]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..graph.nodes.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in graph.edges.keys() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        parent[a.max(b)] = a.min(b);
    }
    let mut label = vec![usize::MAX; graph.nodes.len()];
    for &i in active {
        label[i] = find(&mut parent, i);
    }
    label
}

/// Weighted graph at one aggregation level. `self_weight[i]` is the loop
/// term `A_ii`, which already counts internal edges twice.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_weight: Vec<f64>,
}

impl Level {
    fn degree(&self, i: usize) -> f64 {
        self.self_weight[i] + self.adj[i].iter().map(|(_, w)| w).sum::<f64>()
    }

    /// Local moving phase. Returns community labels renumbered in order of
    /// first appearance, and whether any node moved.
    fn local_moves(&self, two_m: f64, resolution: f64) -> (Vec<usize>, bool) {
        let n = self.adj.len();
        let k: Vec<f64> = (0..n).map(|i| self.degree(i)).collect();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut tot = k.clone();
        let eps = 1e-12 * two_m;
        let mut any_move = false;
        let mut links: BTreeMap<usize, f64> = BTreeMap::new();
        loop {
            let mut moved = false;
            for i in 0..n {
                let own = comm[i];
                links.clear();
                for &(j, w) in &self.adj[i] {
                    *links.entry(comm[j]).or_insert(0.0) += w;
                }
                tot[own] -= k[i];
                let gain = |c: usize, w_ic: f64| w_ic - resolution * tot[c] * k[i] / two_m;
                let mut best = own;
                let mut best_gain = gain(own, links.get(&own).copied().unwrap_or(0.0));
                for (&c, &w) in &links {
                    let g = gain(c, w);
                    if g > best_gain + eps {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += k[i];
                if best != own {
                    comm[i] = best;
                    moved = true;
                    any_move = true;
                }
            }
            if !moved {
                break;
            }
        }
        let mut renumber = BTreeMap::new();
        let labels = comm
            .iter()
            .map(|c| {
                let next = renumber.len();
                *renumber.entry(*c).or_insert(next)
            })
            .collect();
        (labels, any_move)
    }

    fn aggregate(&self, labels: &[usize]) -> Level {
        let n = labels.iter().max().map_or(0, |m| m + 1);
        let mut self_weight = vec![0.0; n];
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, neighbours) in self.adj.iter().enumerate() {
            let ci = labels[i];
            self_weight[ci] += self.self_weight[i];
            for &(j, w) in neighbours {
                let cj = labels[j];
                if ci == cj {
                    self_weight[ci] += w;
                } else {
                    *adj[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Level { adj: adj.into_iter().map(|m| m.into_iter().collect()).collect(), self_weight }
    }
}

/// Louvain labels for the active nodes; inactive ones keep `usize::MAX`.
fn louvain(graph: &MobilityGraph, active: &[usize], resolution: f64) -> Vec<usize> {
    let mut position = vec![usize::MAX; graph.nodes.len()];
    for (p, &i) in active.iter().enumerate() {
        position[i] = p;
    }
    let mut adj = vec![Vec::new(); active.len()];
    for (&(i, j), &w) in &graph.edges {
        adj[position[i]].push((position[j], w));
        adj[position[j]].push((position[i], w));
    }
    for a in &mut adj {
        a.sort_by_key(|(j, _)| *j);
    }
    let mut level = Level { self_weight: vec![0.0; active.len()], adj };
    let two_m = 2.0 * graph.total_weight();

    // membership[p] is the current community of active node p
    let mut membership: Vec<usize> = (0..active.len()).collect();
    loop {
        let (labels, moved) = level.local_moves(two_m, resolution);
        if !moved {
            break;
        }
        for m in &mut membership {
            *m = labels[*m];
        }
        level = level.aggregate(&labels);
    }

    let mut out = vec![usize::MAX; graph.nodes.len()];
    for (p, &i) in active.iter().enumerate() {
        out[i] = membership[p];
    }
    out
}
