use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::NaiveDate;

use super::{MfaError, Result};
use crate::harmonise::HarmonizedOdm;
use crate::ingest::{CanonicalFeed, MINUTES_PER_DAY};

/// Undirected flow graph for one day. Node indices follow ascending zone code;
/// edge keys are `(i, j)` with `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MobilityGraph {
    pub day: NaiveDate,
    pub nodes: Vec<Arc<str>>,
    pub edges: BTreeMap<(usize, usize), f64>,
}

impl MobilityGraph {
    /// Builds a graph from directed flows. Flows in both directions are
    /// summed; self-loops, masked and non-positive counts only register the
    /// zones as nodes.
    pub fn from_flows<'a>(day: NaiveDate, flows: impl IntoIterator<Item = (&'a Arc<str>, &'a Arc<str>, f64)>) -> Self {
        let flows: Vec<_> = flows.into_iter().collect();
        let nodes: Vec<Arc<str>> =
            flows.iter().flat_map(|(o, d, _)| [(*o).clone(), (*d).clone()]).collect::<BTreeSet<_>>().into_iter().collect();
        let index = |z: &Arc<str>| nodes.binary_search(z).expect("node collected above");
        let mut edges = BTreeMap::new();
        for (o, d, c) in &flows {
            if o == d || c.is_nan() || *c <= 0.0 {
                continue;
            }
            let (i, j) = (index(o), index(d));
            *edges.entry((i.min(j), i.max(j))).or_insert(0.0) += c;
        }
        Self { day, nodes, edges }
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> Vec<f64> {
        let mut k = vec![0.0; self.nodes.len()];
        for (&(i, j), &w) in &self.edges {
            k[i] += w;
            k[j] += w;
        }
        k
    }

    /// Sum of edge weights.
    pub fn total_weight(&self) -> f64 {
        self.edges.values().sum()
    }

    pub fn index_of(&self, zone: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| (**n).cmp(zone)).ok()
    }
}

pub fn build_graph(odm: &HarmonizedOdm) -> Result<MobilityGraph> {
    let cells: Vec<_> = odm.cells.iter().filter(|(_, c)| !c.is_nan()).map(|((o, d), c)| (o, d, *c)).collect();
    if cells.is_empty() {
        return Err(MfaError::EmptyDay(odm.day));
    }
    Ok(MobilityGraph::from_flows(odm.day, cells))
}

/// Graph for `day` straight from a provider feed, at the provider's own
/// zoning. Only windows lying within the day are used, and attribute slices
/// are skipped so they do not double count the totals.
pub fn build_graph_from_feed(feed: &CanonicalFeed, day: NaiveDate) -> Result<MobilityGraph> {
    let cells: Vec<_> = feed
        .cells
        .iter()
        .filter(|c| c.window.day() == day && c.window.minutes <= MINUTES_PER_DAY && c.attributes.is_empty() && !c.count.is_nan())
        .map(|c| (&c.origin.code, &c.destination.code, c.count))
        .collect();
    if cells.is_empty() {
        return Err(MfaError::EmptyDay(day));
    }
    Ok(MobilityGraph::from_flows(day, cells))
}
