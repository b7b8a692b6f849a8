use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::Serialize;

use super::{DailyMfa, MfaError, Result};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PersistentMfa {
    pub id: u32,
    /// Zones with their membership degree, by ascending code.
    pub members: Vec<(Arc<str>, f64)>,
    pub alpha: f64,
    /// Days on which at least two members shared a daily cluster.
    pub support_days: u32,
}

impl PersistentMfa {
    pub fn zones(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|(z, _)| &**z)
    }
}

/// Pairwise co-assignment counts over a sequence of daily partitions.
struct CoAssignment {
    zones: Vec<Arc<str>>,
    /// `(i, j)` with `i < j` → days together
    together: BTreeMap<(usize, usize), u32>,
    /// days each zone appears in some cluster
    present: Vec<Vec<bool>>,
}

impl CoAssignment {
    fn new(daily: &[DailyMfa]) -> Self {
        let zones: Vec<Arc<str>> = daily.iter().flat_map(|d| d.clusters.iter().flatten().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
        let index: HashMap<&str, usize> = zones.iter().enumerate().map(|(i, z)| (&**z, i)).collect();
        let mut present = vec![vec![false; daily.len()]; zones.len()];
        let mut together = BTreeMap::new();
        for (t, day) in daily.iter().enumerate() {
            for cluster in &day.clusters {
                let mut idx: Vec<usize> = cluster.iter().map(|z| index[&**z]).collect();
                idx.sort_unstable();
                for (a, &i) in idx.iter().enumerate() {
                    present[i][t] = true;
                    for &j in &idx[a + 1..] {
                        *together.entry((i, j)).or_insert(0) += 1;
                    }
                }
            }
        }
        Self { zones, together, present }
    }

    fn shared_days(&self, i: usize, j: usize) -> u32 {
        self.present[i].iter().zip(&self.present[j]).filter(|(a, b)| **a && **b).count() as u32
    }

    /// Score for every pair that was together at least once.
    fn scores(&self) -> BTreeMap<(usize, usize), f64> {
        self.together.iter().map(|(&(i, j), &t)| ((i, j), t as f64 / self.shared_days(i, j) as f64)).collect()
    }
}

/// Share of shared days on which each pair of zones was in the same daily
/// cluster. Pairs never clustered together are omitted (their score is 0).
pub fn co_assignment(daily: &[DailyMfa]) -> BTreeMap<(Arc<str>, Arc<str>), f64> {
    let co = CoAssignment::new(daily);
    co.scores().into_iter().map(|((i, j), s)| ((co.zones[i].clone(), co.zones[j].clone()), s)).collect()
}

/// Persistent areas from daily partitions.
///
/// Zones are linked when their co-assignment score reaches `alpha`; each
/// connected group of two or more zones is an area. A member's membership is
/// its mean score against the other members. Members below `alpha` are
/// removed one at a time (lowest first) and the remainder re-split, so every
/// reported membership is at least `alpha`.
pub fn fuzzy_intersect(daily: &[DailyMfa], alpha: f64) -> Result<Vec<PersistentMfa>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MfaError::AlphaOutOfRange(alpha));
    }
    if daily.is_empty() {
        return Err(MfaError::NoDailyMfas);
    }
    let co = CoAssignment::new(daily);
    let scores = co.scores();
    let n = co.zones.len();
    let mut neighbours = vec![Vec::new(); n];
    for (&(i, j), &s) in &scores {
        if s >= alpha {
            neighbours[i].push(j);
            neighbours[j].push(i);
        }
    }
    let score = |i: usize, j: usize| scores.get(&(i.min(j), i.max(j))).copied().unwrap_or(0.0);

    let mut pending = split(&(0..n).collect::<Vec<_>>(), &neighbours);
    let mut done: Vec<Vec<(usize, f64)>> = Vec::new();
    while let Some(group) = pending.pop() {
        if group.len() < 2 {
            continue;
        }
        let members: Vec<(usize, f64)> = group
            .iter()
            .map(|&i| (i, group.iter().filter(|&&j| j != i).map(|&j| score(i, j)).sum::<f64>() / (group.len() - 1) as f64))
            .collect();
        let weakest = members.iter().filter(|(_, m)| *m < alpha).min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match weakest {
            Some(&(w, _)) => {
                let rest: Vec<usize> = group.into_iter().filter(|&i| i != w).collect();
                pending.extend(split(&rest, &neighbours));
            }
            None => done.push(members),
        }
    }
    done.sort_by_key(|m| m[0].0);

    Ok(done
        .into_iter()
        .enumerate()
        .map(|(k, members)| {
            let idx: BTreeSet<usize> = members.iter().map(|(i, _)| *i).collect();
            let support_days = daily
                .iter()
                .filter(|d| {
                    d.clusters.iter().any(|c| {
                        c.iter().filter(|z| co.zones.binary_search(z).is_ok_and(|i| idx.contains(&i))).nth(1).is_some()
                    })
                })
                .count() as u32;
            PersistentMfa {
                id: k as u32 + 1,
                members: members.into_iter().map(|(i, m)| (co.zones[i].clone(), m)).collect(),
                alpha,
                support_days,
            }
        })
        .collect())
}

/// Connected groups of `nodes` under `neighbours`, each sorted, restricted to
/// `nodes`.
fn split(nodes: &[usize], neighbours: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let inside: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in nodes {
        if !seen.insert(start) {
            continue;
        }
        let mut group = vec![start];
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in &neighbours[i] {
                if inside.contains(&j) && seen.insert(j) {
                    group.push(j);
                    stack.push(j);
                }
            }
        }
        group.sort_unstable();
        out.push(group);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityPoint {
    pub day: NaiveDate,
    pub previous: NaiveDate,
    /// Jaccard index of the co-clustered zone pairs on the two days.
    pub jaccard: f64,
}

/// Day-over-day churn of the daily partitions, for consecutive entries of
/// `daily` (sorted by day). Two days without any co-clustered pair count as
/// identical.
pub fn daily_stability(daily: &[DailyMfa]) -> Vec<StabilityPoint> {
    let pairs = |d: &DailyMfa| -> BTreeSet<(Arc<str>, Arc<str>)> {
        let mut out = BTreeSet::new();
        for c in &d.clusters {
            for (a, x) in c.iter().enumerate() {
                for y in &c[a + 1..] {
                    out.insert(if x < y { (x.clone(), y.clone()) } else { (y.clone(), x.clone()) });
                }
            }
        }
        out
    };
    let mut sorted: Vec<&DailyMfa> = daily.iter().collect();
    sorted.sort_by_key(|d| d.day);
    let sets: Vec<_> = sorted.iter().map(|d| pairs(d)).collect();
    sorted
        .windows(2)
        .zip(sets.windows(2))
        .map(|(d, s)| {
            let union = s[0].union(&s[1]).count();
            let inter = s[0].intersection(&s[1]).count();
            StabilityPoint {
                day: d[1].day,
                previous: d[0].day,
                jaccard: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
            }
        })
        .collect()
}
