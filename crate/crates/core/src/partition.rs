//! Splitting a global graph into per-client subgraphs.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Masks};
use crate::rng::{stream_rng, Stream};

/// Number of half-samples drawn from each base part in overlapping mode.
pub const SAMPLES_PER_PART: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    NonOverlapping,
    Overlapping,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_overlapping" => Ok(PartitionMode::NonOverlapping),
            "overlapping" => Ok(PartitionMode::Overlapping),
            other => Err(Error::Config(format!(
                "unknown partition mode `{other}` (expected non_overlapping or overlapping)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    #[serde(rename = "M")]
    pub num_clients: usize,
    /// Global node ids per client, ascending.
    pub sets: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Checks the plan against a graph of `num_nodes` nodes.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("M", "client count must be at least 1"));
        }
        if self.sets.len() != self.num_clients {
            return Err(Error::validation(
                "sets",
                format!(
                    "found {} sets for M = {}",
                    self.sets.len(),
                    self.num_clients
                ),
            ));
        }
        let mut owner = vec![None; num_nodes];
        for (m, set) in self.sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::validation(
                    "sets",
                    format!("client {m} has no nodes"),
                ));
            }
            let mut local = vec![false; num_nodes];
            for &v in set {
                if v >= num_nodes {
                    return Err(Error::validation(
                        "sets",
                        format!("client {m}: node {v} out of range (num_nodes = {num_nodes})"),
                    ));
                }
                if std::mem::replace(&mut local[v], true) {
                    return Err(Error::validation(
                        "sets",
                        format!("client {m}: node {v} listed twice"),
                    ));
                }
                if self.mode == PartitionMode::NonOverlapping {
                    if let Some(prev) = owner[v].replace(m) {
                        return Err(Error::validation(
                            "sets",
                            format!("node {v} assigned to clients {prev} and {m}"),
                        ));
                    }
                }
            }
        }
        match self.mode {
            PartitionMode::NonOverlapping => {
                if let Some(v) = owner.iter().position(Option::is_none) {
                    return Err(Error::validation(
                        "sets",
                        format!("node {v} is not assigned to any client"),
                    ));
                }
            }
            PartitionMode::Overlapping => check_overlapping_count(self.num_clients)
                .map_err(|_| Error::validation("M", "M divisible by 5 is required"))?,
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, g: &Graph) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, g)
    }

    pub fn from_json(text: &str, g: &Graph) -> Result<Self> {
        let plan: PartitionPlan = serde_json::from_str(text)?;
        plan.validate(g.num_nodes())?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

fn check_overlapping_count(m: usize) -> Result<()> {
    if m < SAMPLES_PER_PART || !m.is_multiple_of(SAMPLES_PER_PART) {
        return Err(Error::Config(format!(
            "overlapping partition needs M >= 5 and M divisible by 5 (got {m})"
        )));
    }
    Ok(())
}

fn hop_distances(g: &Graph, source: usize, dist: &mut [usize]) {
    let mut queue = VecDeque::from([source]);
    let mut local = vec![usize::MAX; g.num_nodes()];
    local[source] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if local[v] == usize::MAX {
                local[v] = local[u] + 1;
                queue.push_back(v);
            }
        }
    }
    for (d, l) in dist.iter_mut().zip(local) {
        *d = (*d).min(l);
    }
}

/// Farthest-first seeds, starting from the highest-degree node.
fn choose_seeds(g: &Graph, m: usize) -> Vec<usize> {
    let n = g.num_nodes();
    let mut dist = vec![usize::MAX; n];
    let mut seeds = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    while seeds.len() < m {
        let next = (0..n)
            .filter(|&v| !chosen[v])
            .max_by(|&a, &b| {
                (dist[a], g.degree(a))
                    .cmp(&(dist[b], g.degree(b)))
                    .then(b.cmp(&a))
            })
            .expect("m <= n leaves a candidate");
        chosen[next] = true;
        seeds.push(next);
        hop_distances(g, next, &mut dist);
    }
    seeds
}

/// Balanced region growing: BFS frontiers claim one node per turn.
///
/// The seed only names the plan; growth and tie-breaking are fixed by node id.
pub fn partition_nonoverlapping(g: &Graph, m: usize, _seed: u64) -> Result<PartitionPlan> {
    let n = g.num_nodes();
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "client count M = {m} must be in 1..={n}"
        )));
    }
    let cap = n.div_ceil(m);
    let hard_cap = 2 * cap;
    let mut part = vec![usize::MAX; n];
    let mut sizes = vec![0usize; m];
    let mut frontiers: Vec<VecDeque<usize>> = Vec::with_capacity(m);
    for (p, s) in choose_seeds(g, m).into_iter().enumerate() {
        part[s] = p;
        sizes[p] = 1;
        frontiers.push(VecDeque::from([s]));
    }

    loop {
        let mut grew = false;
        for p in 0..m {
            if sizes[p] >= cap {
                continue;
            }
            'claim: while let Some(&u) = frontiers[p].front() {
                for &v in g.neighbors(u) {
                    if part[v] == usize::MAX {
                        part[v] = p;
                        sizes[p] += 1;
                        frontiers[p].push_back(v);
                        grew = true;
                        break 'claim;
                    }
                }
                frontiers[p].pop_front();
            }
        }
        if !grew {
            break;
        }
    }

    // leftovers: unreachable components or nodes walled off by capped parts
    loop {
        let mut pending = false;
        let mut progressed = false;
        for v in 0..n {
            if part[v] != usize::MAX {
                continue;
            }
            pending = true;
            let best = g
                .neighbors(v)
                .iter()
                .map(|&u| part[u])
                .filter(|&p| p != usize::MAX && sizes[p] < hard_cap)
                .min_by_key(|&p| (sizes[p], p));
            if let Some(p) = best {
                part[v] = p;
                sizes[p] += 1;
                progressed = true;
            }
        }
        if !pending {
            break;
        }
        if !progressed {
            let v = part.iter().position(|&p| p == usize::MAX).unwrap();
            let p = (0..m).min_by_key(|&p| (sizes[p], p)).unwrap();
            part[v] = p;
            sizes[p] += 1;
        }
    }

    let mut sets = vec![Vec::new(); m];
    for (v, &p) in part.iter().enumerate() {
        sets[p].push(v);
    }
    Ok(PartitionPlan {
        mode: PartitionMode::NonOverlapping,
        num_clients: m,
        sets,
    })
}

/// Base partition into `M / 5` parts, then five independent half-samples of each.
pub fn partition_overlapping(g: &Graph, m: usize, seed: u64) -> Result<PartitionPlan> {
    check_overlapping_count(m)?;
    let base = partition_nonoverlapping(g, m / SAMPLES_PER_PART, seed)?;
    let mut sets = Vec::with_capacity(m);
    for (b, part) in base.sets.iter().enumerate() {
        let take = part.len().div_ceil(2);
        for draw in 0..SAMPLES_PER_PART {
            let mut rng = stream_rng(seed, Stream::Sampling, (b * SAMPLES_PER_PART + draw) as u64);
            let mut set: Vec<usize> = sample(&mut rng, part.len(), take)
                .into_iter()
                .map(|i| part[i])
                .collect();
            set.sort_unstable();
            sets.push(set);
        }
    }
    Ok(PartitionPlan {
        mode: PartitionMode::Overlapping,
        num_clients: m,
        sets,
    })
}

pub fn partition(g: &Graph, mode: PartitionMode, m: usize, seed: u64) -> Result<PartitionPlan> {
    match mode {
        PartitionMode::NonOverlapping => partition_nonoverlapping(g, m, seed),
        PartitionMode::Overlapping => partition_overlapping(g, m, seed),
    }
}

/// Subgraph on `nodes`, relabeled in ascending global-id order.
pub fn induce_subgraph(g: &Graph, nodes: &[usize]) -> Result<Graph> {
    let mut ids = nodes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = g.num_nodes();
    let mut local = vec![usize::MAX; n];
    for (i, &v) in ids.iter().enumerate() {
        if v >= n {
            return Err(Error::validation("nodes", format!("node {v} out of range")));
        }
        local[v] = i;
    }
    let edges = g
        .edges()
        .iter()
        .filter(|&&(u, v)| local[u] != usize::MAX && local[v] != usize::MAX)
        .map(|&(u, v)| (local[u], local[v]))
        .collect();
    let features = DMatrix::from_fn(ids.len(), g.num_features(), |i, j| {
        g.features()[(ids[i], j)]
    });
    let labels = ids.iter().map(|&v| g.labels()[v]).collect();
    let pick = |flags: &[bool]| ids.iter().map(|&v| flags[v]).collect::<Vec<_>>();
    let m = g.masks();
    let masks = Masks {
        train: pick(&m.train),
        val: pick(&m.val),
        test: pick(&m.test),
    };
    Graph::new(g.num_classes(), edges, features, labels, masks)
}

/// Materializes one subgraph per client.
pub fn client_graphs(g: &Graph, plan: &PartitionPlan) -> Result<Vec<Graph>> {
    plan.sets.iter().map(|s| induce_subgraph(g, s)).collect()
}
