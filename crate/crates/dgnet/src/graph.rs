//! Stage graphs: ordered node sets with forward edges.
//!
//! Nodes are numbered 1..=N; node 1 is the stage input, node N the stage
//! output, and the index order doubles as the topological order. Classical
//! wiring patterns, the complete DAG and three random-wiring generators all
//! produce the same representation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{DgError, Result};

/// One stage's connectivity. Construction accepts arbitrary edge pairs so
/// that [`StageGraph::validate`] can report violations on injected graphs;
/// all generators in this module only emit `i < j` edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

/// First invariant violation found by [`StageGraph::validate`].
#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    #[error("node count {0} below minimum 2")]
    TooFewNodes(usize),
    #[error("edge ({i},{j}) out of bounds for {n} nodes")]
    EdgeOutOfBounds { i: usize, j: usize, n: usize },
    #[error("edge ({i},{j}) against topological order")]
    EdgeAgainstOrder { i: usize, j: usize },
    #[error("node {0} unreachable from the input node")]
    Unreachable(usize),
    #[error("node {0} has no path to the output node")]
    NoPathToOutput(usize),
}

impl StageGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            n,
            edges: edges.into_iter().collect(),
        }
    }

    /// Every ordered pair i < j.
    pub fn complete(n: usize) -> Self {
        let mut edges = BTreeSet::new();
        for i in 1..=n {
            for j in (i + 1)..=n {
                edges.insert((i, j));
            }
        }
        Self { n, edges }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// Targets of node `i`'s output edges, ascending.
    pub fn out_targets(&self, i: usize) -> Vec<usize> {
        self.edges
            .range((i, 0)..(i + 1, 0))
            .map(|&(_, j)| j)
            .collect()
    }

    /// Sources of node `j`'s input edges, ascending.
    pub fn in_sources(&self, j: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, t)| t == j)
            .map(|&(s, _)| s)
            .collect()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out_targets(i).len()
    }

    pub fn in_degree(&self, j: usize) -> usize {
        self.in_sources(j).len()
    }

    /// Checks the stage-graph invariants, reporting the first violation:
    /// bounds, topological order, reachability from node 1, and a path to
    /// node N from every node.
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        if self.n < 2 {
            return Err(Violation::TooFewNodes(self.n));
        }
        for &(i, j) in &self.edges {
            if i < 1 || j < 1 || i > self.n || j > self.n {
                return Err(Violation::EdgeOutOfBounds { i, j, n: self.n });
            }
        }
        for &(i, j) in &self.edges {
            if i >= j {
                return Err(Violation::EdgeAgainstOrder { i, j });
            }
        }
        // Forward edges only, so index order is a valid visit order.
        let mut from_input = vec![false; self.n + 1];
        from_input[1] = true;
        for j in 2..=self.n {
            from_input[j] = self.in_sources(j).iter().any(|&i| from_input[i]);
        }
        if let Some(j) = (2..=self.n).find(|&j| !from_input[j]) {
            return Err(Violation::Unreachable(j));
        }
        let mut to_output = vec![false; self.n + 1];
        to_output[self.n] = true;
        for i in (1..self.n).rev() {
            to_output[i] = self.out_targets(i).iter().any(|&j| to_output[j]);
        }
        if let Some(i) = (1..self.n).find(|&i| !to_output[i]) {
            return Err(Violation::NoPathToOutput(i));
        }
        Ok(())
    }
}

/// Wiring pattern selector, with generator parameters for the random kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum WiringKind {
    Vgg,
    Res,
    Dense,
    Complete,
    Er { p: f64 },
    Ba { m: usize },
    Ws { k: usize, p: f64 },
}

impl WiringKind {
    pub fn name(&self) -> &'static str {
        match self {
            WiringKind::Vgg => "vgg",
            WiringKind::Res => "res",
            WiringKind::Dense => "dense",
            WiringKind::Complete => "complete",
            WiringKind::Er { .. } => "er",
            WiringKind::Ba { .. } => "ba",
            WiringKind::Ws { .. } => "ws",
        }
    }
}

/// Builds the edge set for a wiring pattern over `n` ordered nodes.
///
/// Random kinds generate an undirected graph with the classical generator,
/// orient every edge from lower to higher node index (which makes the result
/// acyclic by construction), then wire node 1 to any other source nodes and
/// any other sink nodes to node N so the input/output roles hold.
pub fn pattern_edges(kind: WiringKind, n: usize, seed: u64) -> Result<StageGraph> {
    if n < 2 {
        return Err(DgError::InvalidArgument {
            op: "pattern_edges",
            msg: format!("node count {n} below minimum 2"),
        });
    }
    let graph = match kind {
        WiringKind::Vgg => StageGraph::new(n, (1..n).map(|i| (i, i + 1))),
        WiringKind::Res => {
            let mut edges = Vec::new();
            for i in 1..n {
                for j in [i + 1, i + 2] {
                    if j <= n {
                        edges.push((i, j));
                    }
                }
            }
            StageGraph::new(n, edges)
        }
        WiringKind::Dense | WiringKind::Complete => StageGraph::complete(n),
        WiringKind::Er { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(DgError::InvalidArgument {
                    op: "pattern_edges",
                    msg: format!("er probability {p} outside [0,1]"),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges = BTreeSet::new();
            for i in 1..=n {
                for j in (i + 1)..=n {
                    if rng.gen::<f64>() < p {
                        edges.insert((i, j));
                    }
                }
            }
            repair_roles(StageGraph { n, edges })
        }
        WiringKind::Ba { m } => {
            if m < 1 || m >= n {
                return Err(DgError::InvalidArgument {
                    op: "pattern_edges",
                    msg: format!("ba attachment count {m} outside [1, {})", n),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Preferential attachment: node v > m attaches to m distinct
            // earlier nodes sampled from the degree-weighted pool.
            let mut edges = BTreeSet::new();
            let mut pool: Vec<usize> = Vec::new();
            let mut targets: Vec<usize> = (1..=m).collect();
            for v in (m + 1)..=n {
                for &t in &targets {
                    edges.insert((t.min(v), t.max(v)));
                }
                pool.extend(&targets);
                pool.extend(std::iter::repeat_n(v, m));
                let mut picked = BTreeSet::new();
                while picked.len() < m {
                    let cand = pool[rng.gen_range(0..pool.len())];
                    picked.insert(cand);
                }
                targets = picked.into_iter().collect();
            }
            repair_roles(StageGraph { n, edges })
        }
        WiringKind::Ws { k, p } => {
            if k % 2 != 0 || k >= n || k < 2 {
                return Err(DgError::InvalidArgument {
                    op: "pattern_edges",
                    msg: format!("ws neighbor count {k} must be even and in [2, {n})"),
                });
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(DgError::InvalidArgument {
                    op: "pattern_edges",
                    msg: format!("ws rewiring probability {p} outside [0,1]"),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Ring lattice over node order, then rewire each right-hand
            // neighbor edge with probability p.
            let mut undirected: BTreeSet<(usize, usize)> = BTreeSet::new();
            for d in 1..=(k / 2) {
                for u in 1..=n {
                    let v = (u - 1 + d) % n + 1;
                    undirected.insert((u.min(v), u.max(v)));
                }
            }
            for d in 1..=(k / 2) {
                for u in 1..=n {
                    let v = (u - 1 + d) % n + 1;
                    if rng.gen::<f64>() < p {
                        let old = (u.min(v), u.max(v));
                        let w = rng.gen_range(1..=n);
                        let new = (u.min(w), u.max(w));
                        if w != u && !undirected.contains(&new) {
                            undirected.remove(&old);
                            undirected.insert(new);
                        }
                    }
                }
            }
            repair_roles(StageGraph { n, edges: undirected })
        }
    };
    Ok(graph)
}

/// Wires node 1 to every other source node and every other sink node to
/// node N, so the input distributes and the output gathers.
fn repair_roles(mut g: StageGraph) -> StageGraph {
    for v in 2..=g.n {
        if g.in_degree(v) == 0 {
            g.edges.insert((1, v));
        }
    }
    for v in 1..g.n {
        if g.out_degree(v) == 0 {
            g.edges.insert((v, g.n));
        }
    }
    g
}

// ── export / parse ──────────────────────────────────────────────────────

/// Renders a DOT digraph; optional weights become 3-decimal edge labels.
/// Weights keyed by non-existent edges are rejected.
pub fn export_dot(
    graph: &StageGraph,
    weights: Option<&std::collections::BTreeMap<(usize, usize), f64>>,
) -> Result<String> {
    if let Some(w) = weights {
        for &(i, j) in w.keys() {
            if !graph.has_edge(i, j) {
                return Err(DgError::InvalidArgument {
                    op: "export_dot",
                    msg: format!("weight given for non-existent edge ({i},{j})"),
                });
            }
        }
    }
    let mut out = String::from("digraph stage {\n  rankdir=LR;\n");
    for v in 1..=graph.node_count() {
        let _ = writeln!(out, "  n{v};");
    }
    for (i, j) in graph.edges() {
        match weights.and_then(|w| w.get(&(i, j))) {
            Some(wv) => {
                let _ = writeln!(out, "  n{i} -> n{j} [label=\"{wv:.3}\"];");
            }
            None => {
                let _ = writeln!(out, "  n{i} -> n{j};");
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}

/// Reads back a DOT digraph produced by [`export_dot`].
pub fn parse_dot(text: &str) -> Result<StageGraph> {
    let mut n = 0usize;
    let mut edges = BTreeSet::new();
    let bad = |line: &str| DgError::InvalidArgument {
        op: "parse_dot",
        msg: format!("unparseable line: {line:?}"),
    };
    for line in text.lines() {
        let line = line.trim().trim_end_matches(';');
        if line.is_empty()
            || line.starts_with("digraph")
            || line.starts_with('}')
            || line.starts_with("rankdir")
        {
            continue;
        }
        if let Some((from, rest)) = line.split_once("->") {
            let i: usize = from
                .trim()
                .strip_prefix('n')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line))?;
            let to = rest.split('[').next().unwrap_or(rest).trim();
            let j: usize = to
                .strip_prefix('n')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line))?;
            edges.insert((i, j));
            n = n.max(i).max(j);
        } else if let Some(v) = line.strip_prefix('n').and_then(|s| s.parse::<usize>().ok()) {
            n = n.max(v);
        } else {
            return Err(bad(line));
        }
    }
    Ok(StageGraph { n, edges })
}

/// Edge list as CSV lines `i,j,weight` (weight 1 when none is supplied).
pub fn export_edge_csv(
    graph: &StageGraph,
    weights: Option<&std::collections::BTreeMap<(usize, usize), f64>>,
) -> Result<String> {
    if let Some(w) = weights {
        for &(i, j) in w.keys() {
            if !graph.has_edge(i, j) {
                return Err(DgError::InvalidArgument {
                    op: "export_edge_csv",
                    msg: format!("weight given for non-existent edge ({i},{j})"),
                });
            }
        }
    }
    let mut out = String::from("i,j,weight\n");
    for (i, j) in graph.edges() {
        let w = weights.and_then(|w| w.get(&(i, j)).copied()).unwrap_or(1.0);
        let _ = writeln!(out, "{i},{j},{w}");
    }
    Ok(out)
}

pub type EdgeWeightMap = std::collections::BTreeMap<(usize, usize), f64>;

/// Reads back the CSV edge list produced by [`export_edge_csv`].
pub fn parse_edge_csv(text: &str) -> Result<(StageGraph, EdgeWeightMap)> {
    let mut n = 0usize;
    let mut edges = BTreeSet::new();
    let mut weights = std::collections::BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line == "i,j,weight" {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| DgError::InvalidArgument {
                    op: "parse_edge_csv",
                    msg: format!("unparseable line {}: {line:?}", ln + 1),
                })
        };
        let i = parse(parts.next())? as usize;
        let j = parse(parts.next())? as usize;
        let w = parse(parts.next())?;
        edges.insert((i, j));
        weights.insert((i, j), w);
        n = n.max(i).max(j);
    }
    Ok((StageGraph { n, edges }, weights))
}
