//! From note probabilities to a melody.
//!
//! A per-piece threshold splits the probabilities into two single-linkage
//! clusters; notes above it form the `cnn` melody. For `cnn_mono` the kept
//! notes become nodes of a digraph whose edges point to the earliest notes
//! starting after a node ends, weighted by the negated successor
//! probability. The shortest path from the start node to the end node is the
//! monophonic melody.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_io::{Note, NoteId, Score};

/// Probability assigned to the end node. Edges into it weigh `+0.5`.
pub const OMEGA_PROBABILITY: f64 = -0.5;

/// Paths whose weights differ by no more than this are considered tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub low_cluster: Vec<f64>,
    pub high_cluster: Vec<f64>,
}

impl Threshold {
    /// True when the values did not separate into two clusters.
    pub fn is_degenerate(&self) -> bool {
        self.low_cluster.is_empty()
    }
}

/// Two-cluster single-linkage cut of scalar values.
///
/// In one dimension the last merge of single-linkage agglomeration joins the
/// two sides of the widest gap between consecutive sorted values, so the cut
/// is found directly. Equal widest gaps resolve to the lowest one. If every
/// value is equal (or there is only one) the threshold is placed just below
/// the minimum and all clusters collapse into `high_cluster`.
pub fn cluster_threshold(probs: &[f64]) -> Result<Threshold> {
    if probs.is_empty() {
        return Err(Error::arg("cannot threshold an empty set of probabilities"));
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite()) {
        return Err(Error::arg(format!("probability {bad} is not finite")));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut cut = None;
    let mut widest = 0.0;
    for (i, w) in sorted.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if gap > widest {
            widest = gap;
            cut = Some(i + 1);
        }
    }
    Ok(match cut {
        Some(k) => Threshold {
            value: sorted[k - 1],
            high_cluster: sorted.split_off(k),
            low_cluster: sorted,
        },
        None => Threshold {
            value: sorted[0].next_down(),
            low_cluster: Vec::new(),
            high_cluster: sorted,
        },
    })
}

/// Ids whose probability is strictly above the threshold.
pub fn retain(note_probs: &BTreeMap<NoteId, f64>, t: &Threshold) -> BTreeSet<NoteId> {
    note_probs
        .iter()
        .filter(|(_, &p)| p > t.value)
        .map(|(&id, _)| id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Alpha,
    Note(Note),
    Omega,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub probability: f64,
}

impl Node {
    fn onset(&self) -> f64 {
        match self.kind {
            NodeKind::Alpha => f64::NEG_INFINITY,
            NodeKind::Note(n) => n.onset,
            NodeKind::Omega => f64::INFINITY,
        }
    }

    fn end(&self) -> f64 {
        match self.kind {
            NodeKind::Alpha => 0.0,
            NodeKind::Note(n) => n.end(),
            NodeKind::Omega => f64::INFINITY,
        }
    }

    pub fn note_id(&self) -> Option<NoteId> {
        match self.kind {
            NodeKind::Note(n) => Some(n.id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Node 0 is the start node, the last node is the end node, and the notes
/// in between are ordered by `(onset, pitch, id)`.
#[derive(Debug, Clone)]
pub struct MeloDigraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    out: Vec<Vec<usize>>,
}

impl MeloDigraph {
    pub const ALPHA: usize = 0;

    pub fn omega(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Outgoing edges of `node`, in increasing target order.
    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.out[node].iter().map(|&e| &self.edges[e])
    }

    /// Sum of edge weights along consecutive nodes, or `None` if some hop
    /// is not an edge.
    pub fn path_weight(&self, path: &[usize]) -> Option<f64> {
        path.windows(2)
            .map(|w| self.outgoing(w[0]).find(|e| e.to == w[1]).map(|e| e.weight))
            .sum()
    }

    /// Nodes sorted so every edge points forward. Always exists.
    pub fn topological_order(&self) -> Vec<usize> {
        // edges strictly advance onset, and node order is by onset already
        (0..self.nodes.len()).collect()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph melograph {\n  rankdir=LR;\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let label = match n.kind {
                NodeKind::Alpha => "alpha".to_string(),
                NodeKind::Omega => "omega".to_string(),
                NodeKind::Note(note) => format!("{} p={:.3}", note.id, n.probability),
            };
            let _ = writeln!(s, "  n{i} [label=\"{label}\"];");
        }
        for e in &self.edges {
            let _ = writeln!(s, "  n{} -> n{} [label=\"{:.3}\"];", e.from, e.to, e.weight);
        }
        s.push_str("}\n");
        s
    }
}

/// Builds the digraph over `notes`, each of which needs an entry in `probs`.
///
/// Every node links to the notes sharing the earliest onset at or after its
/// own end; a node with no such note links to the end node instead.
pub fn build_melograph(notes: &[Note], probs: &BTreeMap<NoteId, f64>) -> Result<MeloDigraph> {
    let mut sorted = notes.to_vec();
    sorted.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.id.cmp(&b.id))
    });
    let mut nodes = Vec::with_capacity(sorted.len() + 2);
    nodes.push(Node {
        kind: NodeKind::Alpha,
        probability: 0.0,
    });
    for n in &sorted {
        let p = *probs
            .get(&n.id)
            .ok_or_else(|| Error::arg(format!("no probability for note {}", n.id)))?;
        nodes.push(Node {
            kind: NodeKind::Note(*n),
            probability: p,
        });
    }
    nodes.push(Node {
        kind: NodeKind::Omega,
        probability: OMEGA_PROBABILITY,
    });
    let omega = nodes.len() - 1;

    let mut edges = Vec::new();
    let mut out = vec![Vec::new(); nodes.len()];
    for u in 0..omega {
        let end = nodes[u].end();
        // notes are onset-sorted: the first qualifying one fixes the minimum
        let first = (1..omega).find(|&v| nodes[v].onset() >= end);
        let targets: Vec<usize> = match first {
            Some(f) => {
                let min = nodes[f].onset();
                (f..omega).take_while(|&v| nodes[v].onset() == min).collect()
            }
            None => vec![omega],
        };
        for v in targets {
            out[u].push(edges.len());
            edges.push(Edge {
                from: u,
                to: v,
                weight: -nodes[v].probability,
            });
        }
    }
    Ok(MeloDigraph { nodes, edges, out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelodyPath {
    /// Interior nodes of the path, in time order.
    pub notes: Vec<NoteId>,
    /// Total weight including the edges out of the start node and into the
    /// end node.
    pub weight: f64,
}

/// Bellman-Ford from the end node over reversed edges: distance of every
/// node to the end node.
fn distances_to_omega(g: &MeloDigraph) -> Result<Vec<f64>> {
    let n = g.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[g.omega()] = 0.0;
    for _ in 1..n {
        let mut changed = false;
        for e in &g.edges {
            let cand = dist[e.to] + e.weight;
            if cand < dist[e.from] {
                dist[e.from] = cand;
                changed = true;
            }
        }
        if !changed {
            return Ok(dist);
        }
    }
    if g.edges.iter().any(|e| dist[e.to] + e.weight < dist[e.from]) {
        return Err(Error::Internal("negative cycle in melody graph".into()));
    }
    Ok(dist)
}

/// Minimum-weight path from start to end node.
///
/// Among equal-weight paths the one whose first differing note has the
/// higher pitch wins, then the lower note id.
pub fn shortest_path_melody(g: &MeloDigraph) -> Result<MelodyPath> {
    let dist = distances_to_omega(g)?;
    let omega = g.omega();
    if !dist[MeloDigraph::ALPHA].is_finite() {
        return Err(Error::Internal("end node unreachable from start node".into()));
    }
    let mut notes = Vec::new();
    let mut weight = 0.0;
    let mut u = MeloDigraph::ALPHA;
    while u != omega {
        let best = g
            .outgoing(u)
            .filter(|e| e.weight + dist[e.to] <= dist[u] + TIE_TOLERANCE)
            .max_by(|a, b| {
                let (na, nb) = (&g.nodes[a.to], &g.nodes[b.to]);
                let key = |n: &Node| match n.kind {
                    NodeKind::Note(note) => (note.pitch as i32, -(note.id.0 as i64)),
                    _ => (-1, 0),
                };
                key(na).cmp(&key(nb))
            })
            .ok_or_else(|| Error::Internal(format!("no shortest-path successor for node {u}")))?;
        weight += best.weight;
        u = best.to;
        notes.extend(g.nodes[u].note_id());
    }
    Ok(MelodyPath { notes, weight })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Cnn,
    CnnMono,
}

/// Melody ids for `mode`, ordered by time.
pub fn extract_melody(score: &Score, note_probs: &BTreeMap<NoteId, f64>, mode: SelectMode) -> Result<Vec<NoteId>> {
    if let Some(id) = score.ids().find(|id| !note_probs.contains_key(id)) {
        return Err(Error::arg(format!("no probability for note {id}")));
    }
    if score.is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = score.ids().map(|id| note_probs[&id]).collect();
    let t = cluster_threshold(&values)?;
    let kept = retain(note_probs, &t);
    let kept_notes: Vec<Note> = score.notes().iter().filter(|n| kept.contains(&n.id)).copied().collect();
    match mode {
        SelectMode::Cnn => Ok(kept_notes.iter().map(|n| n.id).collect()),
        SelectMode::CnnMono => Ok(shortest_path_melody(&build_melograph(&kept_notes, note_probs)?)?.notes),
    }
}
