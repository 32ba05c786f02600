//! Important information-flow subgraph, extracted top-down.
//!
//! Nodes are residual states `(layer, point, position)`. Starting from the
//! top `POST` node of every target position, each visited node pulls in:
//!
//! * `POST (l, i)`: the residual edge from `MID (l, i)` and, if the FFN block
//!   importance reaches the threshold, an FFN edge between the same nodes;
//! * `MID (l, i)`: the residual edge from the state below it and one
//!   attention edge per source `j` whose edge importance reaches the threshold.
//!
//! Residual edges are always kept so routes stay connected. Everything is
//! computed from the captured run; no further forward passes happen here.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attention_step, ffn_step};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::transformer::{Point, RunCapture};

pub const DEFAULT_THRESHOLD: f64 = 0.04;

/// `Embed` nodes always carry `layer = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub point: Point,
    pub position: usize,
}

impl NodeId {
    pub fn embed(position: usize) -> Self {
        Self {
            layer: 0,
            point: Point::Embed,
            position,
        }
    }

    pub fn mid(layer: usize, position: usize) -> Self {
        Self {
            layer,
            point: Point::Mid,
            position,
        }
    }

    pub fn post(layer: usize, position: usize) -> Self {
        Self {
            layer,
            point: Point::Post,
            position,
        }
    }

    /// State feeding into layer `layer`'s attention block at `position`.
    fn below_mid(layer: usize, position: usize) -> Self {
        if layer == 0 {
            Self::embed(position)
        } else {
            Self::post(layer - 1, position)
        }
    }

    fn dot_id(&self) -> String {
        match self.point {
            Point::Embed => format!("embed_{}", self.position),
            Point::Mid => format!("mid_{}_{}", self.layer, self.position),
            Point::Post => format!("post_{}_{}", self.layer, self.position),
        }
    }
}

/// Declared in sort order: edges are ordered by `(dst, kind, src)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EdgeKind {
    Attn,
    Ffn,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
    pub weight: f64,
}

impl FlowEdge {
    fn sort_key(&self) -> (NodeId, EdgeKind, NodeId) {
        (self.dst, self.kind, self.src)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    pub nodes: BTreeSet<NodeId>,
    /// Sorted by `(dst, kind, src)`.
    pub edges: Vec<FlowEdge>,
    pub threshold: f64,
    pub targets: BTreeSet<usize>,
}

impl FlowGraph {
    pub fn edge_keys(&self) -> BTreeSet<(NodeId, EdgeKind, NodeId)> {
        self.edges.iter().map(FlowEdge::sort_key).collect()
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Edges entering `node`, plus the source nodes that must be visited next.
fn expand(capture: &RunCapture, params: &ModelParams, node: NodeId, threshold: f64) -> Result<Vec<FlowEdge>> {
    let NodeId { layer, position, .. } = node;
    let mut edges = Vec::new();
    match node.point {
        Point::Embed => {}
        Point::Post => {
            let step = ffn_step(capture, params, layer, position)?;
            let src = NodeId::mid(layer, position);
            edges.push(FlowEdge {
                src,
                dst: node,
                kind: EdgeKind::Residual,
                weight: step.residual(),
            });
            let importance = step.block_importance();
            if importance >= threshold {
                edges.push(FlowEdge {
                    src,
                    dst: node,
                    kind: EdgeKind::Ffn,
                    weight: importance.clamp(0.0, 1.0),
                });
            }
        }
        Point::Mid => {
            let step = attention_step(capture, params, layer, position)?;
            edges.push(FlowEdge {
                src: NodeId::below_mid(layer, position),
                dst: node,
                kind: EdgeKind::Residual,
                weight: step.residual(),
            });
            let mut per_source = vec![0.0; position + 1];
            for h in 0..capture.n_head() {
                for (j, v) in step.head_row(h, position + 1).into_iter().enumerate() {
                    per_source[j] += v;
                }
            }
            for (j, importance) in per_source.into_iter().enumerate() {
                if importance >= threshold {
                    edges.push(FlowEdge {
                        src: NodeId::below_mid(layer, j),
                        dst: node,
                        kind: EdgeKind::Attn,
                        weight: importance.clamp(0.0, 1.0),
                    });
                }
            }
        }
    }
    Ok(edges)
}

/// Extracts the subgraph of edges whose importance reaches `threshold`,
/// traced back from the top-layer states at `targets`.
pub fn build_graph(capture: &RunCapture, params: &ModelParams, threshold: f64, targets: &[usize]) -> Result<FlowGraph> {
    check_threshold(threshold)?;
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    for &t in targets {
        capture.check_position(t)?;
    }
    let top = capture.n_layer() - 1;
    let targets: BTreeSet<usize> = targets.iter().copied().collect();

    let mut nodes: BTreeSet<NodeId> = targets.iter().map(|&t| NodeId::post(top, t)).collect();
    let mut frontier: Vec<NodeId> = nodes.iter().copied().collect();
    let mut edges = Vec::new();
    // Level-synchronous breadth-first walk: every node on a frontier shares
    // the same (layer, point), so frontiers are independent.
    while !frontier.is_empty() {
        let expanded: Vec<Vec<FlowEdge>> = frontier
            .par_iter()
            .map(|&node| expand(capture, params, node, threshold))
            .collect::<Result<_>>()?;
        let mut next = BTreeSet::new();
        for edge in expanded.into_iter().flatten() {
            if nodes.insert(edge.src) {
                next.insert(edge.src);
            }
            edges.push(edge);
        }
        frontier = next.into_iter().collect();
    }
    edges.sort_by_key(FlowEdge::sort_key);
    Ok(FlowGraph {
        nodes,
        edges,
        threshold,
        targets,
    })
}

/// The same targets re-extracted at a new threshold.
pub fn densify(graph: &FlowGraph, capture: &RunCapture, params: &ModelParams, threshold: f64) -> Result<FlowGraph> {
    check_threshold(threshold)?;
    let targets: Vec<usize> = graph.targets.iter().copied().collect();
    build_graph(capture, params, threshold, &targets)
}

// ---------------------------------------------------------------------------
// Serialized document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub layer: usize,
    pub point: Point,
    pub position: usize,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRef {
    pub layer: usize,
    pub point: Point,
    pub position: usize,
}

impl From<NodeId> for NodeRef {
    fn from(n: NodeId) -> Self {
        Self {
            layer: n.layer,
            point: n.point,
            position: n.position,
        }
    }
}

impl From<&NodeRef> for NodeId {
    fn from(n: &NodeRef) -> Self {
        Self {
            layer: n.layer,
            point: n.point,
            position: n.position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub kind: EdgeKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub threshold: f64,
    pub targets: Vec<usize>,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
}

/// Rounds to 6 decimals and normalizes negative zero.
pub fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn serialize_graph(graph: &FlowGraph, token_strings: &[String]) -> GraphDocument {
    let token = |p: usize| token_strings.get(p).cloned().unwrap_or_default();
    GraphDocument {
        threshold: graph.threshold,
        targets: graph.targets.iter().copied().collect(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeDoc {
                layer: n.layer,
                point: n.point,
                position: n.position,
                token: token(n.position),
            })
            .collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| EdgeDoc {
                src: e.src.into(),
                dst: e.dst.into(),
                kind: e.kind,
                weight: round6(e.weight),
            })
            .collect(),
    }
}

impl GraphDocument {
    /// Graphviz rendering with the same nodes, edges and rounded weights.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph flow {\n  rankdir=BT;\n");
        let _ = writeln!(out, "  label=\"threshold={}\";", self.threshold);
        let mut by_rank: BTreeMap<(usize, Point), Vec<&NodeDoc>> = BTreeMap::new();
        for n in &self.nodes {
            by_rank.entry((n.layer, n.point)).or_default().push(n);
        }
        for ((_, _), nodes) in by_rank {
            out.push_str("  { rank=same;");
            for n in nodes {
                let id = NodeId::from(&NodeRef {
                    layer: n.layer,
                    point: n.point,
                    position: n.position,
                });
                let _ = write!(
                    out,
                    " {} [label=\"{} L{} {}\\n{}\"];",
                    id.dot_id(),
                    n.point,
                    n.layer,
                    n.position,
                    escape_dot(&n.token)
                );
            }
            out.push_str(" }\n");
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Attn => "color=green",
                EdgeKind::Ffn => "color=purple",
                EdgeKind::Residual => "color=gray",
            };
            let _ = writeln!(
                out,
                "  {} -> {} [kind={:?}, weight={}, {style}];",
                NodeId::from(&e.src).dot_id(),
                NodeId::from(&e.dst).dot_id(),
                format!("{:?}", e.kind).to_uppercase(),
                e.weight
            );
        }
        out.push_str("}\n");
        out
    }
}

fn escape_dot(s: &str) -> String {
    s.chars()
        .flat_map(|c| match c {
            '"' => vec!['\\', '"'],
            '\\' => vec!['\\', '\\'],
            '\n' => vec!['\\', 'n'],
            c => vec![c],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::transformer::run;

    fn setup() -> (ModelParams, RunCapture) {
        let p = ModelParams::random(ModelConfig::new(2, 2, 8, 32, 13, 8), 5, 0.5).unwrap();
        let cap = run(&p, &[1, 2, 3, 4]).unwrap();
        (p, cap)
    }

    #[test]
    fn argument_errors() {
        let (p, cap) = setup();
        assert!(matches!(
            build_graph(&cap, &p, 1.5, &[0]),
            Err(Error::InvalidThreshold(_))
        ));
        assert!(matches!(
            build_graph(&cap, &p, -0.1, &[0]),
            Err(Error::InvalidThreshold(_))
        ));
        assert!(matches!(build_graph(&cap, &p, 0.1, &[]), Err(Error::EmptyTargets)));
        assert!(matches!(build_graph(&cap, &p, 0.1, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn residual_spine_at_unreachable_threshold() {
        let (p, cap) = setup();
        let g = build_graph(&cap, &p, 1.0, &[3]).unwrap();
        let non_residual = g
            .edges
            .iter()
            .filter(|e| e.kind != EdgeKind::Residual && e.weight < 1.0);
        assert_eq!(non_residual.count(), 0);
        assert_eq!(g.count(EdgeKind::Residual), 2 * 2);
        assert_eq!(g.nodes.iter().filter(|n| n.point == Point::Embed).count(), 1);
    }

    #[test]
    fn densify_same_threshold_is_identity() {
        let (p, cap) = setup();
        let g = build_graph(&cap, &p, 0.05, &[2, 3]).unwrap();
        assert_eq!(densify(&g, &cap, &p, 0.05).unwrap(), g);
        assert!(matches!(densify(&g, &cap, &p, 2.0), Err(Error::InvalidThreshold(_))));
    }

    #[test]
    fn document_round_trip() {
        let (p, cap) = setup();
        let g = build_graph(&cap, &p, 0.0, &[3]).unwrap();
        let doc = serialize_graph(&g, cap.token_strings());
        assert!(!doc.nodes.is_empty());
        let text = serde_json::to_string(&doc).unwrap();
        let back: GraphDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        let multiset: Vec<_> = back
            .edges
            .iter()
            .map(|e| (NodeId::from(&e.dst), e.kind, NodeId::from(&e.src)))
            .collect();
        assert_eq!(multiset, g.edges.iter().map(FlowEdge::sort_key).collect::<Vec<_>>());
        let dot = doc.to_dot();
        assert_eq!(dot.matches("->").count(), doc.edges.len());
    }

    #[test]
    fn rounding() {
        assert_eq!(round6(0.123_456_78), 0.123_457);
        assert_eq!(round6(-1e-9).to_string(), "0");
    }
}
