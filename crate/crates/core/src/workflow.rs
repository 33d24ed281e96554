//! Workflow view discovery: a directly-follows graph over node names with
//! frequency counts and XOR-split annotation, plus segmentation of the log
//! into per-node instance lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TrajectoryLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatewayKind {
    XorSplit,
    None,
}

impl GatewayKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GatewayKind::XorSplit => "xor-split",
            GatewayKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowView {
    pub nodes: BTreeSet<String>,
    /// Sorted by `(from, to)`.
    pub edges: Vec<Edge>,
    pub gateways: BTreeMap<String, GatewayKind>,
    pub answer_node: String,
}

impl WorkflowView {
    pub fn successors(&self, node: &str) -> BTreeSet<&str> {
        self.edges
            .iter()
            .filter(|e| e.from == node)
            .map(|e| e.to.as_str())
            .collect()
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    pub fn xor_splits(&self) -> Vec<&str> {
        self.gateways
            .iter()
            .filter(|(_, &k)| k == GatewayKind::XorSplit)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Tab-separated export: `node` lines with gateway kind, then `edge` lines with counts.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let kind = self.gateways.get(n).copied().unwrap_or(GatewayKind::None);
            let answer = if *n == self.answer_node { "\tanswer" } else { "" };
            let _ = writeln!(out, "node\t{n}\t{}{answer}", kind.as_str());
        }
        for e in &self.edges {
            let _ = writeln!(out, "edge\t{}\t{}\t{}", e.from, e.to, e.count);
        }
        out
    }

    /// Graphviz DOT rendering.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph workflow {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let kind = self.gateways.get(n).copied().unwrap_or(GatewayKind::None);
            let shape = if *n == self.answer_node { "doublecircle" } else { "box" };
            let _ = writeln!(
                out,
                "  \"{n}\" [shape={shape}, gateway=\"{}\"];",
                kind.as_str()
            );
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{}\"];",
                e.from, e.to, e.count
            );
        }
        out.push_str("}\n");
        out
    }
}

/// Mines the directly-follows graph with every edge kept.
pub fn build_dfg(log: &TrajectoryLog) -> Result<WorkflowView> {
    build_dfg_with(log, 1)
}

/// Mines the directly-follows graph, dropping edges seen fewer than `min_edge_freq` times.
///
/// A node is an XOR split when it has at least two distinct successors and
/// no run visits two of those successors back to back right after the node.
pub fn build_dfg_with(log: &TrajectoryLog, min_edge_freq: usize) -> Result<WorkflowView> {
    if log.runs.is_empty() {
        return Err(Error::NoRuns);
    }
    let mut nodes = BTreeSet::new();
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for run in &log.runs {
        for ev in &run.events {
            nodes.insert(ev.node_name.clone());
        }
        for w in run.events.windows(2) {
            *counts
                .entry((w[0].node_name.clone(), w[1].node_name.clone()))
                .or_default() += 1;
        }
    }
    let edges: Vec<Edge> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_edge_freq.max(1))
        .map(|((from, to), count)| Edge { from, to, count })
        .collect();

    let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in &edges {
        succ.entry(e.from.as_str()).or_default().insert(e.to.as_str());
    }
    let mut gateways = BTreeMap::new();
    for n in &nodes {
        let s = succ.get(n.as_str());
        let kind = match s {
            Some(s) if s.len() >= 2 => {
                let concurrent = log.runs.iter().any(|run| {
                    run.events.windows(3).any(|w| {
                        w[0].node_name == *n
                            && w[1].node_name != w[2].node_name
                            && s.contains(w[1].node_name.as_str())
                            && s.contains(w[2].node_name.as_str())
                    })
                });
                if concurrent {
                    GatewayKind::None
                } else {
                    GatewayKind::XorSplit
                }
            }
            _ => GatewayKind::None,
        };
        gateways.insert(n.clone(), kind);
    }
    let answer_node = if log.answer_node.is_empty() {
        log.majority_last_node().unwrap_or_default()
    } else {
        log.answer_node.clone()
    };
    Ok(WorkflowView {
        nodes,
        edges,
        gateways,
        answer_node,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInstance {
    pub node_name: String,
    pub run_id: String,
    pub task_id: String,
    pub input_text: String,
    pub output_text: String,
    /// Occurrence index of this node within its run.
    pub ordinal: usize,
}

pub type Segments = BTreeMap<String, Vec<NodeInstance>>;

/// Maps every workflow node to its instances across runs.
pub fn segment_instances(view: &WorkflowView, log: &TrajectoryLog) -> Result<Segments> {
    let mut out: Segments = view.nodes.iter().map(|n| (n.clone(), Vec::new())).collect();
    for run in &log.runs {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for ev in &run.events {
            let list = out.get_mut(&ev.node_name).ok_or_else(|| {
                Error::Consistency(format!(
                    "node {} of run {} is absent from the workflow view",
                    ev.node_name, run.run_id
                ))
            })?;
            let ord = seen.entry(ev.node_name.as_str()).or_default();
            list.push(NodeInstance {
                node_name: ev.node_name.clone(),
                run_id: ev.run_id.clone(),
                task_id: ev.task_id.clone(),
                input_text: ev.input_text.clone(),
                output_text: ev.output_text.clone(),
                ordinal: *ord,
            });
            *ord += 1;
        }
    }
    Ok(out)
}

/// Final occurrence of `node` for each run that visits it, ordered by run id.
pub fn final_instances<'a>(segments: &'a Segments, node: &str) -> Vec<&'a NodeInstance> {
    let mut last: BTreeMap<&str, &NodeInstance> = BTreeMap::new();
    if let Some(list) = segments.get(node) {
        for inst in list {
            match last.get(inst.run_id.as_str()) {
                Some(prev) if prev.ordinal >= inst.ordinal => {}
                _ => {
                    last.insert(inst.run_id.as_str(), inst);
                }
            }
        }
    }
    last.into_values().collect()
}

/// One answer instance per terminal run: the final occurrence of the answer node.
pub fn answer_instances<'a>(
    segments: &'a Segments,
    view: &WorkflowView,
    log: &TrajectoryLog,
) -> Vec<&'a NodeInstance> {
    let terminal: BTreeSet<&str> = log
        .runs
        .iter()
        .filter(|r| r.terminal)
        .map(|r| r.run_id.as_str())
        .collect();
    final_instances(segments, &view.answer_node)
        .into_iter()
        .filter(|i| terminal.contains(i.run_id.as_str()))
        .collect()
}
