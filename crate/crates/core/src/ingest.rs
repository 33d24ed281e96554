//! Trajectory log ingestion.
//!
//! Two dialects are understood:
//!
//! * [`Dialect::Canonical`]: one JSON object per line with the keys `run_id`,
//!   `task_id`, `node`, `ts`, `input`, `output` and the optional `payload`
//!   (string map) and `incomplete` (bool).
//! * [`Dialect::NodeBlocks`]: a sequence of `node_name: { ... }` blocks as
//!   produced by the analytics SDK log excerpts, where the block carries
//!   `run_id`, `task_id` and `text_analyzed`.
//!
//! Records without a timestamp receive the record's position in the file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub run_id: String,
    pub task_id: String,
    pub node_name: String,
    pub timestamp: u64,
    pub input_text: String,
    pub output_text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
    /// Truncated or otherwise unfinished record. Always set when the output is empty.
    #[serde(default)]
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: String,
    pub events: Vec<TaskEvent>,
    /// Last event sits on the answer node.
    pub terminal: bool,
}

impl Run {
    pub fn last_node(&self) -> Option<&str> {
        self.events.last().map(|e| e.node_name.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub runs: Vec<Run>,
    pub user_prompt: String,
    pub agent_spec: BTreeMap<String, String>,
    pub source_files: Vec<String>,
    /// Node whose final occurrence produces the user-facing answer.
    pub answer_node: String,
}

impl TrajectoryLog {
    pub fn event_count(&self) -> usize {
        self.runs.iter().map(|r| r.events.len()).sum()
    }

    pub fn run(&self, run_id: &str) -> Option<&Run> {
        self.runs.iter().find(|r| r.run_id == run_id)
    }

    /// Node name ending the majority of runs; ties go to the lexicographically smallest name.
    pub fn majority_last_node(&self) -> Option<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for run in &self.runs {
            if let Some(n) = run.last_node() {
                *counts.entry(n).or_default() += 1;
            }
        }
        let best = counts.values().copied().max()?;
        counts
            .into_iter()
            .find(|&(_, c)| c == best)
            .map(|(n, _)| n.to_string())
    }

    /// Sets the answer node and recomputes every run's `terminal` flag.
    pub fn set_answer_node(&mut self, node: &str) {
        self.answer_node = node.to_string();
        for run in &mut self.runs {
            run.terminal = run.last_node() == Some(node);
        }
    }

    /// Attaches the agent specification (prompts and user prompt).
    pub fn attach_spec(&mut self, spec: &AgentSpec) {
        self.user_prompt = spec.user_prompt.clone();
        self.agent_spec = spec.prompts.clone();
        if let Some(answer) = &spec.answer_node {
            self.set_answer_node(answer);
        }
    }

    /// Serializes every event to the canonical line-delimited dialect.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            for ev in &run.events {
                let rec = CanonicalRecord {
                    run_id: ev.run_id.clone(),
                    task_id: ev.task_id.clone(),
                    node: ev.node_name.clone(),
                    ts: Some(ev.timestamp),
                    input: ev.input_text.clone(),
                    output: ev.output_text.clone(),
                    payload: ev.payload.clone(),
                    incomplete: ev.incomplete,
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }
}

/// Log dialect tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    Canonical,
    NodeBlocks,
}

impl FromStr for Dialect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" | "jsonl" => Ok(Dialect::Canonical),
            "node-blocks" | "blocks" | "listing" => Ok(Dialect::NodeBlocks),
            other => Err(Error::InvalidArgument(format!("unknown log dialect {other}"))),
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dialect::Canonical => "canonical",
            Dialect::NodeBlocks => "node-blocks",
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalRecord {
    run_id: String,
    task_id: String,
    node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ts: Option<u64>,
    #[serde(default)]
    input: String,
    #[serde(default)]
    output: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    payload: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    incomplete: bool,
}

struct RawRecord {
    line: usize,
    run_id: String,
    task_id: String,
    node: String,
    ts: Option<u64>,
    input: String,
    output: String,
    payload: BTreeMap<String, String>,
    incomplete: bool,
}

/// Parses raw log content into a [`TrajectoryLog`].
///
/// Events group into runs by `run_id` (runs ordered by first appearance) and
/// are ordered by timestamp within each run, keeping file order on ties.
/// The answer node defaults to the majority last node.
pub fn parse_log(bytes: &[u8], dialect: Dialect) -> Result<TrajectoryLog> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "content is not valid UTF-8".into(),
    })?;
    let records = match dialect {
        Dialect::Canonical => parse_canonical(text)?,
        Dialect::NodeBlocks => parse_node_blocks(text)?,
    };
    assemble(records)
}

/// Parses several files and merges them in sorted file-identifier order.
pub fn parse_files(files: &[(String, Vec<u8>, Dialect)]) -> Result<TrajectoryLog> {
    let mut sorted: Vec<&(String, Vec<u8>, Dialect)> = files.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut records = Vec::new();
    let mut offset = 0u64;
    for (_, bytes, dialect) in &sorted {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse {
            line: 0,
            message: "content is not valid UTF-8".into(),
        })?;
        let mut recs = match dialect {
            Dialect::Canonical => parse_canonical(text)?,
            Dialect::NodeBlocks => parse_node_blocks(text)?,
        };
        for r in &mut recs {
            // keep synthetic timestamps monotone across files
            if r.ts.is_none() {
                r.ts = Some(offset + r.line as u64);
            }
        }
        offset += text.lines().count() as u64 + 1;
        records.extend(recs);
    }
    let mut log = assemble(records)?;
    log.source_files = sorted.iter().map(|f| f.0.clone()).collect();
    Ok(log)
}

pub fn read_log_file(path: &Path, dialect: Dialect) -> Result<TrajectoryLog> {
    let bytes = std::fs::read(path)?;
    let mut log = parse_log(&bytes, dialect)?;
    log.source_files = vec![path.display().to_string()];
    Ok(log)
}

fn parse_canonical(text: &str) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CanonicalRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(RawRecord {
            line: lineno,
            run_id: rec.run_id,
            task_id: rec.task_id,
            node: rec.node,
            ts: rec.ts,
            input: rec.input,
            output: rec.output,
            payload: rec.payload,
            incomplete: rec.incomplete,
        });
    }
    Ok(out)
}

fn parse_node_blocks(text: &str) -> Result<Vec<RawRecord>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0usize;
    let line_at = |p: usize| 1 + bytes[..p].iter().filter(|&&b| b == b'\n').count();
    loop {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b',') {
            pos += 1;
        }
        if pos >= bytes.len() {
            break;
        }
        let start = pos;
        let lineno = line_at(start);
        while pos < bytes.len() && bytes[pos] != b':' && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() || bytes[pos] != b':' {
            return Err(Error::Parse {
                line: lineno,
                message: "expected `node_name: {` block header".into(),
            });
        }
        let node = text[start..pos].trim().trim_matches('"').to_string();
        if node.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty node name".into(),
            });
        }
        pos += 1;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() || bytes[pos] != b'{' {
            return Err(Error::Parse {
                line: line_at(pos.min(bytes.len().saturating_sub(1))),
                message: format!("expected `{{` after node name {node}"),
            });
        }
        let body_start = pos;
        let body_end = matching_brace(bytes, body_start).ok_or_else(|| Error::Parse {
            line: lineno,
            message: "unterminated record block".into(),
        })?;
        pos = body_end + 1;
        let value: serde_json::Value =
            serde_json::from_str(&text[body_start..=body_end]).map_err(|e| Error::Parse {
                line: lineno + e.line().saturating_sub(1),
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: lineno,
            message: "record block is not an object".into(),
        })?;
        let field = |k: &str| obj.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let run_id = field("run_id").ok_or_else(|| Error::Parse {
            line: lineno,
            message: "missing run_id".into(),
        })?;
        let task_id = field("task_id").ok_or_else(|| Error::Parse {
            line: lineno,
            message: "missing task_id".into(),
        })?;
        let output = field("text_analyzed")
            .or_else(|| field("output"))
            .unwrap_or_default();
        let input = field("input").or_else(|| field("input_text")).unwrap_or_default();
        let ts = obj.get("ts").and_then(|v| v.as_u64());
        let mut payload = BTreeMap::new();
        for (k, v) in obj {
            if matches!(
                k.as_str(),
                "run_id" | "task_id" | "text_analyzed" | "output" | "input" | "input_text" | "ts"
            ) {
                continue;
            }
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            payload.insert(k.clone(), s);
        }
        out.push(RawRecord {
            line: lineno,
            run_id,
            task_id,
            node,
            ts,
            input,
            output,
            payload,
            incomplete: false,
        });
    }
    Ok(out)
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn assemble(records: Vec<RawRecord>) -> Result<TrajectoryLog> {
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(u64, usize, TaskEvent)>> = HashMap::new();
    for (file_pos, rec) in records.into_iter().enumerate() {
        if rec.run_id.is_empty() || rec.task_id.is_empty() {
            return Err(Error::Parse {
                line: rec.line,
                message: "run_id and task_id must be non-empty".into(),
            });
        }
        if !seen.insert((rec.run_id.clone(), rec.task_id.clone())) {
            return Err(Error::Conflict {
                run_id: rec.run_id,
                task_id: rec.task_id,
            });
        }
        let ts = rec.ts.unwrap_or(rec.line as u64);
        let incomplete = rec.incomplete || rec.output.is_empty();
        let ev = TaskEvent {
            run_id: rec.run_id.clone(),
            task_id: rec.task_id,
            node_name: rec.node,
            timestamp: ts,
            input_text: rec.input,
            output_text: rec.output,
            payload: rec.payload,
            incomplete,
        };
        let slot = grouped.entry(rec.run_id.clone()).or_insert_with(|| {
            order.push(rec.run_id);
            Vec::new()
        });
        slot.push((ts, file_pos, ev));
    }
    let mut runs = Vec::with_capacity(order.len());
    for run_id in order {
        let mut evs = grouped.remove(&run_id).unwrap_or_default();
        evs.sort_by_key(|&(ts, pos, _)| (ts, pos));
        let ties = evs.windows(2).any(|w| w[0].0 == w[1].0);
        if ties {
            log::warn!("run {run_id}: colliding timestamps ordered by file position");
        }
        runs.push(Run {
            run_id,
            events: evs.into_iter().map(|(_, _, e)| e).collect(),
            terminal: false,
        });
    }
    let mut log = TrajectoryLog {
        runs,
        ..Default::default()
    };
    if let Some(answer) = log.majority_last_node() {
        log.set_answer_node(&answer);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub run_id: String,
    pub reason: String,
}

pub const REASON_NO_ANSWER: &str = "no answer-node event";
pub const REASON_EMPTY_TERMINAL: &str = "empty terminal output";
pub const REASON_INCOMPLETE: &str = "incomplete event";

/// Keeps only terminal runs without incomplete events.
pub fn filter_valid_runs(log: TrajectoryLog) -> (TrajectoryLog, Vec<Rejection>) {
    let mut rejected = Vec::new();
    let mut kept = Vec::new();
    for run in log.runs {
        let reason = if !run.terminal {
            Some(REASON_NO_ANSWER)
        } else if run.events.last().is_some_and(|e| e.output_text.is_empty()) {
            Some(REASON_EMPTY_TERMINAL)
        } else if run.events.iter().any(|e| e.incomplete) {
            Some(REASON_INCOMPLETE)
        } else {
            None
        };
        match reason {
            Some(r) => rejected.push(Rejection {
                run_id: run.run_id,
                reason: r.to_string(),
            }),
            None => kept.push(run),
        }
    }
    (
        TrajectoryLog {
            runs: kept,
            ..log
        },
        rejected,
    )
}

/// Observed agent description: user prompt plus per-node system prompts.
///
/// Stored as TOML:
///
/// ```toml
/// user_prompt = "Is user Trudy allowed access?"
/// answer_node = "orchestration_agent"
///
/// [prompts]
/// orchestration_agent = "Users are generally allowed. ..."
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub user_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_node: Option<String>,
    #[serde(default)]
    pub prompts: BTreeMap<String, String>,
}

impl AgentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
