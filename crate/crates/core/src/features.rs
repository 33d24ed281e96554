//! Semantic feature classes, extracted spans, canonical values and the
//! one-hot feature matrix that feeds the decision tree.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cluster::{select_k_elbow, AnnotatedCluster};
use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway, Stage};
use crate::prompts;

pub const NONE_VALUE: &str = "none";
const LABEL_SPAN_CAP: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureClass {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elicitation {
    pub classes: Vec<FeatureClass>,
    /// `(name, reason)` for classes that were discarded.
    pub dropped: Vec<(String, String)>,
    pub provenance: String,
}

/// One-sentence summary of a raw text.
pub fn distill(text: &str, gateway: &Gateway) -> Result<(String, String)> {
    let (resp, reference) = gateway.chat_ref(&ChatRequest::new(Stage::Distill, prompts::distill(text)))?;
    let sentence = resp.split_whitespace().collect::<Vec<_>>().join(" ");
    if sentence.is_empty() {
        let head: String = text.chars().take(80).collect();
        return Err(Error::DistillationFailed(format!("empty summary for {head:?}")));
    }
    Ok((sentence, reference))
}

/// Texts offered to elicitation: up to `per_cluster` members of every
/// non-negligible cluster, lowest run id first.
pub fn elicitation_samples(
    clusters: &[AnnotatedCluster],
    texts: &BTreeMap<String, String>,
    per_cluster: usize,
    min_cluster_frac: f64,
) -> Vec<(usize, Vec<String>)> {
    let total: usize = clusters.iter().map(|c| c.size).sum();
    clusters
        .iter()
        .filter(|c| !c.is_negligible(total, min_cluster_frac))
        .map(|c| {
            let mut ids: Vec<&String> = c.members.iter().collect();
            ids.sort();
            let picked = ids
                .into_iter()
                .filter_map(|id| texts.get(id).cloned())
                .take(per_cluster)
                .collect();
            (c.index, picked)
        })
        .collect()
}

pub fn elicit_feature_classes(samples: &[(usize, Vec<String>)], gateway: &Gateway) -> Result<Elicitation> {
    let view: Vec<(usize, Vec<&str>)> = samples
        .iter()
        .map(|(i, t)| (*i, t.iter().map(String::as_str).collect()))
        .collect();
    let (resp, reference) = gateway.chat_ref(&ChatRequest::new(Stage::Elicit, prompts::elicit(&view)))?;
    let raw = parse_class_list(&resp).ok_or_else(|| Error::ElicitationParse { raw: resp.clone() })?;
    let mut classes = Vec::new();
    let mut dropped = Vec::new();
    let mut seen = BTreeSet::new();
    for (name, description) in raw {
        let name = name.trim().to_string();
        let key = name.to_lowercase();
        if name.is_empty() {
            continue;
        }
        if !seen.insert(key) {
            log::warn!("duplicate feature class {name:?} dropped");
            dropped.push((name, "duplicate class".into()));
            continue;
        }
        if description.chars().any(|c| c.is_ascii_digit()) {
            log::warn!("feature class {name:?} describes numeric values; dropped");
            dropped.push((name, "description references numbers".into()));
            continue;
        }
        classes.push(FeatureClass {
            name,
            description: description.trim().to_string(),
        });
    }
    if classes.is_empty() {
        return Err(Error::ElicitationParse { raw: resp });
    }
    Ok(Elicitation {
        classes,
        dropped,
        provenance: reference,
    })
}

/// Slice from the first `open` to the last `close`, which tolerates code fences and chatter.
fn json_region(text: &str, open: char, close: char) -> Option<&str> {
    let s = text.find(open)?;
    let e = text.rfind(close)?;
    (e > s).then(|| &text[s..=e])
}

fn parse_json_loose(text: &str) -> Option<Value> {
    serde_json::from_str(text.trim())
        .ok()
        .or_else(|| json_region(text, '{', '}').and_then(|r| serde_json::from_str(r).ok()))
        .or_else(|| json_region(text, '[', ']').and_then(|r| serde_json::from_str(r).ok()))
}

fn describe(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(o) => ["description", "desc", "definition"]
            .iter()
            .find_map(|k| o.get(*k).and_then(Value::as_str))
            .unwrap_or("")
            .to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn classes_from_array(items: &[Value]) -> Vec<(String, String)> {
    items
        .iter()
        .filter_map(|it| match it {
            Value::Object(o) => {
                let name = ["name", "feature", "class", "feature_name"]
                    .iter()
                    .find_map(|k| o.get(*k).and_then(Value::as_str))?;
                Some((name.to_string(), describe(it)))
            }
            Value::String(s) => Some(match s.split_once(':') {
                Some((n, d)) => (n.to_string(), d.to_string()),
                None => (s.clone(), String::new()),
            }),
            _ => None,
        })
        .collect()
}

/// `(name, description)` pairs from a JSON object, array, `{"features": [...]}`
/// wrapper, or `"name": "description"` lines.
fn parse_class_list(text: &str) -> Option<Vec<(String, String)>> {
    let out = match parse_json_loose(text) {
        Some(Value::Object(o)) => match o.get("features") {
            Some(Value::Array(a)) => classes_from_array(a),
            Some(Value::Object(inner)) => inner.iter().map(|(k, v)| (k.clone(), describe(v))).collect(),
            _ => o.iter().map(|(k, v)| (k.clone(), describe(v))).collect(),
        },
        Some(Value::Array(a)) => classes_from_array(&a),
        _ => text
            .lines()
            .filter_map(|l| {
                let l = l.trim().trim_start_matches(['-', '*', ' ']).trim_end_matches(',');
                let (n, d) = l.split_once(':')?;
                let n = n.trim().trim_matches('"');
                let d = d.trim().trim_matches('"');
                (!n.is_empty() && n.split_whitespace().count() <= 4).then(|| (n.to_string(), d.to_string()))
            })
            .collect(),
    };
    (!out.is_empty()).then_some(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub row_id: String,
    /// Class name to extracted span; `None` when absent.
    pub spans: BTreeMap<String, Option<String>>,
    pub provenance: String,
}

fn span_value(v: &Value) -> Option<String> {
    let s = match v {
        Value::Null => return None,
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().find_map(|x| x.as_str().map(str::to_string))?,
        Value::Bool(false) => return None,
        other => other.to_string(),
    };
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case(NONE_VALUE) || t.eq_ignore_ascii_case("null") || t.eq_ignore_ascii_case("n/a") {
        None
    } else {
        Some(t.to_string())
    }
}

pub fn extract_feature_values(row_id: &str, text: &str, classes: &[FeatureClass], gateway: &Gateway) -> Result<Extraction> {
    let pairs: Vec<(&str, &str)> = classes.iter().map(|c| (c.name.as_str(), c.description.as_str())).collect();
    let (resp, reference) = gateway.chat_ref(&ChatRequest::new(Stage::Extract, prompts::extract(text, &pairs)))?;
    let obj = match parse_json_loose(&resp) {
        Some(Value::Object(o)) => o,
        _ => return Err(Error::ExtractionParse { raw: resp }),
    };
    let lower: BTreeMap<String, &Value> = obj.iter().map(|(k, v)| (k.trim().to_lowercase(), v)).collect();
    let spans = classes
        .iter()
        .map(|c| {
            let v = lower.get(&c.name.to_lowercase()).and_then(|v| span_value(v));
            (c.name.clone(), v)
        })
        .collect();
    Ok(Extraction {
        row_id: row_id.to_string(),
        spans,
        provenance: reference,
    })
}

/// Lowercase with collapsed whitespace.
pub fn normalize_span(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureValueSet {
    pub class: String,
    /// Canonical value labels; `none` is always last.
    pub values: Vec<String>,
    /// Normalized span to canonical value.
    pub span_to_value: BTreeMap<String, String>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl FeatureValueSet {
    pub fn value_of(&self, span: Option<&str>) -> Option<&str> {
        match span {
            None => Some(NONE_VALUE),
            Some(s) => self.span_to_value.get(&normalize_span(s)).map(String::as_str),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonOptions {
    pub k_max: usize,
    pub drop_threshold: f64,
    pub seed: u64,
}

impl Default for CanonOptions {
    fn default() -> Self {
        CanonOptions {
            k_max: 10,
            drop_threshold: 0.1,
            seed: 42,
        }
    }
}

fn clean_label(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    normalize_span(line.trim_matches(['"', '\'', '.', '*', '`']))
}

/// Groups the distinct spans of one class by embedding similarity and names each group.
pub fn canonicalize_values(
    class: &FeatureClass,
    spans: &[Option<String>],
    opts: CanonOptions,
    gateway: &Gateway,
) -> Result<FeatureValueSet> {
    let distinct: Vec<String> = spans
        .iter()
        .flatten()
        .map(|s| normalize_span(s))
        .filter(|s| !s.is_empty())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut set = FeatureValueSet {
        class: class.name.clone(),
        values: Vec::new(),
        span_to_value: BTreeMap::new(),
        provenance: Vec::new(),
    };
    if !distinct.is_empty() {
        let vectors = gateway.embed_batch(&distinct)?;
        let k_max = opts.k_max.max(1).min(distinct.len());
        let sel = select_k_elbow::<f64, _>(&vectors, k_max, opts.drop_threshold, opts.seed)?;
        let mut groups: Vec<Vec<&str>> = vec![Vec::new(); sel.k];
        for (span, &a) in distinct.iter().zip(&sel.result.assignments) {
            groups[a].push(span);
        }
        groups.retain(|g| !g.is_empty());
        groups.sort();
        let prompts_in: Vec<String> = groups
            .iter()
            .map(|g| {
                let shown: Vec<&str> = g.iter().copied().take(LABEL_SPAN_CAP).collect();
                prompts::label_values(&class.name, &class.description, &shown)
            })
            .collect();
        let answers = gateway.map_bounded(&prompts_in, |p| gateway.chat_ref(&ChatRequest::new(Stage::LabelValues, p.clone())));
        let mut used: BTreeSet<String> = BTreeSet::new();
        used.insert(NONE_VALUE.to_string());
        for (group, answer) in groups.iter().zip(answers) {
            let (resp, reference) = answer?;
            let mut label = clean_label(&resp);
            if label.is_empty() {
                label = group.iter().min_by_key(|s| (s.len(), **s)).map(|s| s.to_string()).unwrap_or_default();
            }
            let base = label.clone();
            let mut n = 2;
            while used.contains(&label) {
                label = format!("{base} ({n})");
                n += 1;
            }
            used.insert(label.clone());
            for s in group {
                set.span_to_value.insert(s.to_string(), label.clone());
            }
            set.values.push(label);
            set.provenance.push(reference);
        }
    }
    set.values.push(NONE_VALUE.to_string());
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Column {
    pub class: String,
    pub value: String,
}

impl Column {
    pub fn name(&self) -> String {
        format!("{}={}", self.class, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub node_name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<u8>>,
    pub row_ids: Vec<String>,
    /// Target cluster label of every row.
    pub row_labels: Vec<usize>,
    /// Rows with a span that no canonical value covers; encoded as `none`.
    #[serde(default)]
    pub flagged: Vec<String>,
}

impl FeatureMatrix {
    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(Column::name).collect()
    }

    /// Column indices belonging to `class`.
    pub fn class_columns(&self, class: &str) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.class == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn classes(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        for c in &self.columns {
            if v.last() != Some(&c.class.as_str()) && !v.contains(&c.class.as_str()) {
                v.push(&c.class);
            }
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_id,label");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(&c.name()));
        }
        out.push('\n');
        for ((id, label), row) in self.row_ids.iter().zip(&self.row_labels).zip(&self.rows) {
            out.push_str(&csv_field(id));
            out.push(',');
            out.push_str(&label.to_string());
            for v in row {
                out.push(',');
                out.push(if *v == 0 { '0' } else { '1' });
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Input row for [`build_feature_matrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSpans {
    pub row_id: String,
    pub label: usize,
    pub spans: BTreeMap<String, Option<String>>,
}

/// One column per (class, value) pair in `value_sets` order; each row has
/// exactly one set column per class.
pub fn build_feature_matrix(node_name: &str, rows: &[LabeledSpans], value_sets: &[FeatureValueSet]) -> FeatureMatrix {
    let columns: Vec<Column> = value_sets
        .iter()
        .flat_map(|vs| {
            vs.values.iter().map(move |v| Column {
                class: vs.class.clone(),
                value: v.clone(),
            })
        })
        .collect();
    let mut flagged = BTreeSet::new();
    let mut out_rows = Vec::with_capacity(rows.len());
    for r in rows {
        let mut bits = vec![0u8; columns.len()];
        let mut offset = 0;
        for vs in value_sets {
            let span = r.spans.get(&vs.class).and_then(|s| s.as_deref());
            let value = match vs.value_of(span) {
                Some(v) => v,
                None => {
                    flagged.insert(r.row_id.clone());
                    NONE_VALUE
                }
            };
            let pos = vs.values.iter().position(|v| v == value).unwrap_or(vs.values.len() - 1);
            bits[offset + pos] = 1;
            offset += vs.values.len();
        }
        out_rows.push(bits);
    }
    FeatureMatrix {
        node_name: node_name.to_string(),
        columns,
        rows: out_rows,
        row_ids: rows.iter().map(|r| r.row_id.clone()).collect(),
        row_labels: rows.iter().map(|r| r.label).collect(),
        flagged: flagged.into_iter().collect(),
    }
}
