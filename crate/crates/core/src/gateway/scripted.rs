//! Offline rule-based responder for the bundled access-control scenario.
//!
//! It reads the structured prompts built in [`crate::prompts`] and answers
//! each stage with keyword rules over the access-control vocabulary. The
//! shipped replay fixtures were recorded from it, and it lets the closed loop
//! run for arbitrary seeds without a network connection.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::prompts;

use super::{ChatProvider, ChatRequest, Stage};

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedResponder;

impl ChatProvider for ScriptedResponder {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let p = req.prompt.as_str();
        Ok(match req.tag {
            Stage::Distill => distill(after(p, prompts::LOG_MARKER).unwrap_or(p)),
            Stage::Annotate => annotate(&response_blocks(p)),
            Stage::Elicit => elicit(&trace_lines(p)),
            Stage::Extract => extract(p),
            Stage::LabelValues => label_values(p),
            Stage::Correct => correct(p),
        })
    }
}

fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.find(marker).map(|i| &text[i + marker.len()..])
}

const MARKUP: &[char] = &['*', '{', '}', '[', ']', '#', '`', '_', '\\', '|', '<', '>'];

fn clean(text: &str) -> String {
    let text = text.replace("\\n", " ");
    let stripped: String = text
        .chars()
        .filter(|&c| c != '"')
        .map(|c| if MARKUP.contains(&c) { ' ' } else { c })
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First sentence of the markup-free text.
fn distill(raw: &str) -> String {
    let text = clean(raw);
    if text.is_empty() {
        return String::new();
    }
    let bytes = text.as_bytes();
    let mut end = text.len();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            end = i + 1;
            break;
        }
    }
    let mut s = text[..end].trim().to_string();
    if !s.ends_with(['.', '!', '?']) {
        s.push('.');
    }
    s
}

fn response_blocks(p: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Option<String> = None;
    for line in p.lines() {
        if line.starts_with(prompts::RESPONSE_MARKER) && line.ends_with(':') {
            if let Some(c) = cur.take() {
                out.push(c);
            }
            cur = Some(String::new());
        } else if let Some(c) = cur.as_mut() {
            if !c.is_empty() {
                c.push('\n');
            }
            c.push_str(line);
        }
    }
    out.extend(cur);
    out.into_iter().map(|s| s.trim().to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Outcome {
    Allow,
    ApologyRefusal,
    Refusal,
    Other,
}

fn has_any(text: &str, cues: &[&str]) -> bool {
    let t = text.to_lowercase();
    cues.iter().any(|c| t.contains(c))
}

fn outcome(text: &str) -> Outcome {
    let allow = has_any(
        text,
        &["is allowed", "access granted", "allowed to proceed", "allowed access", "may proceed"],
    );
    let refusal = has_any(
        text,
        &["cannot process", "declined", "refused", "denied", "rejected", "refuse"],
    );
    let apology = has_any(text, &["sorry", "apolog"]);
    if allow {
        Outcome::Allow
    } else if refusal && apology {
        Outcome::ApologyRefusal
    } else if refusal {
        Outcome::Refusal
    } else {
        Outcome::Other
    }
}

fn annotate(samples: &[String]) -> String {
    let mut counts: BTreeMap<Outcome, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(outcome(s)).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let top = counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(o, _)| o)
        .unwrap_or(Outcome::Other);
    match top {
        Outcome::Allow => "Allow unless both unauthorized and untrusted",
        Outcome::ApologyRefusal => "Apology and refusal",
        Outcome::Refusal => "Refusal",
        Outcome::Other => "Prompting user to ask questions",
    }
    .to_string()
}

fn trace_lines(p: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = p;
    while let Some(body) = after(rest, prompts::TRACE_MARKER) {
        let line = body.lines().next().unwrap_or("");
        out.push(line.to_string());
        rest = body;
    }
    out
}

struct ClassRule {
    name: &'static str,
    description: &'static str,
    patterns: &'static [&'static str],
}

const CATALOG: &[ClassRule] = &[
    ClassRule {
        name: "subject",
        description: "Who carries out the action, such as the assistant, the speaker, or a named user.",
        patterns: &["i'm", "i ", "the user trudy", "trudy", "the request", "access"],
    },
    ClassRule {
        name: "action",
        description: "The main verb phrase of the sentence, for example allows, declines, cannot process, or is on a list.",
        patterns: &[
            "is allowed to proceed",
            "is allowed",
            "granted",
            "cannot process",
            "is declined",
            "refused",
            "is not on",
            "is on",
        ],
    },
    ClassRule {
        name: "object",
        description: "What the action is applied to, such as the request, access, or a user list.",
        patterns: &[
            "this request",
            "the request",
            "access",
            "the service",
            "the unauthorized users list",
            "the untrusted users list",
        ],
    },
    ClassRule {
        name: "politeness tone",
        description: "Courtesy markers such as an apology or a polite phrasing.",
        patterns: &["i'm sorry", "sorry", "apologies", "politely"],
    },
    ClassRule {
        name: "refusal mode",
        description: "How a refusal is worded, for instance cannot process, declined, refused, or rejected.",
        patterns: &["cannot process", "is declined", "declined", "refused", "rejected", "cannot be permitted"],
    },
    ClassRule {
        name: "permission status",
        description: "Whether permission was granted or withheld, worded as allowed, granted, denied, or declined.",
        patterns: &["access granted", "is allowed", "allowed", "denied", "declined", "refused"],
    },
    ClassRule {
        name: "list status",
        description: "Membership of the user in the policy lists, such as untrusted, unauthorized, or both.",
        patterns: &[
            "both unauthorized and untrusted",
            "not on the unauthorized",
            "on the untrusted",
            "untrusted",
            "unauthorized",
        ],
    },
    ClassRule {
        name: "condition expression",
        description: "The clause giving the rule or reason behind the decision, introduced by words like because, only when, or even when.",
        patterns: &[],
    },
];

const CONDITION_MARKERS: &[&str] = &["because ", "only when ", "even when ", "unless ", "since "];

/// Earliest match of any pattern; longer pattern wins at equal position.
fn earliest<'a>(text: &'a str, patterns: &[&str]) -> Option<&'a str> {
    let lower = text.to_ascii_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for p in patterns {
        let mut from = 0;
        while let Some(off) = lower[from..].find(p) {
            let pos = from + off;
            let word_start = pos == 0 || !lower.as_bytes()[pos - 1].is_ascii_alphanumeric();
            if word_start {
                let cand = (pos, p.len());
                best = match best {
                    Some((bp, bl)) if bp < pos || (bp == pos && bl >= p.len()) => Some((bp, bl)),
                    _ => Some(cand),
                };
                break;
            }
            from = pos + 1;
        }
    }
    best.map(|(pos, len)| text[pos..pos + len].trim())
}

fn condition_span(text: &str) -> Option<&str> {
    let lower = text.to_ascii_lowercase();
    let pos = CONDITION_MARKERS
        .iter()
        .filter_map(|m| lower.find(m))
        .min()?;
    let rest = &text[pos..];
    let end = rest.find(['.', '!', '?', ';']).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn span_for(class: &str, text: &str) -> Option<String> {
    if class == "condition expression" {
        return condition_span(text).map(str::to_string);
    }
    if class == "user identifier" {
        return text
            .split(|c: char| !c.is_ascii_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .skip(1)
            .find(|w| w.chars().next().is_some_and(|c| c.is_ascii_uppercase()) && !w.starts_with("I'") && *w != "I")
            .map(str::to_string);
    }
    let rule = CATALOG.iter().find(|r| r.name == class)?;
    earliest(text, rule.patterns).map(str::to_string)
}

fn elicit(texts: &[String]) -> String {
    let mut obj = serde_json::Map::new();
    for rule in CATALOG {
        if texts.iter().any(|t| span_for(rule.name, t).is_some()) {
            obj.insert(rule.name.to_string(), rule.description.into());
        }
    }
    if texts.iter().any(|t| span_for("user identifier", t).is_some()) {
        obj.insert(
            "user identifier".into(),
            "The name of the user the text talks about.".into(),
        );
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json")
}

fn extract(p: &str) -> String {
    let classes: Vec<&str> = after(p, prompts::CLASSES_MARKER)
        .map(|body| {
            body.lines()
                .take_while(|l| l.starts_with("- "))
                .filter_map(|l| l[2..].split_once(": ").map(|(n, _)| n))
                .collect()
        })
        .unwrap_or_default();
    let text = after(p, prompts::TEXT_MARKER).unwrap_or("");
    let mut obj = serde_json::Map::new();
    for c in classes {
        let v = match span_for(c, text) {
            Some(s) => serde_json::Value::String(s),
            None => serde_json::Value::Null,
        };
        obj.insert(c.to_string(), v);
    }
    serde_json::to_string(&serde_json::Value::Object(obj)).expect("json")
}

fn label_values(p: &str) -> String {
    let spans: Vec<&str> = after(p, prompts::VALUES_MARKER)
        .map(|b| b.lines().filter_map(|l| l.strip_prefix("- ")).collect())
        .unwrap_or_default();
    spans
        .into_iter()
        .min_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)))
        .unwrap_or("value")
        .to_string()
}

fn correct(p: &str) -> String {
    let features = prompts::section(p, prompts::SECTION_FEATURES).unwrap_or("");
    let decision = ["refusal mode", "condition expression", "permission status", "action", "list status"]
        .iter()
        .any(|c| features.contains(c));
    if !decision {
        return "1. Keep answers consistent with the success cluster.".into();
    }
    let mut out = vec![
        "Only allow a user if they are NOT both unauthorized AND untrusted.",
        "If either condition (unauthorized or untrusted) is true, refuse the request.",
    ];
    if features.contains("politeness tone") {
        out.push("When refusing, apologize briefly and name the list check that failed.");
    }
    out.iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}
