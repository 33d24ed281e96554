//! Corrective statements and their injection into node prompts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::AnnotatedCluster;
use crate::error::{Error, Result};
use crate::features::FeatureClass;
use crate::gateway::{ChatRequest, Gateway, Stage};
use crate::ingest::AgentSpec;
use crate::prompts::{self, CorrectiveSections};
use crate::tree::ImportanceReport;

pub const INJECTION_HEADER: &str = "Additional instructions:";
const INJECTION_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveStatement {
    pub node_name: String,
    pub text: String,
    pub source_features: Vec<(String, f64)>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPrompt {
    pub node_name: String,
    pub original: String,
    pub injected: Vec<String>,
    pub rendered: String,
}

/// Everything the judge prompt needs for one node.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionInput<'a> {
    pub node_name: &'a str,
    pub system_prompt: &'a str,
    pub classes: &'a [FeatureClass],
    pub importance: &'a ImportanceReport<f64>,
    pub rules: &'a str,
    pub success: &'a [AnnotatedCluster],
    pub threshold: f64,
}

impl CorrectionInput<'_> {
    /// Feature classes above the threshold, most important first.
    pub fn source_features(&self) -> Vec<(String, f64)> {
        self.importance
            .ranked_classes()
            .into_iter()
            .filter(|(_, v)| *v > self.threshold)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn prompt(&self) -> String {
        let sources = self.source_features();
        let mut features = String::new();
        for (name, _) in &sources {
            let desc = self
                .classes
                .iter()
                .find(|c| &c.name == name)
                .map(|c| c.description.as_str())
                .unwrap_or("");
            let _ = writeln!(features, "- {name}: {desc}");
        }
        let mut importance = String::new();
        for (name, v) in self.importance.ranked_classes() {
            let _ = writeln!(importance, "- {name}: {v:.3}");
        }
        let mut success = String::new();
        for c in self.success {
            let _ = writeln!(success, "- Cluster {}: \"{}\" [{} samples]", c.index, c.annotation, c.size);
            for s in &c.sample_texts {
                let _ = writeln!(success, "  example: {}", s.replace('\n', " "));
            }
        }
        prompts::corrective(&CorrectiveSections {
            system_prompt: self.system_prompt,
            features: &features,
            rules: self.rules,
            importance: &importance,
            success: &success,
        })
    }
}

fn strip_marker(line: &str) -> Option<&str> {
    let t = line.trim();
    for b in ["- ", "* ", "• "] {
        if let Some(r) = t.strip_prefix(b) {
            return Some(r);
        }
    }
    let t2 = t.strip_prefix('(').unwrap_or(t);
    let digits = t2.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t2[digits..];
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            return Some(r);
        }
    }
    None
}

/// Enumerated or bulleted lines with their markers removed.
pub fn parse_statements(completion: &str) -> Vec<String> {
    completion
        .lines()
        .filter_map(strip_marker)
        .map(|s| s.trim().trim_matches('"').trim().trim_matches('*').trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn derive_corrective(input: &CorrectionInput<'_>, gateway: &Gateway) -> Result<Vec<CorrectiveStatement>> {
    let (resp, reference) = gateway.chat_ref(&ChatRequest::new(Stage::Correct, input.prompt()))?;
    if resp.trim().is_empty() {
        log::warn!("no corrective statements for node {}; skipped", input.node_name);
        return Ok(Vec::new());
    }
    let parsed = parse_statements(&resp);
    if parsed.is_empty() {
        return Err(Error::DerivationParse { raw: resp });
    }
    let sources = input.source_features();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for text in parsed {
        if !seen.insert(text.to_lowercase()) {
            log::warn!("duplicate corrective statement dropped: {text}");
            continue;
        }
        out.push(CorrectiveStatement {
            node_name: input.node_name.to_string(),
            text,
            source_features: sources.clone(),
            provenance: reference.clone(),
        });
    }
    Ok(out)
}

/// Original prompt with any injected block removed.
pub fn strip_injection(prompt: &str) -> &str {
    let marker = format!("{INJECTION_SEPARATOR}{INJECTION_HEADER}\n");
    match prompt.rfind(&marker) {
        Some(i) => &prompt[..i],
        None => prompt,
    }
}

fn injected_lines(prompt: &str) -> Vec<String> {
    let marker = format!("{INJECTION_SEPARATOR}{INJECTION_HEADER}\n");
    match prompt.rfind(&marker) {
        Some(i) => parse_statements(&prompt[i + marker.len()..]),
        None => Vec::new(),
    }
}

pub fn render(original: &str, statements: &[String]) -> String {
    if statements.is_empty() {
        return original.to_string();
    }
    let mut out = format!("{original}{INJECTION_SEPARATOR}{INJECTION_HEADER}\n");
    for (i, s) in statements.iter().enumerate() {
        let _ = writeln!(out, "{}. {s}", i + 1);
    }
    out.pop();
    out
}

/// Appends each node's statements to its prompt; statements already present are not repeated.
pub fn inject(spec: &AgentSpec, statements: &BTreeMap<String, Vec<String>>) -> Result<BTreeMap<String, AugmentedPrompt>> {
    if let Some(unknown) = statements.keys().find(|n| !spec.prompts.contains_key(*n)) {
        return Err(Error::UnknownNode(unknown.clone()));
    }
    let mut out = BTreeMap::new();
    for (node, prompt) in &spec.prompts {
        let original = strip_injection(prompt).to_string();
        let mut injected = injected_lines(prompt);
        for s in statements.get(node).into_iter().flatten() {
            let s = s.trim();
            if !s.is_empty() && !injected.iter().any(|e| e == s) {
                injected.push(s.to_string());
            }
        }
        let rendered = render(&original, &injected);
        out.insert(
            node.clone(),
            AugmentedPrompt {
                node_name: node.clone(),
                original: if injected.is_empty() { prompt.clone() } else { original },
                injected,
                rendered,
            },
        );
    }
    Ok(out)
}

/// Spec with every prompt replaced by its rendered form.
pub fn apply(spec: &AgentSpec, augmented: &BTreeMap<String, AugmentedPrompt>) -> AgentSpec {
    let mut s = spec.clone();
    for (node, a) in augmented {
        s.prompts.insert(node.clone(), a.rendered.clone());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatProvider, ScriptedResponder};

    const PROMPT: &str = "Users are generally allowed. Reject users that are unauthorized and untrusted.";

    fn spec() -> AgentSpec {
        AgentSpec {
            user_prompt: "Is Trudy allowed?".into(),
            answer_node: Some("orchestration_agent".into()),
            prompts: [
                ("orchestration_agent".to_string(), PROMPT.to_string()),
                ("untrusted_agent".to_string(), "Check the untrusted list.".to_string()),
            ]
            .into_iter()
            .collect(),
        }
    }

    fn report() -> ImportanceReport<f64> {
        ImportanceReport {
            node_name: "orchestration_agent".into(),
            column_names: vec![],
            column_importances: vec![],
            class_importances: [("refusal mode".to_string(), 0.6), ("politeness tone".to_string(), 0.35), ("subject".to_string(), 0.05)]
                .into_iter()
                .collect(),
            max_class_importance: 0.6,
            uninformative: false,
        }
    }

    struct Fixed(&'static str);
    impl ChatProvider for Fixed {
        fn complete(&self, _: &ChatRequest) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    fn input<'a>(rep: &'a ImportanceReport<f64>, classes: &'a [FeatureClass]) -> CorrectionInput<'a> {
        CorrectionInput {
            node_name: "orchestration_agent",
            system_prompt: PROMPT,
            classes,
            importance: rep,
            rules: "if refusal mode=cannot process present:\n    predict cluster 1",
            success: &[],
            threshold: 0.1,
        }
    }

    #[test]
    fn parser_strips_markers() {
        let got = parse_statements("Here you go:\n1. First.\n2) Second.\n- Third.\n(4) Fourth.\n\n* **Fifth.**");
        assert_eq!(got, ["First.", "Second.", "Third.", "Fourth.", "Fifth."]);
        assert!(parse_statements("no list at all").is_empty());
    }

    #[test]
    fn scripted_judge_yields_the_two_access_statements() {
        let rep = report();
        let classes = vec![FeatureClass { name: "refusal mode".into(), description: "how".into() }];
        let inp = input(&rep, &classes);
        let p = inp.prompt();
        assert!(p.contains("## CURRENT SYSTEM PROMPT:\nUsers are generally allowed."));
        assert!(!prompts::section(&p, prompts::SECTION_FEATURES).unwrap().contains("subject"));
        let st = derive_corrective(&inp, &Gateway::new(ScriptedResponder)).unwrap();
        let texts: Vec<&str> = st.iter().map(|s| s.text.as_str()).collect();
        assert!(texts.contains(&"Only allow a user if they are NOT both unauthorized AND untrusted."));
        assert!(texts.contains(&"If either condition (unauthorized or untrusted) is true, refuse the request."));
        for s in &st {
            assert!(s.provenance.starts_with("correct:"));
            assert!(s.source_features.iter().all(|(_, v)| *v > 0.1));
        }
    }

    #[test]
    fn duplicates_empty_and_unparseable() {
        let rep = report();
        let dup = Gateway::new(Fixed("1. Refuse untrusted users.\n2. Refuse untrusted users."));
        assert_eq!(derive_corrective(&input(&rep, &[]), &dup).unwrap().len(), 1);
        let empty = Gateway::new(Fixed("   "));
        assert!(derive_corrective(&input(&rep, &[]), &empty).unwrap().is_empty());
        let prose = Gateway::new(Fixed("The prompt is fine."));
        assert!(matches!(
            derive_corrective(&input(&rep, &[]), &prose),
            Err(Error::DerivationParse { .. })
        ));
    }

    #[test]
    fn injection_contract() {
        let s = spec();
        let none = inject(&s, &BTreeMap::new()).unwrap();
        assert_eq!(none["orchestration_agent"].rendered, PROMPT);

        let st: BTreeMap<String, Vec<String>> = [(
            "orchestration_agent".to_string(),
            vec!["Only allow A.".to_string(), "Refuse B.".to_string()],
        )]
        .into_iter()
        .collect();
        let aug = inject(&s, &st).unwrap();
        let r = &aug["orchestration_agent"].rendered;
        assert!(r.starts_with(PROMPT));
        assert_eq!(r, &format!("{PROMPT}\n\nAdditional instructions:\n1. Only allow A.\n2. Refuse B."));
        assert_eq!(aug["untrusted_agent"].rendered, "Check the untrusted list.");
        assert_eq!(strip_injection(r), PROMPT);

        let again = inject(&apply(&s, &aug), &st).unwrap();
        assert_eq!(&again["orchestration_agent"].rendered, r);

        let bad: BTreeMap<String, Vec<String>> = [("ghost".to_string(), vec!["x".to_string()])].into_iter().collect();
        assert!(matches!(inject(&s, &bad), Err(Error::UnknownNode(n)) if n == "ghost"));
    }
}
