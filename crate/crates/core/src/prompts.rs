//! Prompt templates for the analytic chat calls.
//!
//! The scripted responder and the replay fixtures depend on the exact text
//! produced here; any change invalidates recorded fixtures.

use std::fmt::Write as _;

pub const LOG_MARKER: &str = "LOG:\n";
pub const RESPONSE_MARKER: &str = "Response ";
pub const TRACE_MARKER: &str = "Trace:\n";
pub const CLASSES_MARKER: &str = "FEATURE CLASSES:\n";
pub const TEXT_MARKER: &str = "\nTEXT:\n";
pub const VALUES_MARKER: &str = "VALUES:\n";
pub const VALUE_CLASS_MARKER: &str = "feature class \"";

pub fn distill(text: &str) -> String {
    format!(
        "Summarize this log entry into one concise English sentence describing the action.\n\
         Focus on the VERB (action) and the OBJECT (target).\n\
         {LOG_MARKER}{text}"
    )
}

pub fn annotate(samples: &[&str]) -> String {
    let mut p = String::from(
        "Write one short label (at most six words) that captures what the following agent \
         responses have in common. Answer with the label only.\n",
    );
    for (i, s) in samples.iter().enumerate() {
        let _ = write!(p, "\n{RESPONSE_MARKER}{}:\n{s}\n", i + 1);
    }
    p
}

const ELICIT_BASE: &str = " \nYour task is to elicit a list of semantic \"features\" that capture the core meaning structure of these texts.

A feature here means a semantic class that can be instantiated by different spans in different sentences, such as:

Subject / \"Who?\"
Action / \"What did they do?\"
Object / \"What was acted on?\"
Reason / \"Why?\"
Etc.

Each feature should:
Correspond to a meaningful part of the sentence (e.g., S-V-O roles, clauses, EDUs, causes, results, conditions).

Please focus on features that will differentiate between the following clusters:
    ";

const ELICIT_INSTRUCTION: &str = "\nOutput as JSON containing the of feature definitions.\n\
Ensure descriptions emphasize text values and forbid numbers.";

/// Feature elicitation prompt; `clusters` pairs each cluster id with its sampled texts.
pub fn elicit(clusters: &[(usize, Vec<&str>)]) -> String {
    let mut examples = String::new();
    for (id, texts) in clusters {
        let _ = write!(examples, "\n--- Cluster {id} Example ---\n");
        for t in texts {
            let _ = writeln!(examples, "{TRACE_MARKER}{t}");
        }
    }
    format!("{ELICIT_BASE}\n{examples}\n{ELICIT_INSTRUCTION}")
}

pub fn extract(text: &str, classes: &[(&str, &str)]) -> String {
    let mut p = String::from(
        "For each semantic feature class below, copy the span of the TEXT that instantiates it.\n\
         Answer with one JSON object whose keys are exactly the feature class names; \
         use null when the feature is absent.\n\n",
    );
    p.push_str(CLASSES_MARKER);
    for (name, desc) in classes {
        let _ = writeln!(p, "- {name}: {desc}");
    }
    let _ = write!(p, "{TEXT_MARKER}{text}");
    p
}

pub fn label_values(class: &str, description: &str, spans: &[&str]) -> String {
    let mut p = format!(
        "The following spans all instantiate the {VALUE_CLASS_MARKER}{class}\" ({description}).\n\
         Give one short descriptive label (one to three words) for the value they share. \
         Answer with the label only.\n\n{VALUES_MARKER}"
    );
    for s in spans {
        let _ = writeln!(p, "- {s}");
    }
    p
}

pub const SECTION_PROMPT: &str = "## CURRENT SYSTEM PROMPT:";
pub const SECTION_FEATURES: &str = "## DISCOVERED SEMANTIC FEATURES:";
pub const SECTION_RULES: &str = "## DECISION TREE RULES:";
pub const SECTION_IMPORTANCE: &str = "## FEATURE IMPORTANCE:";
pub const SECTION_SUCCESS: &str = "## SUCCESS CLUSTER:";

const CORRECT_HEADER: &str = "You are an expert system prompt engineer analyzing agent execution patterns.

You have access to:
1. **The current system prompt** being evaluated
2. **Semantic features** extracted from agent traces (Subject, Verb, Object, Filter, etc.)
3. **Decision tree analysis** showing which features differentiate successful from failed traces
4. **Feature importance** scores

Your task is to recommend system prompt improvements that would guide agents toward success patterns.
";

const CORRECT_CONTRACT: &str = "Respond with an enumerated list of corrective statements to add to the system prompt, \
one imperative sentence per line, and nothing else.";

pub struct CorrectiveSections<'a> {
    pub system_prompt: &'a str,
    pub features: &'a str,
    pub rules: &'a str,
    pub importance: &'a str,
    pub success: &'a str,
}

pub fn corrective(s: &CorrectiveSections<'_>) -> String {
    format!(
        "{CORRECT_HEADER}\n{SECTION_PROMPT}\n{}\n{SECTION_FEATURES}\n{}\n{SECTION_RULES}\n{}\n{SECTION_IMPORTANCE}\n{}\n{SECTION_SUCCESS}\n{}\n\n{CORRECT_CONTRACT}",
        s.system_prompt.trim_end(),
        s.features.trim_end(),
        s.rules.trim_end(),
        s.importance.trim_end(),
        s.success.trim_end(),
    )
}

/// Text of the section starting at `header`, up to the next `## ` header or blank-line contract.
pub fn section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find("\n## ").or_else(|| rest.find("\n\n")).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distill_prompt_substitutes_text() {
        let p = distill("raw {entry}");
        assert!(p.starts_with("Summarize this log entry into one concise English sentence"));
        assert!(p.ends_with("LOG:\nraw {entry}"));
    }

    #[test]
    fn elicit_prompt_lists_clusters() {
        let p = elicit(&[(0, vec!["a"]), (1, vec!["b", "c"])]);
        assert!(p.contains("--- Cluster 0 Example ---\nTrace:\na\n"));
        assert!(p.contains("--- Cluster 1 Example ---\nTrace:\nb\nTrace:\nc\n"));
        assert!(p.ends_with("forbid numbers."));
    }

    #[test]
    fn corrective_sections_are_recoverable() {
        let p = corrective(&CorrectiveSections {
            system_prompt: "Be nice.",
            features: "- tone: how polite",
            rules: "if tone=polite present:\n    predict cluster 1",
            importance: "- tone: 1.000",
            success: "- Cluster 1: \"Polite\" [3 samples]",
        });
        assert_eq!(section(&p, SECTION_PROMPT), Some("Be nice."));
        assert_eq!(section(&p, SECTION_IMPORTANCE), Some("- tone: 1.000"));
        assert!(section(&p, SECTION_RULES).unwrap().contains("predict cluster 1"));
    }
}
