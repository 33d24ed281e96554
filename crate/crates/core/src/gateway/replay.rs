//! Record/replay fixtures.
//!
//! One line-delimited JSON file per stage (`distill.jsonl`, `annotate.jsonl`,
//! ...). Each line holds `tag`, `digest` (hex SHA-256 of the prompt),
//! `prompt` and `response`. Lookup goes by `(tag, digest)`; the prompt text is
//! stored only for debugging.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{digest, ChatProvider, ChatRequest, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub tag: Stage,
    pub digest: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FixtureStore {
    entries: BTreeMap<(Stage, String), FixtureEntry>,
}

impl FixtureStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, tag: Stage, prompt: &str, response: &str) {
        let d = digest(prompt);
        self.entries.insert(
            (tag, d.clone()),
            FixtureEntry {
                tag,
                digest: d,
                prompt: prompt.to_string(),
                response: response.to_string(),
            },
        );
    }

    pub fn lookup(&self, tag: Stage, prompt: &str) -> Option<&FixtureEntry> {
        self.entries.get(&(tag, digest(prompt)))
    }

    pub fn entries(&self, tag: Stage) -> impl Iterator<Item = &FixtureEntry> {
        self.entries.values().filter(move |e| e.tag == tag)
    }

    /// Adds the entries of one stage file. The tag inside each line wins.
    pub fn load_lines(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: FixtureEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
                line: i + 1,
                message: format!("fixture line: {err}"),
            })?;
            self.entries.insert((e.tag, e.digest.clone()), e);
        }
        Ok(())
    }

    /// Loads every `<tag>.jsonl` file present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = FixtureStore::default();
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "fixture directory {} does not exist",
                dir.display()
            )));
        }
        for tag in Stage::ALL {
            let p = dir.join(format!("{tag}.jsonl"));
            if p.exists() {
                store.load_lines(&std::fs::read_to_string(&p)?)?;
            }
        }
        Ok(store)
    }

    /// Serialized stage file, entries sorted by digest.
    pub fn stage_file(&self, tag: Stage) -> String {
        let mut out = String::new();
        for e in self.entries(tag) {
            out.push_str(&serde_json::to_string(e).expect("fixture serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes one file per stage into `dir`, merging with entries already there.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut merged = if dir.is_dir() {
            FixtureStore::load_dir(dir)?
        } else {
            FixtureStore::default()
        };
        merged.merge(self);
        for tag in Stage::ALL {
            let body = merged.stage_file(tag);
            std::fs::write(dir.join(format!("{tag}.jsonl")), body)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &FixtureStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

impl ChatProvider for FixtureStore {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let d = digest(&req.prompt);
        self.entries
            .get(&(req.tag, d.clone()))
            .map(|e| e.response.clone())
            .ok_or_else(|| Error::FixtureMissing {
                tag: req.tag.to_string(),
                digest: d,
            })
    }
}
