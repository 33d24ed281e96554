use std::path::PathBuf;

use amap::gateway::{FixtureStore, Gateway, OpenAiCompatible, RemoteConfig, ScriptedResponder, ENV_CHAT_MODEL};
use amap::pipeline::PipelineConfig;
use clap::{Args, ValueEnum};

use crate::workdir::{CliError, CliResult};

/// Replay fixtures recorded for the bundled access-control scenario.
const BUNDLED: [&str; 6] = [
    include_str!("../fixtures/access-control/distill.jsonl"),
    include_str!("../fixtures/access-control/annotate.jsonl"),
    include_str!("../fixtures/access-control/elicit.jsonl"),
    include_str!("../fixtures/access-control/extract.jsonl"),
    include_str!("../fixtures/access-control/label-values.jsonl"),
    include_str!("../fixtures/access-control/correct.jsonl"),
];

pub fn bundled_store() -> amap::Result<FixtureStore> {
    let mut store = FixtureStore::default();
    for text in BUNDLED {
        store.load_lines(text)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Provider {
    /// Fixtures shipped with the binary.
    Bundled,
    /// Fixtures read from `--replay`.
    Replay,
    /// Offline rule-based responder.
    Scripted,
    /// OpenAI-compatible endpoint configured through MENTOR_* variables.
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct GatewayArgs {
    /// Chat backend; defaults to `replay` with --replay, `remote` when MENTOR_CHAT_MODEL is set, else `bundled`.
    #[arg(long, value_enum, global = true)]
    pub provider: Option<Provider>,
    /// Replay fixtures from this directory.
    #[arg(long, value_name = "DIR", global = true)]
    pub replay: Option<PathBuf>,
    /// Record every chat call into fixture files in this directory.
    #[arg(long, value_name = "DIR", global = true)]
    pub record: Option<PathBuf>,
}

impl GatewayArgs {
    fn provider(&self) -> Provider {
        self.provider.unwrap_or_else(|| {
            if self.replay.is_some() {
                Provider::Replay
            } else if std::env::var(ENV_CHAT_MODEL).is_ok_and(|v| !v.trim().is_empty()) {
                Provider::Remote
            } else {
                Provider::Bundled
            }
        })
    }

    pub fn build(&self, cfg: &PipelineConfig) -> CliResult<Gateway> {
        let gw = match self.provider() {
            Provider::Bundled => Gateway::replay(bundled_store()?),
            Provider::Replay => {
                let dir = self
                    .replay
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--provider replay needs --replay <dir>".into()))?;
                Gateway::replay(FixtureStore::load_dir(dir)?)
            }
            Provider::Scripted => Gateway::new(ScriptedResponder),
            Provider::Remote => {
                let rc = RemoteConfig::from_env().ok_or_else(|| {
                    CliError::Usage(format!("--provider remote needs {ENV_CHAT_MODEL} to be set"))
                })?;
                let embeds = rc.embed_model.is_some();
                let client = OpenAiCompatible::new(rc);
                let gw = Gateway::new(client.clone());
                if embeds {
                    gw.with_embedder(client)
                } else {
                    gw
                }
            }
        };
        let gw = gw
            .with_max_in_flight(cfg.max_in_flight)
            .with_params(cfg.temperature, cfg.max_tokens);
        Ok(if self.record.is_some() { gw.recording() } else { gw })
    }

    /// Writes recorded calls, if recording was requested.
    pub fn finish(&self, gw: &Gateway) -> CliResult<()> {
        if let (Some(dir), Some(store)) = (&self.record, gw.recorded()) {
            store.write_dir(dir)?;
            eprintln!("recorded {} fixtures into {}", store.len(), dir.display());
        }
        Ok(())
    }
}
