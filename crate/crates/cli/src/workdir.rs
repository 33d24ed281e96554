use std::fmt;
use std::path::{Path, PathBuf};

use amap::pipeline::{Envelope, PipelineConfig};
use amap::TOOL_VERSION;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(amap::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.root() {
                amap::Error::InvalidArgument(_) | amap::Error::Toml(_) => 1,
                _ if e.is_gateway() => 3,
                _ => 2,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<amap::Error> for CliError {
    fn from(e: amap::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: &Path) -> Self {
        Workdir { root: root.to_path_buf() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, content: &str) -> CliResult<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, content)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(amap::Error::from)?;
        s.push('\n');
        self.write(name, &s)
    }

    pub fn write_artifact<T: Serialize>(&self, stage: &str, cfg: &PipelineConfig, body: &T) -> CliResult<()> {
        self.write(&format!("{stage}.json"), &Envelope::new(stage, cfg, body).to_json())
    }

    /// Loads a predecessor artifact and checks that it was produced with `cfg`.
    pub fn read_artifact<T: DeserializeOwned>(&self, stage: &str, cfg: &PipelineConfig) -> CliResult<T> {
        let p = self.path(&format!("{stage}.json"));
        let text = std::fs::read_to_string(&p).map_err(|_| {
            CliError::Usage(format!(
                "missing artifact {}: run `mentor {stage}` first",
                p.display()
            ))
        })?;
        let env: Envelope<T> = serde_json::from_str(&text).map_err(amap::Error::from)?;
        let digest = cfg.digest();
        if env.config_digest != digest || env.tool_version != TOOL_VERSION {
            return Err(CliError::Usage(format!(
                "stale artifact {}: produced with config {} (tool {}), current config is {} (tool {}); re-run `mentor {stage}`",
                p.display(),
                short(&env.config_digest),
                env.tool_version,
                short(&digest),
                TOOL_VERSION
            )));
        }
        Ok(env.body)
    }
}

fn short(d: &str) -> &str {
    &d[..d.len().min(12)]
}
