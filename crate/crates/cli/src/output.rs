//! Provenance headers and artifact writers. JSON artifacts embed the
//! provenance object; CSV artifacts start with `#` comment lines, which every
//! reader skips.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration (or arguments) the artifact was made from.
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new<C: Serialize>(command: &str, seed: Option<u64>, config: &C) -> Result<Self> {
        Ok(Self {
            tool: "scr".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config)?,
        })
    }

    pub fn csv_header(&self) -> String {
        let seed = self.seed.map(|s| format!(" seed={s}")).unwrap_or_default();
        format!(
            "# {} {} {}{seed}\n# config: {}\n",
            self.tool,
            self.version,
            self.command,
            serde_json::to_string(&self.config).unwrap_or_default()
        )
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes the provenance comment lines followed by whatever `body` produces.
pub fn write_csv_with<F>(path: &Path, prov: &Provenance, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = prov.csv_header().into_bytes();
    body(&mut buf)?;
    std::fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
pub fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// `NA` for undefined values, shortest round-trip text otherwise.
pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}
