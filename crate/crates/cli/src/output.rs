//! Artifact emission: JSON reports and CSV tables, each embedding the fully
//! resolved configuration and the tool version.

use anyhow::{Context, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// The fully resolved configuration of a run, embedded in every artifact.
#[derive(Debug, Clone, Default)]
pub struct ResolvedConfig {
    pub entries: BTreeMap<String, String>,
}

impl ResolvedConfig {
    pub fn new(subcommand: &str) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("subcommand".into(), subcommand.into());
        entries.insert("tool_version".into(), tool_version().into());
        ResolvedConfig { entries }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!(self.entries)
    }
}

pub fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// CSV with a leading `# {json}` comment carrying the resolved config.
pub struct CsvWriter {
    out: Box<dyn Write>,
}

impl CsvWriter {
    pub fn create(path: Option<&Path>, config: &ResolvedConfig, columns: &[&str]) -> Result<Self> {
        let mut out: Box<dyn Write> = match path {
            Some(p) => Box::new(std::io::BufWriter::new(
                std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(std::io::stdout().lock()),
        };
        writeln!(out, "# {}", serde_json::to_string(&config.to_json())?)?;
        writeln!(out, "{}", columns.join(","))?;
        Ok(CsvWriter { out })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Renders an f64 so the CSV round-trips bit-exactly.
pub fn f64_field(v: f64) -> String {
    // Shortest representation that parses back to the same f64.
    let mut s = format!("{v}");
    if s.parse::<f64>() != Ok(v) {
        s = format!("{v:?}");
    }
    s
}
