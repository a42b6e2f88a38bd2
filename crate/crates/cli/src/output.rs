//! Error reporting and artifact writing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug)]
pub enum CliError {
    Core(whiteout::Error),
    Usage(String),
    Config { path: PathBuf, msg: String },
    Write { path: PathBuf, source: std::io::Error },
}

impl From<whiteout::Error> for CliError {
    fn from(e: whiteout::Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Config { path, msg } => write!(f, "{}: {msg}", path.display()),
            CliError::Write { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Write { .. } => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "message": self.to_string() });
        let kind = match self {
            CliError::Core(e) => {
                if let whiteout::Error::Parse { path, row, .. } = e {
                    v["path"] = json!(path);
                    v["row"] = json!(row);
                }
                if let whiteout::Error::Io { path, .. } = e {
                    v["path"] = json!(path);
                }
                e.kind()
            }
            CliError::Usage(_) => "usage",
            CliError::Config { path, .. } => {
                v["path"] = json!(path.display().to_string());
                "config"
            }
            CliError::Write { path, .. } => {
                v["path"] = json!(path.display().to_string());
                "write"
            }
        };
        v["error"] = json!(kind);
        v
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Everything a subcommand produces. Nothing touches the disk until the
/// whole computation has succeeded.
pub struct Artifacts {
    pub summary: Value,
    pub summary_name: &'static str,
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn new(summary_name: &'static str, summary: impl Serialize) -> CliResult<Self> {
        let summary = serde_json::to_value(summary).map_err(|e| CliError::Usage(format!("serializing summary: {e}")))?;
        Ok(Self { summary, summary_name, files: Vec::new() })
    }

    pub fn csv(&mut self, name: impl Into<String>, header: &[&str], rows: &[Vec<String>]) {
        self.files.push((name.into(), whiteout::io::render_csv(header, rows)));
    }

    pub fn summary_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("JSON values serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Write { path, source }
        };
        fs::create_dir_all(dir).map_err(err(dir))?;
        let summary = dir.join(self.summary_name);
        fs::write(&summary, self.summary_text()).map_err(err(&summary))?;
        for (name, body) in &self.files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(err(&path))?;
        }
        Ok(())
    }
}

pub fn num(x: f64) -> String {
    whiteout::io::fmt_f64(x)
}

/// File-name tag for one α, e.g. `alpha-0.1`.
pub fn alpha_tag(alpha: f64) -> String {
    format!("alpha-{}", num(alpha))
}
