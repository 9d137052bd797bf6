// SPDX-License-Identifier: Apache-2.0

//! Plumbing shared by the command-line tools.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Args;
use serde::Serialize;

use piecewise::depgraph::Strategy;
use piecewise::loader::{self, SearchPath};
use piecewise::pwof::{read_module, ObjectFile, TrainingRecord};

/// Default search path list, separated like `PATH`.
pub const PATH_ENV: &str = "PW_PATH";

#[derive(Debug)]
pub enum CliError {
    /// Missing or unreadable input, unwritable output.
    Io { path: PathBuf, message: String },
    MalformedTrace { line: usize, message: String },
    Usage(String),
    /// Any other pipeline failure.
    Failed { kind: &'static str, message: String },
}

impl CliError {
    pub fn failed(kind: &'static str, e: impl Display) -> Self {
        CliError::Failed { kind, message: e.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Usage(_) => 2,
            CliError::MalformedTrace { .. } | CliError::Failed { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::MalformedTrace { .. } => "malformed_trace",
            CliError::Usage(_) => "usage",
            CliError::Failed { kind, .. } => kind,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() })
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::MalformedTrace { line, message } => write!(f, "malformed trace, line {line}: {message}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Failed { message, .. } => write!(f, "{message}"),
        }
    }
}

impl From<loader::LoadError> for CliError {
    fn from(e: loader::LoadError) -> Self {
        match e {
            loader::LoadError::Io { path, source } => CliError::Io { path, message: source.to_string() },
            e => CliError::failed("load", e),
        }
    }
}

/// Flags every tool accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Print errors to stderr as a JSON object.
    #[arg(long, global = true)]
    pub json_errors: bool,
}

/// Module search directories. Falls back to `PW_PATH`.
#[derive(Debug, Clone, Args)]
pub struct PathArgs {
    /// Directory to search for needed modules (repeatable).
    #[arg(long = "path", value_name = "DIR")]
    pub paths: Vec<PathBuf>,
}

impl PathArgs {
    /// Explicit paths, else `PW_PATH`, else the executable's directory.
    pub fn search_path(&self, exe: &Path) -> SearchPath {
        let mut dirs = self.paths.clone();
        if dirs.is_empty() {
            if let Some(v) = std::env::var_os(PATH_ENV) {
                dirs.extend(std::env::split_paths(&v).filter(|p| !p.as_os_str().is_empty()));
            }
        }
        if dirs.is_empty() {
            dirs.push(exe.parent().map(Path::to_path_buf).unwrap_or_default());
        }
        SearchPath(dirs)
    }
}

pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

pub fn parse_page_size(s: &str) -> Result<u64, String> {
    let n: u64 = s.parse().map_err(|e| format!("{e}"))?;
    if n == 0 || !n.is_power_of_two() {
        return Err(format!("page size {n} is not a positive power of two"));
    }
    Ok(n)
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), message: e.to_string() })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io { path: path.to_path_buf(), message: e.to_string() })
}

pub fn read_object(path: &Path) -> Result<ObjectFile, CliError> {
    let bytes = read_bytes(path)?;
    read_module(&bytes).map_err(|e| CliError::failed("format", format!("{}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io { path: path.to_path_buf(), message: e.to_string() })
}

/// Pretty JSON to `path`, or stdout when `None`.
pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::failed("json", e))?;
    text.push('\n');
    match path {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses a training trace: `dlopen <module>` and `dlsym <module> <symbol>`
/// lines, blank lines and `#` comments. A `dlsym` must follow a `dlopen`
/// of its module, in this trace or in `opened`.
pub fn parse_trace(text: &str, opened: &[TrainingRecord]) -> Result<Vec<TrainingRecord>, CliError> {
    let mut seen: Vec<String> = opened
        .iter()
        .filter(|r| r.kind == piecewise::pwof::TrainingKind::Dlopen)
        .map(|r| r.module.clone())
        .collect();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let words: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
        let bad = |message: String| CliError::MalformedTrace { line, message };
        match words.as_slice() {
            [] => {}
            ["dlopen", m] => {
                seen.push(m.to_string());
                out.push(TrainingRecord::dlopen(*m));
            }
            ["dlsym", m, s] => {
                if !seen.iter().any(|o| o == m) {
                    return Err(bad(format!("dlsym of `{s}` before dlopen of `{m}`")));
                }
                out.push(TrainingRecord::dlsym(*m, *s));
            }
            _ => return Err(bad(format!("expected `dlopen MODULE` or `dlsym MODULE SYMBOL`, got `{}`", raw.trim()))),
        }
    }
    Ok(out)
}

/// Runs a tool body and maps errors to an exit code and a stderr message.
pub fn run(tool: &str, json_errors: bool, body: impl FnOnce() -> Result<(), CliError>) -> ExitCode {
    match body() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json_errors {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("{tool}: error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
