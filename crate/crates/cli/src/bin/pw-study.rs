// SPDX-License-Identifier: Apache-2.0

//! Library footprint table over a directory of PWOF modules.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use piecewise::loader::SearchPath;
use piecewise::study;
use piecewise_cli::{emit_json, read_object, run, CliError, Common};

#[derive(Parser)]
#[command(name = "pw-study", version, about = "Per-program library footprints")]
struct Cli {
    /// Directory holding executables and libraries (`*.pwof`).
    #[arg(long)]
    corpus: PathBuf,
    /// CSV output path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pw-study", cli.common.json_errors, || {
        let io = |e: std::io::Error| CliError::Io { path: cli.corpus.clone(), message: e.to_string() };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&cli.corpus)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        paths.retain(|p| p.extension().is_some_and(|x| x == "pwof"));
        paths.sort();
        let mut exes = Vec::new();
        for p in &paths {
            let obj = read_object(p)?;
            if obj.is_executable {
                exes.push(obj);
            }
        }
        let table = study::footprint(&exes, &SearchPath(vec![cli.corpus.clone()]));
        let mut buf = Vec::new();
        study::write_csv(&table, &mut buf).map_err(|e| CliError::failed("csv", e))?;
        match &cli.out {
            Some(p) => piecewise_cli::write_bytes(p, &buf)?,
            None => print!("{}", String::from_utf8_lossy(&buf)),
        }
        if let Some(j) = &cli.json {
            emit_json(&table, Some(j))?;
        }
        Ok(())
    })
}
