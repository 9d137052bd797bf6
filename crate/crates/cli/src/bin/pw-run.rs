// SPDX-License-Identifier: Apache-2.0

//! Runs an executable's workloads in the reference interpreter.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use piecewise::loader::{load, LoadOptions};
use piecewise::vm::{self, Outcome, Trace, DEFAULT_STEP_LIMIT};
use piecewise_cli::{emit_json, read_object, run, CliError, Common, PathArgs};

#[derive(Parser)]
#[command(name = "pw-run", version, about = "Execute the entry and trained dlsym workloads")]
struct Cli {
    exe: PathBuf,
    #[command(flatten)]
    paths: PathArgs,
    /// Debloat before running; entering removed code traps.
    #[arg(long)]
    debloated: bool,
    #[arg(long, default_value_t = DEFAULT_STEP_LIMIT)]
    step_limit: u64,
    /// Write traces here instead of stdout.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct Run {
    module: String,
    entry: String,
    trace: Trace,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pw-run", cli.common.json_errors, || {
        let exe = read_object(&cli.exe)?;
        let source = cli.paths.search_path(&cli.exe);
        let loaded = load(&exe, &source, &LoadOptions { debloat: cli.debloated, ..LoadOptions::default() })?;
        let mut runs = Vec::new();
        for w in vm::workloads(&loaded.image, &loaded.bindings) {
            let trace = if cli.debloated {
                vm::execute_debloated(&loaded.image, &loaded.bindings, &w, cli.step_limit)
            } else {
                vm::execute(&loaded.image, &loaded.bindings, &w, cli.step_limit)
            }
            .map_err(|e| CliError::failed("vm", e))?;
            runs.push(Run { module: loaded.image.modules[w.module].name().to_string(), entry: w.symbol, trace });
        }
        emit_json(&runs, cli.trace.as_deref())?;
        let trapped = runs.iter().filter(|r| matches!(r.trace.outcome, Outcome::Trapped { .. })).count();
        if trapped > 0 {
            return Err(CliError::failed("trapped", format!("{trapped} workload(s) trapped")));
        }
        Ok(())
    })
}
