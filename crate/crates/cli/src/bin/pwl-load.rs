// SPDX-License-Identifier: Apache-2.0

//! Loads an executable with its dependencies and reports what debloating
//! removed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use piecewise::loader::{load, measure_load_time, LoadOptions, DEFAULT_PAGE_SIZE};
use piecewise_cli::{emit_json, parse_page_size, read_object, run, CliError, Common, PathArgs};

#[derive(Parser)]
#[command(name = "pwl-load", version, about = "Load and debloat an executable")]
struct Cli {
    exe: PathBuf,
    #[command(flatten)]
    paths: PathArgs,
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE, value_parser = parse_page_size)]
    page_size: u64,
    /// Load without removing anything.
    #[arg(long)]
    no_debloat: bool,
    /// Print each module's `.dep` strategy; fail if piece-wise modules disagree.
    #[arg(long)]
    strategy_check: bool,
    /// Write the debloat report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also time both loaders over this many repetitions.
    #[arg(long, value_name = "N")]
    time: Option<usize>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pwl-load", cli.common.json_errors, || {
        let exe = read_object(&cli.exe)?;
        let source = cli.paths.search_path(&cli.exe);
        let opts = LoadOptions { page_size: cli.page_size, debloat: !cli.no_debloat };
        let loaded = load(&exe, &source, &opts)?;
        if cli.strategy_check {
            let mut seen = std::collections::BTreeSet::new();
            for m in &loaded.image.modules {
                let s = m.object.dep.as_ref().map(|d| d.strategy.to_string());
                eprintln!("{}: {}", m.name(), s.as_deref().unwrap_or("none"));
                seen.extend(s);
            }
            if seen.len() > 1 {
                return Err(CliError::failed("strategy_check", format!("mixed strategies: {seen:?}")));
            }
        }
        if let Some(retained) = &loaded.retained {
            for d in &retained.diagnostics {
                eprintln!("warning: {d:?}");
            }
        }
        emit_json(&loaded.report, cli.report.as_deref())?;
        if let Some(reps) = cli.time {
            let t = measure_load_time(&exe, &source, reps, cli.page_size)?;
            emit_json(&t, None)?;
        }
        Ok(())
    })
}
