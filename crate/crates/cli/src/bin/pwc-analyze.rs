// SPDX-License-Identifier: Apache-2.0

//! Builds and prints the function-level dependency graph of an IR file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use piecewise::depgraph::{build_depgraph, Strategy, TargetKind};
use piecewise::mir::parse_module;
use piecewise::pta::generate_constraints;
use piecewise_cli::{parse_strategy, read_text, run, CliError, Common};

#[derive(Parser)]
#[command(name = "pwc-analyze", version, about = "Print a module's dependency graph")]
struct Cli {
    /// Textual IR file.
    input: PathBuf,
    /// Code-pointer strategy: full, localized or pta.
    #[arg(long, default_value = "localized", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Print the points-to constraints and exit.
    #[arg(long)]
    dump_constraints: bool,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pwc-analyze", cli.common.json_errors, || {
        let module = parse_module(&read_text(&cli.input)?).map_err(|e| CliError::failed("parse", e))?;
        if cli.dump_constraints {
            for c in generate_constraints(&module) {
                println!("{c}");
            }
            return Ok(());
        }
        let graph = build_depgraph(&module, cli.strategy).map_err(|e| CliError::failed("analysis", e))?;
        if cli.json {
            return piecewise_cli::emit_json(&graph, None);
        }
        println!("strategy: {}", graph.strategy);
        println!("edges:");
        for (from, deps) in &graph.edges {
            for d in deps {
                let suffix = if d.kind == TargetKind::Import { " (import)" } else { "" };
                println!("  {from} -> {}{suffix}", d.symbol);
            }
        }
        let list = |s: &std::collections::BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(" ");
        println!("required_globals: {}", list(&graph.required_globals));
        println!("always_retain: {}", list(&graph.always_retain));
        println!("diagnostics:");
        for d in &graph.diagnostics {
            println!("  {d}");
        }
        Ok(())
    })
}
