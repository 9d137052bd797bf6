// SPDX-License-Identifier: Apache-2.0

//! Compiles an IR file to a PWOF object.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use piecewise::depgraph::Strategy;
use piecewise::mir::parse_module;
use piecewise::compile_module;
use piecewise_cli::{parse_strategy, read_text, run, write_bytes, CliError, Common};

#[derive(Parser)]
#[command(name = "pwc-link", version, about = "Compile IR to a PWOF module")]
struct Cli {
    /// Textual IR file.
    input: PathBuf,
    /// Output path.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value = "localized", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Omit the `.dep` section.
    #[arg(long)]
    no_dep: bool,
    /// Mark the module executable with this entry function.
    #[arg(long, value_name = "FUNCTION")]
    entry: Option<String>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pwc-link", cli.common.json_errors, || {
        let mut module = parse_module(&read_text(&cli.input)?).map_err(|e| CliError::failed("parse", e))?;
        if let Some(entry) = &cli.entry {
            if module.function(entry).is_none() {
                return Err(CliError::Usage(format!("no function `{entry}` in module `{}`", module.name)));
            }
            module.is_executable = true;
            for f in &mut module.functions {
                f.entry = &f.name == entry;
            }
            module.validate().map_err(|e| CliError::failed("parse", e))?;
        }
        let strategy = (!cli.no_dep).then_some(cli.strategy);
        let obj = compile_module(&module, strategy, Vec::new()).map_err(|e| CliError::failed("compile", e))?;
        write_bytes(&cli.output, &obj.to_bytes())
    })
}
