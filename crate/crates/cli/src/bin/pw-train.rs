// SPDX-License-Identifier: Apache-2.0

//! Embeds dlopen/dlsym training records into an executable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use piecewise::pwof::check_training;
use piecewise_cli::{parse_trace, read_object, read_text, run, write_bytes, CliError, Common};

#[derive(Parser)]
#[command(name = "pw-train", version, about = "Append training records to an executable")]
struct Cli {
    /// Trace of `dlopen MODULE` and `dlsym MODULE SYMBOL` lines.
    trace: PathBuf,
    /// Executable to update.
    exe: PathBuf,
    /// Output path; defaults to rewriting the executable in place.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pw-train", cli.common.json_errors, || {
        let text = read_text(&cli.trace)?;
        let mut obj = read_object(&cli.exe)?;
        if !obj.is_executable {
            return Err(CliError::Usage(format!("{} is not an executable", cli.exe.display())));
        }
        let records = parse_trace(&text, &obj.training)?;
        for r in records {
            if !obj.training.contains(&r) {
                obj.training.push(r);
            }
        }
        check_training(&obj.training).map_err(|e| CliError::failed("format", e))?;
        write_bytes(cli.output.as_ref().unwrap_or(&cli.exe), &obj.to_bytes())?;
        eprintln!("{} training records", obj.training.len());
        Ok(())
    })
}
