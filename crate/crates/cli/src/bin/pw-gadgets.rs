// SPDX-License-Identifier: Apache-2.0

//! Counts code-reuse gadgets in modules or in a loaded process image.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use piecewise::gadgets::{self, GadgetReport, DEFAULT_DEPTH};
use piecewise::loader::{load, LoadOptions};
use piecewise_cli::{emit_json, read_object, read_text, run, CliError, Common, PathArgs};

#[derive(Parser)]
#[command(name = "pw-gadgets", version, about = "Scan for gadgets or compare two reports")]
struct Cli {
    /// Modules to scan; their gadgets are merged.
    modules: Vec<PathBuf>,
    /// Scan the process image of this executable instead, after loading.
    #[arg(long, conflicts_with = "diff")]
    exe: Option<PathBuf>,
    /// With --exe: scan the image without debloating.
    #[arg(long, requires = "exe")]
    no_debloat: bool,
    #[command(flatten)]
    paths: PathArgs,
    /// Maximum gadget length in instructions.
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
    /// Compare two reports and print per-class reductions.
    #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
    diff: Option<Vec<PathBuf>>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn read_report(path: &Path) -> Result<GadgetReport, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::failed("json", format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run("pw-gadgets", cli.common.json_errors, || {
        let failed = |e: gadgets::GadgetError| CliError::failed("gadgets", e);
        if let Some(pair) = &cli.diff {
            let d = gadgets::diff(&read_report(&pair[0])?, &read_report(&pair[1])?);
            return emit_json(&d, cli.report.as_deref());
        }
        let report = if let Some(exe_path) = &cli.exe {
            let exe = read_object(exe_path)?;
            let opts = LoadOptions { debloat: !cli.no_debloat, ..LoadOptions::default() };
            let loaded = load(&exe, &cli.paths.search_path(exe_path), &opts)?;
            gadgets::scan_image(&loaded.image, cli.depth).map_err(failed)?
        } else {
            if cli.modules.is_empty() {
                return Err(CliError::Usage("no modules given (use --exe or --diff for other modes)".into()));
            }
            let mut total = GadgetReport { depth: cli.depth, ..GadgetReport::default() };
            for p in &cli.modules {
                let obj = read_object(p)?;
                total.merge(&gadgets::scan(&obj.code, cli.depth, &obj.entry_offsets()).map_err(failed)?);
            }
            total
        };
        emit_json(&report, cli.report.as_deref())
    })
}
