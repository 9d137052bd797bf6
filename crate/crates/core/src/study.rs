// SPDX-License-Identifier: Apache-2.0

//! Library footprint study: how much of each dependent library a program
//! can actually reach.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loader::{self, ModuleSource, RetainedSet};
use crate::mir::INSN_SIZE;
use crate::pwof::ObjectFile;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Direct,
    Transitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub program: String,
    pub library: String,
    pub link: LinkKind,
    /// Functions reachable from the program's own roots.
    pub functions_used: usize,
    pub insns_used: usize,
    /// Retained only because of required globals or asm.
    pub other_functions: usize,
    pub total_functions: usize,
    pub total_insns: usize,
    pub fn_pct: f64,
    pub insn_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub library: String,
    pub programs: usize,
    pub fn_pct: f64,
    pub insn_pct: f64,
    /// Some zero percentage was replaced before averaging.
    pub zero_substituted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFailure {
    pub program: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub rows: Vec<FootprintRow>,
    pub means: Vec<MeanRow>,
    pub failures: Vec<RowFailure>,
}

fn pct(used: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        used as f64 * 100.0 / total as f64
    }
}

/// Geometric mean of percentages. Zeros are replaced by the smallest
/// positive value in `values`; the flag reports whether that happened.
/// All-zero input yields zero.
pub fn geometric_mean(values: &[f64]) -> (f64, bool) {
    if values.is_empty() {
        return (0.0, false);
    }
    let Some(floor) = values.iter().copied().filter(|v| *v > 0.0).reduce(f64::min) else {
        return (0.0, true);
    };
    let mut substituted = false;
    let log_sum: f64 = values
        .iter()
        .map(|&v| {
            if v > 0.0 {
                v.ln()
            } else {
                substituted = true;
                floor.ln()
            }
        })
        .sum();
    let hi = values.iter().copied().fold(floor, f64::max);
    ((log_sum / values.len() as f64).exp().clamp(floor, hi), substituted)
}

fn program_rows(exe: &ObjectFile, source: &dyn ModuleSource) -> Result<Vec<FootprintRow>, loader::LoadError> {
    let image = loader::preload(exe, source, loader::DEFAULT_PAGE_SIZE)?;
    let bindings = loader::resolve(&image)?;
    let own = loader::closure(&image, &bindings, loader::program_roots(&image, &bindings));
    let all = loader::compute_retained(&image, &bindings);
    Ok(image
        .modules
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, m)| {
            let size_of = |set: &RetainedSet| -> (usize, usize) {
                let names = &set.modules[i];
                let insns = m
                    .object
                    .defined_functions()
                    .filter(|s| names.contains_key(&s.name))
                    .map(|s| s.size as usize / INSN_SIZE)
                    .sum();
                (names.len(), insns)
            };
            let (functions_used, insns_used) = size_of(&own);
            let (all_functions, _) = size_of(&all);
            let total_functions = m.object.defined_functions().count();
            let total_insns = m.object.code.len() / INSN_SIZE;
            FootprintRow {
                program: exe.name.clone(),
                library: m.name().to_string(),
                link: if exe.needed.iter().any(|n| n == m.name()) { LinkKind::Direct } else { LinkKind::Transitive },
                functions_used,
                insns_used,
                other_functions: all_functions - functions_used,
                total_functions,
                total_insns,
                fn_pct: pct(functions_used, total_functions),
                insn_pct: pct(insns_used, total_insns),
            }
        })
        .collect())
}

/// Tabulates per-library footprints for each executable. Loader errors
/// become row-level failures.
pub fn footprint(executables: &[ObjectFile], source: &dyn ModuleSource) -> StudyTable {
    let mut table = StudyTable::default();
    for exe in executables {
        match program_rows(exe, source) {
            Ok(rows) => table.rows.extend(rows),
            Err(e) => table.failures.push(RowFailure { program: exe.name.clone(), error: e.to_string() }),
        }
    }
    let mut by_lib: BTreeMap<&str, Vec<&FootprintRow>> = BTreeMap::new();
    for r in &table.rows {
        by_lib.entry(&r.library).or_default().push(r);
    }
    table.means = by_lib
        .into_iter()
        .map(|(lib, rows)| {
            let (fn_pct, a) = geometric_mean(&rows.iter().map(|r| r.fn_pct).collect::<Vec<_>>());
            let (insn_pct, b) = geometric_mean(&rows.iter().map(|r| r.insn_pct).collect::<Vec<_>>());
            MeanRow { library: lib.to_string(), programs: rows.len(), fn_pct, insn_pct, zero_substituted: a || b }
        })
        .collect();
    table
}

#[derive(Serialize)]
struct CsvRow<'a> {
    program: &'a str,
    library: &'a str,
    link: &'a str,
    functions: String,
    insns: String,
    fn_footprint_pct: String,
    insn_footprint_pct: String,
    other_functions: String,
    note: String,
}

/// Writes the table as CSV. Mean rows use the program name `geomean` and
/// note the number of programs and any zero substitution.
pub fn write_csv<W: Write>(table: &StudyTable, out: W) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    for r in &table.rows {
        w.serialize(CsvRow {
            program: &r.program,
            library: &r.library,
            link: match r.link {
                LinkKind::Direct => "direct",
                LinkKind::Transitive => "transitive",
            },
            functions: r.functions_used.to_string(),
            insns: r.insns_used.to_string(),
            fn_footprint_pct: format!("{:.2}", r.fn_pct),
            insn_footprint_pct: format!("{:.2}", r.insn_pct),
            other_functions: r.other_functions.to_string(),
            note: String::new(),
        })?;
    }
    for m in &table.means {
        w.serialize(CsvRow {
            program: "geomean",
            library: &m.library,
            link: "",
            functions: String::new(),
            insns: String::new(),
            fn_footprint_pct: format!("{:.2}", m.fn_pct),
            insn_footprint_pct: format!("{:.2}", m.insn_pct),
            other_functions: String::new(),
            note: format!("{} programs{}", m.programs, if m.zero_substituted { ", zero substituted" } else { "" }),
        })?;
    }
    for f in &table.failures {
        w.serialize(CsvRow {
            program: &f.program,
            library: "",
            link: "",
            functions: String::new(),
            insns: String::new(),
            fn_footprint_pct: String::new(),
            insn_footprint_pct: String::new(),
            other_functions: String::new(),
            note: format!("failed: {}", f.error),
        })?;
    }
    w.flush()?;
    Ok(())
}
