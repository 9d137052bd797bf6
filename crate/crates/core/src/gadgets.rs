// SPDX-License-Identifier: Apache-2.0

//! Gadget scanning over toy code images.
//!
//! A gadget is any instruction-aligned run of at most `depth` instructions
//! that ends at a RET, ICALL or IJMP and contains no trap opcode. Gadgets
//! are deduplicated by their exact bytes. Class membership:
//!
//! | class   | rule                                             |
//! |---------|--------------------------------------------------|
//! | syscall | contains SYSCALL                                 |
//! | spu     | contains SPADJ                                   |
//! | cop     | ends in ICALL                                    |
//! | jop     | ends in IJMP                                     |
//! | cs      | first instruction immediately follows a CALL     |
//! | ep      | first instruction is a function entry            |
//!
//! Classes are not exclusive. A deduplicated gadget belongs to a
//! position-dependent class (cs, ep) if any of its occurrences does.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loader::{PageState, ProcessImage};
use crate::mir::{opcode, INSN_SIZE};

pub const DEFAULT_DEPTH: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GadgetError {
    #[error("code image length {0} is not a multiple of the instruction size")]
    MisalignedImage(usize),
    #[error("gadget depth must be at least one instruction")]
    ZeroDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GadgetClass {
    Syscall,
    Spu,
    Cop,
    Cs,
    Jop,
    Ep,
}

impl GadgetClass {
    pub const ALL: [GadgetClass; 6] = [
        GadgetClass::Syscall,
        GadgetClass::Spu,
        GadgetClass::Cop,
        GadgetClass::Cs,
        GadgetClass::Jop,
        GadgetClass::Ep,
    ];
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub syscall: usize,
    pub spu: usize,
    pub cop: usize,
    pub cs: usize,
    pub jop: usize,
    pub ep: usize,
}

impl ClassCounts {
    pub fn get(&self, c: GadgetClass) -> usize {
        match c {
            GadgetClass::Syscall => self.syscall,
            GadgetClass::Spu => self.spu,
            GadgetClass::Cop => self.cop,
            GadgetClass::Cs => self.cs,
            GadgetClass::Jop => self.jop,
            GadgetClass::Ep => self.ep,
        }
    }

    fn bump(&mut self, c: GadgetClass) {
        match c {
            GadgetClass::Syscall => self.syscall += 1,
            GadgetClass::Spu => self.spu += 1,
            GadgetClass::Cop => self.cop += 1,
            GadgetClass::Cs => self.cs += 1,
            GadgetClass::Jop => self.jop += 1,
            GadgetClass::Ep => self.ep += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetReport {
    pub depth: usize,
    pub unique_total: usize,
    pub classes: ClassCounts,
    /// Hex-encoded gadget bytes -> classes.
    pub gadgets: BTreeMap<String, BTreeSet<GadgetClass>>,
}

impl GadgetReport {
    fn recount(&mut self) {
        self.unique_total = self.gadgets.len();
        self.classes = ClassCounts::default();
        for classes in self.gadgets.values() {
            for &c in classes {
                self.classes.bump(c);
            }
        }
    }

    /// Union of two reports, deduplicating across images.
    pub fn merge(&mut self, other: &GadgetReport) {
        for (k, v) in &other.gadgets {
            self.gadgets.entry(k.clone()).or_default().extend(v.iter().copied());
        }
        self.depth = self.depth.max(other.depth);
        self.recount();
    }

    pub fn count(&self, c: Option<GadgetClass>) -> usize {
        c.map_or(self.unique_total, |c| self.classes.get(c))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Scans one code image. `entries` are function entry offsets; `live`, if
/// given, marks which instructions may be used (false for code on
/// non-executable pages).
pub fn scan_masked(
    code: &[u8],
    depth: usize,
    entries: &BTreeSet<usize>,
    live: Option<&[bool]>,
) -> Result<GadgetReport, GadgetError> {
    if !code.len().is_multiple_of(INSN_SIZE) {
        return Err(GadgetError::MisalignedImage(code.len()));
    }
    if depth == 0 {
        return Err(GadgetError::ZeroDepth);
    }
    let n = code.len() / INSN_SIZE;
    let op = |i: usize| code[i * INSN_SIZE];
    let usable = |i: usize| op(i) != opcode::TRAP && live.is_none_or(|l| l[i]);
    let mut report = GadgetReport { depth, ..Default::default() };
    for end in 0..n {
        if !opcode::is_terminator(op(end)) || !usable(end) {
            continue;
        }
        let mut has_syscall = false;
        let mut has_spadj = false;
        for len in 1..=depth.min(end + 1) {
            let start = end + 1 - len;
            if !usable(start) {
                break;
            }
            has_syscall |= op(start) == opcode::SYSCALL;
            has_spadj |= op(start) == opcode::SPADJ;
            let bytes = &code[start * INSN_SIZE..(end + 1) * INSN_SIZE];
            let classes = report.gadgets.entry(hex(bytes)).or_default();
            if has_syscall {
                classes.insert(GadgetClass::Syscall);
            }
            if has_spadj {
                classes.insert(GadgetClass::Spu);
            }
            match op(end) {
                opcode::ICALL => {
                    classes.insert(GadgetClass::Cop);
                }
                opcode::IJMP => {
                    classes.insert(GadgetClass::Jop);
                }
                _ => {}
            }
            if start > 0 && op(start - 1) == opcode::CALL {
                classes.insert(GadgetClass::Cs);
            }
            if entries.contains(&(start * INSN_SIZE)) {
                classes.insert(GadgetClass::Ep);
            }
        }
    }
    report.recount();
    Ok(report)
}

pub fn scan(code: &[u8], depth: usize, entries: &BTreeSet<usize>) -> Result<GadgetReport, GadgetError> {
    scan_masked(code, depth, entries, None)
}

/// Scans every module of a process image, skipping code on non-executable
/// pages, and merges the results.
pub fn scan_image(image: &ProcessImage, depth: usize) -> Result<GadgetReport, GadgetError> {
    let mut total = GadgetReport { depth, ..Default::default() };
    let page = image.page_size as usize;
    for m in &image.modules {
        let live: Vec<bool> = (0..m.memory.len() / INSN_SIZE)
            .map(|i| m.pages.get(i * INSN_SIZE / page) != Some(&PageState::Nx))
            .collect();
        let r = scan_masked(&m.memory, depth, &m.object.entry_offsets(), Some(&live))?;
        total.merge(&r);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReduction {
    pub class: String,
    pub before: usize,
    pub after: usize,
    /// `None` when `before` is zero.
    pub reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetDiff {
    pub rows: Vec<ClassReduction>,
    /// Gadgets present after but not before.
    pub anomalies: Vec<String>,
}

pub fn reduction(before: usize, after: usize) -> Option<f64> {
    (before != 0).then(|| (1.0 - after as f64 / before as f64) * 100.0)
}

pub fn diff(before: &GadgetReport, after: &GadgetReport) -> GadgetDiff {
    let mut rows = vec![ClassReduction {
        class: "total".into(),
        before: before.unique_total,
        after: after.unique_total,
        reduction_pct: reduction(before.unique_total, after.unique_total),
    }];
    for c in GadgetClass::ALL {
        let (b, a) = (before.classes.get(c), after.classes.get(c));
        rows.push(ClassReduction {
            class: serde_json::to_value(c).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            before: b,
            after: a,
            reduction_pct: reduction(b, a),
        });
    }
    let anomalies = after.gadgets.keys().filter(|k| !before.gadgets.contains_key(*k)).cloned().collect();
    GadgetDiff { rows, anomalies }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::opcode::*;

    fn image(ops: &[u8]) -> Vec<u8> {
        ops.iter().flat_map(|&o| [o, 0, 0, 0]).collect()
    }

    #[test]
    fn syscall_ret_suffixes() {
        let r = scan(&image(&[SYSCALL, RET]), 5, &BTreeSet::new()).unwrap();
        assert_eq!(r.unique_total, 2);
        assert_eq!(r.classes.syscall, 1);
        assert_eq!(r.classes.ep, 0);
        let r = scan(&image(&[SYSCALL, RET]), 5, &BTreeSet::from([0])).unwrap();
        assert_eq!(r.classes.ep, 1);
    }

    #[test]
    fn trap_bytes_yield_nothing() {
        let r = scan(&[TRAP; 64], 5, &BTreeSet::new()).unwrap();
        assert_eq!(r.unique_total, 0);
    }

    #[test]
    fn classes_overlap() {
        let r = scan(&image(&[CALL, SPADJ, RET]), 5, &BTreeSet::new()).unwrap();
        let spadj_ret = hex(&image(&[SPADJ, RET]));
        assert_eq!(r.gadgets[&spadj_ret], BTreeSet::from([GadgetClass::Spu, GadgetClass::Cs]));
        assert_eq!(r.unique_total, 3);
    }

    #[test]
    fn terminator_classes_and_depth() {
        let code = image(&[NOP, NOP, NOP, ICALL, SPADJ, IJMP]);
        let r = scan(&code, 2, &BTreeSet::new()).unwrap();
        // ICALL: [icall], [nop icall]; IJMP: [ijmp], [spadj ijmp]
        assert_eq!(r.unique_total, 4);
        assert_eq!(r.classes.cop, 2);
        assert_eq!(r.classes.jop, 2);
        assert_eq!(r.classes.spu, 1);
    }

    #[test]
    fn misaligned_and_zero_depth() {
        assert_eq!(scan(&[7, 0, 0], 5, &BTreeSet::new()), Err(GadgetError::MisalignedImage(3)));
        assert_eq!(scan(&[], 0, &BTreeSet::new()), Err(GadgetError::ZeroDepth));
    }

    #[test]
    fn trap_breaks_suffix() {
        let code = image(&[SYSCALL, TRAP, RET]);
        let r = scan(&code, 5, &BTreeSet::new()).unwrap();
        assert_eq!(r.unique_total, 1);
        assert_eq!(r.classes.syscall, 0);
    }

    #[test]
    fn diff_percentages() {
        assert_eq!(reduction(100, 29), Some(71.0));
        assert_eq!(reduction(0, 0), None);
        let r = scan(&image(&[SYSCALL, RET]), 5, &BTreeSet::new()).unwrap();
        let d = diff(&r, &r);
        assert!(d.rows.iter().all(|row| row.reduction_pct.unwrap_or(0.0) == 0.0));
        assert!(d.anomalies.is_empty());
        let other = scan(&image(&[SPADJ, RET]), 5, &BTreeSet::new()).unwrap();
        assert_eq!(diff(&r, &other).anomalies, vec![hex(&image(&[SPADJ, RET]))]);
    }
}
