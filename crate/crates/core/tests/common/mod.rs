// SPDX-License-Identifier: Apache-2.0

//! Reference implementations used as test oracles. Deliberately naive.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use piecewise::mir::{opcode, Module, Statement, INSN_SIZE};
use piecewise::pta::{ConstraintKind, IndexedConstraint};

/// Applies every inclusion rule to every constraint until nothing changes.
pub fn naive_solve(n: usize, constraints: &[IndexedConstraint]) -> Vec<BTreeSet<u32>> {
    let mut pts = vec![BTreeSet::new(); n];
    loop {
        let before = pts.clone();
        for c in constraints {
            let (a, b) = (c.lhs as usize, c.rhs as usize);
            match c.kind {
                ConstraintKind::AddressOf => {
                    pts[a].insert(c.rhs);
                }
                ConstraintKind::Copy => {
                    let src = pts[b].clone();
                    pts[a].extend(src);
                }
                ConstraintKind::Load => {
                    for v in pts[b].clone() {
                        let src = pts[v as usize].clone();
                        pts[a].extend(src);
                    }
                }
                ConstraintKind::Store => {
                    for v in pts[a].clone() {
                        let src = pts[b].clone();
                        pts[v as usize].extend(src);
                    }
                }
            }
        }
        if pts == before {
            return pts;
        }
    }
}

/// Every (start, length) window of a code image, filtered by the gadget
/// rules. Returns gadget bytes -> class names.
pub fn brute_gadgets(
    code: &[u8],
    depth: usize,
    entries: &BTreeSet<usize>,
    live: &dyn Fn(usize) -> bool,
) -> BTreeMap<Vec<u8>, BTreeSet<&'static str>> {
    let n = code.len() / INSN_SIZE;
    let op = |i: usize| code[i * INSN_SIZE];
    let mut out: BTreeMap<Vec<u8>, BTreeSet<&'static str>> = BTreeMap::new();
    for start in 0..n {
        for len in 1..=depth {
            let end = start + len;
            if end > n {
                break;
            }
            let ops: Vec<u8> = (start..end).map(op).collect();
            let last = ops[len - 1];
            if ![opcode::RET, opcode::ICALL, opcode::IJMP].contains(&last) {
                continue;
            }
            if ops.contains(&opcode::TRAP) || !(start..end).all(|i| live(i * INSN_SIZE)) {
                continue;
            }
            let classes = out.entry(code[start * INSN_SIZE..end * INSN_SIZE].to_vec()).or_default();
            if ops.contains(&opcode::SYSCALL) {
                classes.insert("syscall");
            }
            if ops.contains(&opcode::SPADJ) {
                classes.insert("spu");
            }
            if last == opcode::ICALL {
                classes.insert("cop");
            }
            if last == opcode::IJMP {
                classes.insert("jop");
            }
            if start > 0 && op(start - 1) == opcode::CALL {
                classes.insert("cs");
            }
            if entries.contains(&(start * INSN_SIZE)) {
                classes.insert("ep");
            }
        }
    }
    out
}

pub fn class_count(g: &BTreeMap<Vec<u8>, BTreeSet<&'static str>>, class: &str) -> usize {
    g.values().filter(|c| c.contains(class)).count()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Functions of a self-contained module reachable from `roots`, by
/// repeated sweeps over the IR. `localized` selects the use-def rule for
/// address-taken functions; otherwise every address-taken function is a
/// root.
pub fn brute_retained(m: &Module, roots: &[&str], localized: bool) -> BTreeSet<String> {
    let is_fn = |n: &str| m.function(n).is_some();
    let mut live: BTreeSet<String> = roots.iter().map(|s| s.to_string()).collect();
    live.extend(m.functions.iter().filter(|f| f.is_asm).map(|f| f.name.clone()));
    if !localized {
        for f in &m.functions {
            for s in &f.body {
                if let Statement::AddrOf { target, .. } = s {
                    if is_fn(target) {
                        live.insert(target.clone());
                    }
                }
            }
        }
        live.extend(m.globals.iter().filter_map(|g| g.initializer.clone()));
        live.extend(m.vtables.iter().flat_map(|v| v.entries.iter().cloned()));
    }
    loop {
        let before = live.len();
        for f in m.functions.iter().filter(|f| live.contains(&f.name)).collect::<Vec<_>>() {
            for s in &f.body {
                match s {
                    Statement::Call { target } => {
                        live.insert(target.clone());
                    }
                    Statement::NewObject { type_name, .. } => {
                        if let Some(v) = m.vtable(type_name) {
                            live.extend(v.entries.iter().cloned());
                        }
                    }
                    Statement::AddrOf { target, .. } if localized && is_fn(target) => {
                        live.insert(target.clone());
                    }
                    _ => {}
                }
                if localized {
                    let mut names: Vec<&str> = s.variables();
                    if let Statement::AddrOf { target, .. } = s {
                        names.push(target);
                    }
                    for g in m.globals.iter().filter(|g| names.contains(&g.name.as_str())) {
                        live.extend(g.initializer.clone());
                    }
                }
            }
        }
        if live.len() == before {
            return live;
        }
    }
}
