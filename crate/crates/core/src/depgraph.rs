// SPDX-License-Identifier: Apache-2.0

//! Function-level dependency graphs: the annotated call graph plus one of
//! three treatments of code pointers.
//!
//! * `FullModule`: every address-taken function is required module-wide.
//! * `Localized`: an address reference makes the referenced function a
//!   dependency of the function containing the reference.
//! * `Pta`: indirect call sites depend on their points-to sets.
//!
//! All strategies add direct calls, vtable functions of instantiated types,
//! and retain assembly functions unconditionally.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mir::{Module, Statement};
use crate::pta;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DepError {
    #[error("function `{function}` instantiates `{type_name}`, which has no declared vtable")]
    UnknownType { function: String, type_name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullModule,
    Localized,
    Pta,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FullModule, Strategy::Localized, Strategy::Pta];

    pub fn tag(self) -> u8 {
        match self {
            Strategy::FullModule => 0,
            Strategy::Localized => 1,
            Strategy::Pta => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::FullModule => "full",
            Strategy::Localized => "localized",
            Strategy::Pta => "pta",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "full_module" | "full-module" => Ok(Strategy::FullModule),
            "localized" => Ok(Strategy::Localized),
            "pta" => Ok(Strategy::Pta),
            other => Err(format!("unknown strategy `{other}` (expected full, localized or pta)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Local,
    Import,
}

/// A dependency: a function defined in the same module or an imported
/// symbol to be reconciled against the load order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DepTarget {
    pub kind: TargetKind,
    pub symbol: String,
}

impl DepTarget {
    pub fn local(symbol: impl Into<String>) -> Self {
        DepTarget { kind: TargetKind::Local, symbol: symbol.into() }
    }

    pub fn import(symbol: impl Into<String>) -> Self {
        DepTarget { kind: TargetKind::Import, symbol: symbol.into() }
    }

    fn of(module: &Module, symbol: &str) -> Self {
        if module.function_index(symbol).is_some() {
            DepTarget::local(symbol)
        } else {
            DepTarget::import(symbol)
        }
    }
}

impl fmt::Display for DepTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TargetKind::Local => f.write_str(&self.symbol),
            TargetKind::Import => write!(f, "{} (import)", self.symbol),
        }
    }
}

pub type Edges = BTreeMap<String, BTreeSet<DepTarget>>;

fn merge(into: &mut Edges, from: Edges) {
    for (k, v) in from {
        into.entry(k).or_default().extend(v);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// An indirect call site whose variable may point to nothing.
    EmptyPointsTo { function: String, statement: usize, var: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyPointsTo { function, statement, var } => write!(
                f,
                "empty points-to set for `{var}` at {function}#{statement}; no edges added"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepGraph {
    pub strategy: Strategy,
    /// Keyed by every defined function, including those without dependencies.
    pub edges: Edges,
    /// Module-wide retained set; only populated by the full-module strategy.
    pub required_globals: BTreeSet<String>,
    pub always_retain: BTreeSet<String>,
    pub diagnostics: Vec<Diagnostic>,
}

impl DepGraph {
    fn empty(strategy: Strategy, module: &Module) -> Self {
        DepGraph {
            strategy,
            edges: module.functions.iter().map(|f| (f.name.clone(), BTreeSet::new())).collect(),
            required_globals: BTreeSet::new(),
            always_retain: BTreeSet::new(),
            diagnostics: Vec::new(),
        }
    }

    pub fn deps(&self, function: &str) -> impl Iterator<Item = &DepTarget> {
        self.edges.get(function).into_iter().flatten()
    }

    pub fn has_edge(&self, from: &str, to: &DepTarget) -> bool {
        self.edges.get(from).is_some_and(|s| s.contains(to))
    }

    /// Functions of this module reachable from `roots` (plus the required
    /// and always-retained sets), following local edges only.
    pub fn local_closure<'a>(&'a self, roots: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut stack: Vec<&str> = roots
            .into_iter()
            .chain(self.required_globals.iter().map(String::as_str))
            .chain(self.always_retain.iter().map(String::as_str))
            .collect();
        while let Some(f) = stack.pop() {
            if !self.edges.contains_key(f) || !seen.insert(f.to_string()) {
                continue;
            }
            for t in self.deps(f) {
                if t.kind == TargetKind::Local {
                    stack.push(&t.symbol);
                }
            }
        }
        seen
    }
}

/// Direct-call edges; asm functions contribute their calls too and are
/// marked always-retained.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallGraph {
    pub edges: Edges,
    pub always_retain: BTreeSet<String>,
}

pub fn build_direct_callgraph(module: &Module) -> CallGraph {
    let mut cg = CallGraph::default();
    for f in &module.functions {
        let deps = cg.edges.entry(f.name.clone()).or_default();
        for s in &f.body {
            if let Statement::Call { target } = s {
                deps.insert(DepTarget::of(module, target));
            }
        }
        if f.is_asm {
            cg.always_retain.insert(f.name.clone());
        }
    }
    cg
}

/// Every function whose address is referenced in the module: by `&f`, by a
/// global initializer, or as a vtable entry.
pub fn full_module_scan(module: &Module) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for g in &module.globals {
        if let Some(t) = &g.initializer {
            out.insert(t.clone());
        }
    }
    for v in &module.vtables {
        out.extend(v.entries.iter().cloned());
    }
    for f in &module.functions {
        for s in &f.body {
            if let Statement::AddrOf { target, .. } = s {
                if !module.is_global(target) {
                    out.insert(target.clone());
                }
            }
        }
    }
    out
}

/// Attaches each address reference to the function containing it. A global
/// whose initializer holds `&f` makes `f` a dependency of every function
/// that names that global (one level of indirection).
pub fn localized_scan(module: &Module) -> DepGraph {
    let mut graph = DepGraph::empty(Strategy::Localized, module);
    let cg = build_direct_callgraph(module);
    merge(&mut graph.edges, cg.edges);
    graph.always_retain = cg.always_retain;

    let initializers: BTreeMap<&str, &str> = module
        .globals
        .iter()
        .filter_map(|g| g.initializer.as_deref().map(|t| (g.name.as_str(), t)))
        .collect();
    for f in &module.functions {
        let deps = graph.edges.entry(f.name.clone()).or_default();
        for s in &f.body {
            if let Statement::AddrOf { target, .. } = s {
                if !module.is_global(target) {
                    deps.insert(DepTarget::of(module, target));
                }
            }
            let mut named: Vec<&str> = s.variables();
            if let Statement::AddrOf { target, .. } = s {
                named.push(target);
            }
            for n in named {
                if let Some(t) = initializers.get(n) {
                    deps.insert(DepTarget::of(module, t));
                }
            }
        }
    }
    graph
}

/// Each function depends on every entry of the vtable of each type it
/// instantiates. Transitive closure happens at retention time.
pub fn vtable_dependencies(module: &Module) -> Result<Edges, DepError> {
    let mut edges = Edges::new();
    for f in &module.functions {
        for s in &f.body {
            if let Statement::NewObject { type_name, .. } = s {
                let vt = module.vtable(type_name).ok_or_else(|| DepError::UnknownType {
                    function: f.name.clone(),
                    type_name: type_name.clone(),
                })?;
                let deps = edges.entry(f.name.clone()).or_default();
                deps.extend(vt.entries.iter().map(|e| DepTarget::of(module, e)));
            }
        }
    }
    Ok(edges)
}

pub fn build_depgraph(module: &Module, strategy: Strategy) -> Result<DepGraph, DepError> {
    let mut graph = match strategy {
        Strategy::Localized => localized_scan(module),
        Strategy::FullModule | Strategy::Pta => {
            let mut g = DepGraph::empty(strategy, module);
            let cg = build_direct_callgraph(module);
            merge(&mut g.edges, cg.edges);
            g.always_retain = cg.always_retain;
            g
        }
    };
    merge(&mut graph.edges, vtable_dependencies(module)?);
    match strategy {
        Strategy::FullModule => graph.required_globals = full_module_scan(module),
        Strategy::Localized => {}
        Strategy::Pta => {
            let ptmap = pta::solve_inclusion(&pta::generate_constraints(module));
            let (edges, diags) = pta::indirect_edges(module, &ptmap);
            merge(&mut graph.edges, edges);
            graph.diagnostics = diags;
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_module;

    fn set<const N: usize>(items: [DepTarget; N]) -> BTreeSet<DepTarget> {
        items.into_iter().collect()
    }

    const CALLBACK: &str = "module m\nimport sort\nfunc comp { ret }\nfunc foo strong exported {\n p = &comp\n call sort\n ret\n}";

    #[test]
    fn direct_call_chain_and_self_loop() {
        let m = parse_module("module m\nfunc f { call g\n call f\n ret }\nfunc g { call h\n ret }\nfunc h { ret }")
            .unwrap();
        let cg = build_direct_callgraph(&m);
        assert_eq!(cg.edges["f"], set([DepTarget::local("g"), DepTarget::local("f")]));
        assert_eq!(cg.edges["g"], set([DepTarget::local("h")]));
        assert!(cg.edges["h"].is_empty());
        let g = build_depgraph(&m, Strategy::Localized).unwrap();
        assert_eq!(g.local_closure(["f"]), ["f", "g", "h"].map(String::from).into());
    }

    #[test]
    fn asm_calls_are_recorded_and_retained() {
        let m = parse_module("module m\nimport memcpy_impl\nfunc a strong exported asm { call memcpy_impl\n ret }")
            .unwrap();
        let cg = build_direct_callgraph(&m);
        assert_eq!(cg.edges["a"], set([DepTarget::import("memcpy_impl")]));
        assert!(cg.always_retain.contains("a"));
        for s in Strategy::ALL {
            assert!(build_depgraph(&m, s).unwrap().always_retain.contains("a"), "{s}");
        }
    }

    #[test]
    fn full_module_scan_cases() {
        let m = parse_module(CALLBACK).unwrap();
        assert_eq!(full_module_scan(&m), ["comp".to_string()].into());

        let m = parse_module("module m\nvtable VShape { area, draw }\nfunc area { ret }\nfunc draw { ret }").unwrap();
        assert_eq!(full_module_scan(&m), ["area", "draw"].map(String::from).into());

        let m = parse_module("module m\nglobal g\nfunc f { p = &g\n call f\n ret }").unwrap();
        assert!(full_module_scan(&m).is_empty());
    }

    #[test]
    fn localized_scan_cases() {
        let m = parse_module(CALLBACK).unwrap();
        let g = localized_scan(&m);
        assert!(g.has_edge("foo", &DepTarget::local("comp")));

        let m = parse_module(
            "module m\nglobal w = &stdout_write\nfunc stdout_write strong local { ret }\n\
             func close_file strong exported { p = w\n icall p\n ret }",
        )
        .unwrap();
        let g = localized_scan(&m);
        assert_eq!(g.edges["close_file"], set([DepTarget::local("stdout_write")]));

        let m = parse_module("module m\nglobal w = &t\nfunc t { ret }\nfunc other { ret }").unwrap();
        let g = localized_scan(&m);
        assert!(g.edges.values().all(BTreeSet::is_empty));
        assert!(g.local_closure(["other"]).len() == 1);
    }

    #[test]
    fn global_named_through_address_of() {
        let m = parse_module("module m\nglobal w = &t\nfunc t { ret }\nfunc f { q = &w\n r = *q\n icall r\n ret }")
            .unwrap();
        assert_eq!(localized_scan(&m).edges["f"], set([DepTarget::local("t")]));
    }

    #[test]
    fn vtable_dependency_cases() {
        let m = parse_module(
            "module m\nvtable Shape { area, draw }\nfunc area { ret }\nfunc draw { ret }\n\
             func F { o = new Shape\n ret }\nfunc G { o = new Shape\n ret }\nfunc H { ret }",
        )
        .unwrap();
        let e = vtable_dependencies(&m).unwrap();
        let both = set([DepTarget::local("area"), DepTarget::local("draw")]);
        assert_eq!(e["F"], both);
        assert_eq!(e["G"], both);
        assert!(!e.contains_key("H"));

        let m = parse_module("module m\nvtable Shape { area }\nfunc area { ret }\nfunc H { ret }").unwrap();
        let g = build_depgraph(&m, Strategy::Localized).unwrap();
        assert!(!g.local_closure(["H"]).contains("area"));

        let m = parse_module("module m\nfunc F { o = new Ghost\n ret }").unwrap();
        assert!(matches!(vtable_dependencies(&m), Err(DepError::UnknownType { .. })));
    }

    #[test]
    fn strategies_on_callback() {
        let m = parse_module(CALLBACK).unwrap();
        let full = build_depgraph(&m, Strategy::FullModule).unwrap();
        assert_eq!(full.edges["foo"], set([DepTarget::import("sort")]));
        assert_eq!(full.required_globals, ["comp".to_string()].into());

        let loc = build_depgraph(&m, Strategy::Localized).unwrap();
        assert_eq!(loc.edges["foo"], set([DepTarget::import("sort"), DepTarget::local("comp")]));
        assert!(loc.required_globals.is_empty());

        // `p` is never called, so the solver adds nothing.
        let pta = build_depgraph(&m, Strategy::Pta).unwrap();
        assert_eq!(pta.edges["foo"], set([DepTarget::import("sort")]));
    }

    #[test]
    fn empty_module_all_strategies() {
        let m = parse_module("module m").unwrap();
        for s in Strategy::ALL {
            let g = build_depgraph(&m, s).unwrap();
            assert!(g.edges.is_empty() && g.required_globals.is_empty() && g.always_retain.is_empty());
        }
    }

    #[test]
    fn statement_order_does_not_matter() {
        let a = parse_module("module m\nglobal w = &t\nfunc t { ret }\nfunc u { ret }\nfunc f { p = &u\n q = w\n icall q\n ret }")
            .unwrap();
        let b = parse_module("module m\nglobal w = &t\nfunc t { ret }\nfunc u { ret }\nfunc f { q = w\n p = &u\n icall q\n ret }")
            .unwrap();
        for s in Strategy::ALL {
            assert_eq!(build_depgraph(&a, s).unwrap(), build_depgraph(&b, s).unwrap());
        }
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
            assert_eq!(Strategy::from_tag(s.tag()), Some(s));
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }
}
