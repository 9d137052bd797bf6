// SPDX-License-Identifier: Apache-2.0

//! Inclusion-based (Andersen-style) points-to analysis over the mini-IR.
//!
//! The analysis is flow- and context-insensitive. Locals are qualified by
//! their enclosing function; globals are module-wide cells. Abstract
//! locations are functions, vtable bases and global cells.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::depgraph::{DepTarget, Diagnostic, Edges};
use crate::mir::{Module, Statement};

/// A constraint-graph node: either a pointer variable or an abstract location.
/// Globals are both.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Node {
    Local { function: String, var: String },
    Global(String),
    Function(String),
    VTable(String),
}

impl Node {
    fn var(module: &Module, function: &str, name: &str) -> Node {
        if module.is_global(name) {
            Node::Global(name.to_string())
        } else {
            Node::Local { function: function.to_string(), var: name.to_string() }
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Local { function, var } => write!(f, "{function}::{var}"),
            Node::Global(g) => write!(f, "@{g}"),
            Node::Function(n) => write!(f, "fn:{n}"),
            Node::VTable(t) => write!(f, "vt:{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `a = &b`
    AddressOf,
    /// `a = b`
    Copy,
    /// `a = *b`
    Load,
    /// `*a = b`
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub lhs: Node,
    pub rhs: Node,
}

impl Constraint {
    pub fn new(kind: ConstraintKind, lhs: Node, rhs: Node) -> Self {
        Constraint { kind, lhs, rhs }
    }
}

/// One line of the constraint dump format.
impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (l, r) = (&self.lhs, &self.rhs);
        match self.kind {
            ConstraintKind::AddressOf => write!(f, "{l} = &{r}"),
            ConstraintKind::Copy => write!(f, "{l} = {r}"),
            ConstraintKind::Load => write!(f, "{l} = *{r}"),
            ConstraintKind::Store => write!(f, "*{l} = {r}"),
        }
    }
}

/// Extracts one constraint per pointer-manipulating statement, one per
/// function-address global initializer and one per object instantiation.
pub fn generate_constraints(module: &Module) -> Vec<Constraint> {
    let mut out = Vec::new();
    for g in &module.globals {
        if let Some(t) = &g.initializer {
            out.push(Constraint::new(
                ConstraintKind::AddressOf,
                Node::Global(g.name.clone()),
                Node::Function(t.clone()),
            ));
        }
    }
    for f in &module.functions {
        let var = |n: &str| Node::var(module, &f.name, n);
        for s in &f.body {
            let c = match s {
                Statement::AddrOf { dst, target } => {
                    let loc = if module.is_global(target) {
                        Node::Global(target.clone())
                    } else {
                        Node::Function(target.clone())
                    };
                    Constraint::new(ConstraintKind::AddressOf, var(dst), loc)
                }
                Statement::Copy { dst, src } => Constraint::new(ConstraintKind::Copy, var(dst), var(src)),
                Statement::Load { dst, src } => Constraint::new(ConstraintKind::Load, var(dst), var(src)),
                Statement::Store { dst, src } => {
                    Constraint::new(ConstraintKind::Store, var(dst), var(src))
                }
                Statement::NewObject { dst, type_name } => Constraint::new(
                    ConstraintKind::AddressOf,
                    var(dst),
                    Node::VTable(type_name.clone()),
                ),
                _ => continue,
            };
            out.push(c);
        }
    }
    out
}

/// A constraint over dense node ids, the solver's native input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedConstraint {
    pub kind: ConstraintKind,
    pub lhs: u32,
    pub rhs: u32,
}

/// Least fixpoint of the four inclusion rules over nodes `0..num_nodes`.
///
/// Worklist solver over a constraint graph: copy edges are static, and each
/// load/store adds edges as the points-to set of its pointer grows. The
/// queue is FIFO and a node is never queued twice at once.
pub fn solve_indexed(num_nodes: usize, constraints: &[IndexedConstraint]) -> Vec<BTreeSet<u32>> {
    let mut pts: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); num_nodes];
    let mut succ: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); num_nodes];
    // loads[b] = every a with `a = *b`; stores[a] = every b with `*a = b`.
    let mut loads: Vec<Vec<u32>> = vec![Vec::new(); num_nodes];
    let mut stores: Vec<Vec<u32>> = vec![Vec::new(); num_nodes];

    for c in constraints {
        let (l, r) = (c.lhs, c.rhs);
        match c.kind {
            ConstraintKind::AddressOf => {
                pts[l as usize].insert(r);
            }
            ConstraintKind::Copy => {
                succ[r as usize].insert(l);
            }
            ConstraintKind::Load => loads[r as usize].push(l),
            ConstraintKind::Store => stores[l as usize].push(r),
        }
    }

    let mut queue = VecDeque::new();
    let mut queued = vec![false; num_nodes];
    let push = |n: u32, queue: &mut VecDeque<u32>, queued: &mut Vec<bool>| {
        if !queued[n as usize] {
            queued[n as usize] = true;
            queue.push_back(n);
        }
    };
    for n in 0..num_nodes as u32 {
        if !pts[n as usize].is_empty() {
            push(n, &mut queue, &mut queued);
        }
    }

    while let Some(n) = queue.pop_front() {
        let ni = n as usize;
        queued[ni] = false;
        let current = pts[ni].clone();
        for &a in &loads[ni] {
            for &v in &current {
                if succ[v as usize].insert(a) {
                    push(v, &mut queue, &mut queued);
                }
            }
        }
        for &b in &stores[ni] {
            for &v in &current {
                if succ[b as usize].insert(v) {
                    push(b, &mut queue, &mut queued);
                }
            }
        }
        let targets: Vec<u32> = succ[ni].iter().copied().collect();
        for s in targets {
            if s == n {
                continue;
            }
            let before = pts[s as usize].len();
            pts[s as usize].extend(current.iter().copied());
            if pts[s as usize].len() != before {
                push(s, &mut queue, &mut queued);
            }
        }
    }
    pts
}

/// Solved points-to sets. Nodes absent from the map have empty sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PointsToMap {
    pub pts: BTreeMap<Node, BTreeSet<Node>>,
}

impl PointsToMap {
    pub fn get(&self, node: &Node) -> impl Iterator<Item = &Node> {
        self.pts.get(node).into_iter().flatten()
    }

    pub fn points_to(&self, node: &Node, target: &Node) -> bool {
        self.pts.get(node).is_some_and(|s| s.contains(target))
    }
}

pub fn solve_inclusion(constraints: &[Constraint]) -> PointsToMap {
    let mut ids: HashMap<&Node, u32> = HashMap::new();
    let mut nodes: Vec<&Node> = Vec::new();
    let mut indexed = Vec::with_capacity(constraints.len());
    for c in constraints {
        let mut id = |n| {
            *ids.entry(n).or_insert_with(|| {
                nodes.push(n);
                (nodes.len() - 1) as u32
            })
        };
        let lhs = id(&c.lhs);
        let rhs = id(&c.rhs);
        indexed.push(IndexedConstraint { kind: c.kind, lhs, rhs });
    }
    let solved = solve_indexed(nodes.len(), &indexed);
    let mut map = PointsToMap::default();
    for (i, set) in solved.into_iter().enumerate() {
        if !set.is_empty() {
            map.pts
                .insert(nodes[i].clone(), set.into_iter().map(|j| nodes[j as usize].clone()).collect());
        }
    }
    map
}

/// Dependency edges for indirect call sites. `icall` and `ijmp` depend on
/// every function their variable may hold; `vcall p, k` depends on slot `k`
/// of every vtable `p` may reference. Empty sets produce a diagnostic.
pub fn indirect_edges(module: &Module, ptmap: &PointsToMap) -> (Edges, Vec<Diagnostic>) {
    let mut edges = Edges::new();
    let mut diags = Vec::new();
    let target_of = |name: &str| {
        if module.function_index(name).is_some() {
            DepTarget::local(name)
        } else {
            DepTarget::import(name)
        }
    };
    for f in &module.functions {
        for (idx, s) in f.body.iter().enumerate() {
            let (var, slot) = match s {
                Statement::ICall { var } | Statement::IJmp { var } => (var, None),
                Statement::VCall { var, slot } => (var, Some(*slot as usize)),
                _ => continue,
            };
            let node = Node::var(module, &f.name, var);
            let mut found = false;
            for loc in ptmap.get(&node) {
                match (loc, slot) {
                    (Node::Function(t), None) => {
                        found = true;
                        edges.entry(f.name.clone()).or_default().insert(target_of(t));
                    }
                    (Node::VTable(ty), Some(k)) => {
                        found = true;
                        if let Some(entry) = module.vtable(ty).and_then(|v| v.entries.get(k)) {
                            edges.entry(f.name.clone()).or_default().insert(target_of(entry));
                        }
                    }
                    _ => {}
                }
            }
            if !found {
                diags.push(Diagnostic::EmptyPointsTo {
                    function: f.name.clone(),
                    statement: idx,
                    var: var.clone(),
                });
            }
        }
    }
    (edges, diags)
}
