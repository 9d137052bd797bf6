// SPDX-License-Identifier: Apache-2.0

//! Seeded generator of random module systems for property tests and
//! benchmarks.
//!
//! Every generated system loads: each library is reachable from the
//! executable through `needs` edges or a trained `dlopen`, and every import
//! names an exported function of some other module.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compile::{compile_module, CompileError};
use crate::depgraph::Strategy;
use crate::loader::MemorySource;
use crate::mir::{Binding, Function, Global, Module, Statement, VTable};
use crate::pwof::{ObjectFile, TrainingRecord};

/// Exported names that several modules may define, to exercise
/// strong/weak interposition.
const SHARED: [&str; 6] = ["s0", "s1", "s2", "s3", "s4", "s5"];
const VARS: [&str; 4] = ["v0", "v1", "v2", "v3"];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub max_modules: usize,
    pub max_functions: usize,
    pub max_statements: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { max_modules: 5, max_functions: 30, max_statements: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSystem {
    /// `modules[0]` is the executable.
    pub modules: Vec<Module>,
    /// Embedded in the executable.
    pub training: Vec<TrainingRecord>,
}

impl SynthSystem {
    /// Compiles every module. `None` produces `.dep`-less objects.
    pub fn compile(&self, strategy: Option<Strategy>) -> Result<(ObjectFile, MemorySource), CompileError> {
        let exe = compile_module(&self.modules[0], strategy, self.training.clone())?;
        let mut source = MemorySource::default();
        for m in &self.modules[1..] {
            source.insert(&compile_module(m, strategy, Vec::new())?);
        }
        Ok((exe, source))
    }

    pub fn texts(&self) -> Vec<String> {
        self.modules.iter().map(Module::pretty_print).collect()
    }
}

struct Shape {
    name: String,
    functions: Vec<Function>,
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [String]) -> &'a str {
    xs.choose(rng).map(String::as_str).expect("non-empty choice")
}

/// Generates one random system from `seed`.
pub fn generate(seed: u64, cfg: &SynthConfig) -> SynthSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=cfg.max_modules.max(1));
    let names: Vec<String> = (0..n).map(|i| if i == 0 { "app".to_string() } else { format!("lib{i}") }).collect();

    // Function headers first, so imports can be chosen from the exports.
    let mut shapes: Vec<Shape> = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let count = rng.gen_range(1..=cfg.max_functions.max(1));
        let mut functions = Vec::new();
        let mut shared: Vec<&str> = SHARED.to_vec();
        shared.shuffle(&mut rng);
        for j in 0..count {
            let mut f = if i == 0 && j == 0 {
                let mut f = Function::new("main", Binding::Strong, false);
                f.entry = true;
                f
            } else if rng.gen_bool(0.2) && !shared.is_empty() {
                let b = if rng.gen_bool(0.5) { Binding::Strong } else { Binding::Weak };
                Function::new(shared.pop().unwrap_or_default(), b, true)
            } else {
                let b = [Binding::Strong, Binding::Weak, Binding::Local][rng.gen_range(0..3)];
                let exported = b != Binding::Local && rng.gen_bool(0.6);
                Function::new(format!("{name}_f{j}"), b, exported)
            };
            f.is_asm = !f.entry && rng.gen_bool(0.08);
            functions.push(f);
        }
        shapes.push(Shape { name: name.clone(), functions });
    }

    let exports: Vec<(usize, String)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.functions
                .iter()
                .filter(|f| f.exported && f.binding != Binding::Local)
                .map(move |f| (i, f.name.clone()))
        })
        .collect();

    // Reachability: each library is needed by an earlier module, except
    // possibly the last one, which may be reachable by dlopen only.
    let dlopen_only = n >= 2 && rng.gen_bool(0.3);
    let mut needed: Vec<Vec<String>> = vec![Vec::new(); n];
    for (i, name) in names.iter().enumerate().skip(1) {
        if dlopen_only && i == n - 1 {
            continue;
        }
        let parent = rng.gen_range(0..i);
        needed[parent].push(name.clone());
    }
    for (i, list) in needed.iter_mut().enumerate() {
        for (k, other) in names.iter().enumerate().skip(1) {
            let allowed = k != i && !(dlopen_only && k == n - 1);
            if allowed && !list.contains(other) && rng.gen_bool(0.15) {
                list.push(other.clone());
            }
        }
    }

    let mut training = Vec::new();
    let mut opened: Vec<usize> = Vec::new();
    if dlopen_only {
        opened.push(n - 1);
    }
    if n >= 2 && rng.gen_bool(0.3) {
        let extra = rng.gen_range(1..n);
        if !opened.contains(&extra) {
            opened.push(extra);
        }
    }
    for &m in &opened {
        training.push(TrainingRecord::dlopen(&names[m]));
    }
    for &m in &opened {
        let mine: Vec<&String> = exports.iter().filter(|(i, _)| *i == m).map(|(_, e)| e).collect();
        for _ in 0..rng.gen_range(0..=2) {
            if let Some(sym) = mine.choose(&mut rng) {
                let rec = TrainingRecord::dlsym(&names[m], sym.as_str());
                if !training.contains(&rec) {
                    training.push(rec);
                }
            }
        }
    }

    let mut modules = Vec::new();
    for (i, shape) in shapes.into_iter().enumerate() {
        let defined: Vec<String> = shape.functions.iter().map(|f| f.name.clone()).collect();
        let mut candidates: Vec<String> = exports
            .iter()
            .filter(|(m, e)| *m != i && !defined.contains(e))
            .map(|(_, e)| e.clone())
            .collect();
        candidates.sort();
        candidates.dedup();
        candidates.shuffle(&mut rng);
        let imports: Vec<String> = candidates.into_iter().take(rng.gen_range(0..=4)).collect();
        let callable: Vec<String> = defined.iter().chain(&imports).cloned().collect();

        let globals: Vec<Global> = (0..rng.gen_range(0..=3))
            .map(|k| Global {
                name: format!("g{k}"),
                initializer: rng.gen_bool(0.5).then(|| pick(&mut rng, &callable).to_string()),
            })
            .collect();
        let vtables: Vec<VTable> = (0..rng.gen_range(0..=2))
            .map(|k| VTable {
                type_name: format!("T{i}x{k}"),
                entries: (0..rng.gen_range(1..=4)).map(|_| pick(&mut rng, &callable).to_string()).collect(),
            })
            .collect();
        let types: Vec<String> = vtables.iter().map(|v| v.type_name.clone()).collect();
        let mut vars: Vec<String> = VARS.iter().map(|v| v.to_string()).collect();
        vars.extend(globals.iter().map(|g| g.name.clone()));
        let addressable: Vec<String> = callable.iter().chain(globals.iter().map(|g| &g.name)).cloned().collect();

        let mut functions = shape.functions;
        for f in &mut functions {
            let len = rng.gen_range(0..=cfg.max_statements);
            for _ in 0..len {
                let s = if f.is_asm {
                    Statement::Call { target: pick(&mut rng, &callable).to_string() }
                } else {
                    random_statement(&mut rng, &vars, &callable, &addressable, &types)
                };
                f.body.push(s);
            }
            f.body.push(Statement::Ret);
        }
        modules.push(Module {
            name: shape.name,
            is_executable: i == 0,
            needed: needed[i].clone(),
            imports,
            globals,
            vtables,
            functions,
        });
    }
    SynthSystem { modules, training }
}

fn random_statement<R: Rng>(
    rng: &mut R,
    vars: &[String],
    callable: &[String],
    addressable: &[String],
    types: &[String],
) -> Statement {
    let v = |rng: &mut R| pick(rng, vars).to_string();
    match rng.gen_range(0..12) {
        0 | 1 => Statement::AddrOf { dst: v(rng), target: pick(rng, addressable).to_string() },
        2 => Statement::Copy { dst: v(rng), src: v(rng) },
        3 => Statement::Load { dst: v(rng), src: v(rng) },
        4 => Statement::Store { dst: v(rng), src: v(rng) },
        5 => Statement::Call { target: pick(rng, callable).to_string() },
        6 => Statement::ICall { var: v(rng) },
        7 => Statement::VCall { var: v(rng), slot: rng.gen_range(0..4) },
        8 if !types.is_empty() => Statement::NewObject { dst: v(rng), type_name: pick(rng, types).to_string() },
        8 | 9 => Statement::SpAdj,
        10 => Statement::Syscall,
        _ => Statement::IJmp { var: v(rng) },
    }
}

/// A balanced binary tree of `n` modules (the executable plus `n - 1`
/// libraries), each exporting `api<k>` which calls its children's APIs.
pub fn generate_tree(seed: u64, n: usize) -> SynthSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |k: usize| if k == 0 { "app".to_string() } else { format!("node{k}") };
    let modules = (0..n.max(1))
        .map(|k| {
            let children: Vec<usize> = [2 * k + 1, 2 * k + 2].into_iter().filter(|&c| c < n).collect();
            let mut api = if k == 0 {
                let mut f = Function::new("main", Binding::Strong, false);
                f.entry = true;
                f
            } else {
                Function::new(format!("api{k}"), Binding::Strong, true)
            };
            let helpers: Vec<String> = (0..9).map(|j| format!("n{k}_h{j}")).collect();
            for &c in &children {
                api.body.push(Statement::Call { target: format!("api{c}") });
            }
            api.body.push(Statement::Call { target: helpers[rng.gen_range(0..helpers.len())].clone() });
            api.body.push(Statement::Ret);
            let mut functions = vec![api];
            for h in &helpers {
                let mut f = Function::new(h.clone(), Binding::Local, false);
                for _ in 0..rng.gen_range(1..6) {
                    f.body.push(if rng.gen_bool(0.5) { Statement::SpAdj } else { Statement::Syscall });
                }
                f.body.push(Statement::Ret);
                functions.push(f);
            }
            Module {
                name: name(k),
                is_executable: k == 0,
                needed: children.iter().map(|&c| name(c)).collect(),
                imports: children.iter().map(|c| format!("api{c}")).collect(),
                functions,
                ..Module::default()
            }
        })
        .collect();
    SynthSystem { modules, training: Vec::new() }
}
