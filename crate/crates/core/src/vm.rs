// SPDX-License-Identifier: Apache-2.0

//! Reference interpreter over a loaded process image.
//!
//! Values are function references, vtable references, global-cell
//! references, or null. Each frame has its own locals; globals live in a
//! per-module store initialized from their initializers. Calls across
//! modules follow the loader's bindings. There is no data computation, so
//! a run is fully determined by its entry point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loader::{Bindings, PageState, ProcessImage, SymbolRef};
use crate::mir::{opcode, Statement};

pub const DEFAULT_STEP_LIMIT: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("entry `{function}` is not defined in module `{module}`")]
    BadEntry { module: String, function: String },
    #[error("step limit must be positive")]
    ZeroStepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FunctionId {
    pub module: String,
    pub function: String,
}

/// A statement position: module, function, statement index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub module: String,
    pub function: String,
    pub statement: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectTarget {
    pub site: Site,
    pub target: FunctionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapReason {
    /// The entry byte is the invalid-instruction trap byte.
    IllegalInstruction,
    /// The entry lies on a non-executable page.
    Nx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    NullIndirectCall,
    /// Indirect call on a value that is not a function (or vtable for `vcall`).
    NotCallable,
    BadVTableSlot,
    /// Load or store through a value that is not a global cell.
    BadDereference,
    UnknownType,
    UnboundSymbol,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Trapped { function: FunctionId, reason: TrapReason },
    LimitExceeded,
    Fault { fault: FaultKind, site: Site },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub entered: Vec<FunctionId>,
    pub indirect_targets: Vec<IndirectTarget>,
    pub outcome: Outcome,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Null,
    Function(SymbolRef),
    VTable { module: usize, type_name: String },
    Cell { module: usize, global: String },
}

struct Frame {
    module: usize,
    function: usize,
    pc: usize,
    locals: HashMap<String, Value>,
}

struct Machine<'a> {
    image: &'a ProcessImage,
    bindings: &'a Bindings,
    check_traps: bool,
    globals: Vec<HashMap<String, Value>>,
    frames: Vec<Frame>,
    trace: Trace,
}

impl<'a> Machine<'a> {
    fn new(image: &'a ProcessImage, bindings: &'a Bindings, check_traps: bool) -> Self {
        let mut globals = Vec::with_capacity(image.modules.len());
        for (mi, m) in image.modules.iter().enumerate() {
            let mut store = HashMap::new();
            for g in &m.ir.globals {
                let v = g
                    .initializer
                    .as_deref()
                    .and_then(|t| bindings.resolve_in(image, mi, t))
                    .map_or(Value::Null, Value::Function);
                store.insert(g.name.clone(), v);
            }
            globals.push(store);
        }
        Machine {
            image,
            bindings,
            check_traps,
            globals,
            frames: Vec::new(),
            trace: Trace { entered: Vec::new(), indirect_targets: Vec::new(), outcome: Outcome::Completed, steps: 0 },
        }
    }

    fn id(&self, r: &SymbolRef) -> FunctionId {
        FunctionId { module: self.image.modules[r.module].name().to_string(), function: r.symbol.clone() }
    }

    fn site(&self) -> Site {
        let f = self.frames.last().expect("active frame");
        let m = &self.image.modules[f.module];
        Site {
            module: m.name().to_string(),
            function: m.ir.functions[f.function].name.clone(),
            statement: f.pc - 1,
        }
    }

    fn fault(&self, fault: FaultKind) -> Outcome {
        Outcome::Fault { fault, site: self.site() }
    }

    fn enter(&mut self, target: SymbolRef) -> Result<(), Outcome> {
        let id = self.id(&target);
        self.trace.entered.push(id.clone());
        let m = &self.image.modules[target.module];
        let Some(function) = m.ir.function_index(&target.symbol) else {
            return Err(self.fault(FaultKind::UnboundSymbol));
        };
        if self.check_traps {
            if let Some((off, _)) = m.function_span(&target.symbol) {
                let page = off / self.image.page_size as usize;
                if m.pages.get(page) == Some(&PageState::Nx) {
                    return Err(Outcome::Trapped { function: id, reason: TrapReason::Nx });
                }
                if m.memory.get(off) == Some(&opcode::TRAP) {
                    return Err(Outcome::Trapped { function: id, reason: TrapReason::IllegalInstruction });
                }
            }
        }
        self.frames.push(Frame { module: target.module, function, pc: 0, locals: HashMap::new() });
        Ok(())
    }

    fn read(&self, name: &str) -> Value {
        let f = self.frames.last().expect("active frame");
        if let Some(v) = self.globals[f.module].get(name) {
            return v.clone();
        }
        f.locals.get(name).cloned().unwrap_or(Value::Null)
    }

    fn write(&mut self, name: &str, v: Value) {
        let f = self.frames.last_mut().expect("active frame");
        if let Some(slot) = self.globals[f.module].get_mut(name) {
            *slot = v;
        } else {
            f.locals.insert(name.to_string(), v);
        }
    }

    fn record_indirect(&mut self, target: &SymbolRef) {
        let site = self.site();
        let target = self.id(target);
        self.trace.indirect_targets.push(IndirectTarget { site, target });
    }

    fn callee(&self, v: Value) -> Result<SymbolRef, Outcome> {
        match v {
            Value::Function(r) => Ok(r),
            Value::Null => Err(self.fault(FaultKind::NullIndirectCall)),
            _ => Err(self.fault(FaultKind::NotCallable)),
        }
    }

    fn run(&mut self, entry: SymbolRef, step_limit: u64) -> Outcome {
        if let Err(o) = self.enter(entry) {
            return o;
        }
        let image = self.image;
        loop {
            let Some(frame) = self.frames.last_mut() else { return Outcome::Completed };
            let module = frame.module;
            let body = &image.modules[module].ir.functions[frame.function].body;
            if frame.pc >= body.len() {
                self.frames.pop();
                continue;
            }
            if self.trace.steps >= step_limit {
                return Outcome::LimitExceeded;
            }
            let stmt = &body[frame.pc];
            frame.pc += 1;
            self.trace.steps += 1;
            if let Err(o) = self.step(module, stmt) {
                return o;
            }
        }
    }

    fn step(&mut self, module: usize, stmt: &Statement) -> Result<(), Outcome> {
        let image = self.image;
        match stmt {
            Statement::AddrOf { dst, target } => {
                let v = if image.modules[module].ir.is_global(target) {
                    Value::Cell { module, global: target.clone() }
                } else {
                    match self.bindings.resolve_in(image, module, target) {
                        Some(r) => Value::Function(r),
                        None => return Err(self.fault(FaultKind::UnboundSymbol)),
                    }
                };
                self.write(dst, v);
            }
            Statement::Copy { dst, src } => {
                let v = self.read(src);
                self.write(dst, v);
            }
            Statement::Load { dst, src } => match self.read(src) {
                Value::Cell { module: cm, global } => {
                    let v = self.globals[cm].get(&global).cloned().unwrap_or(Value::Null);
                    self.write(dst, v);
                }
                _ => return Err(self.fault(FaultKind::BadDereference)),
            },
            Statement::Store { dst, src } => match self.read(dst) {
                Value::Cell { module: cm, global } => {
                    let v = self.read(src);
                    self.globals[cm].insert(global, v);
                }
                _ => return Err(self.fault(FaultKind::BadDereference)),
            },
            Statement::Call { target } => match self.bindings.resolve_in(image, module, target) {
                Some(r) => self.enter(r)?,
                None => return Err(self.fault(FaultKind::UnboundSymbol)),
            },
            Statement::ICall { var } => {
                let r = self.callee(self.read(var))?;
                self.record_indirect(&r);
                self.enter(r)?;
            }
            Statement::IJmp { var } => {
                let r = self.callee(self.read(var))?;
                self.record_indirect(&r);
                self.frames.pop();
                self.enter(r)?;
            }
            Statement::VCall { var, slot } => {
                let (vm, type_name) = match self.read(var) {
                    Value::VTable { module, type_name } => (module, type_name),
                    Value::Null => return Err(self.fault(FaultKind::NullIndirectCall)),
                    _ => return Err(self.fault(FaultKind::NotCallable)),
                };
                let Some(entry) = image.modules[vm]
                    .ir
                    .vtable(&type_name)
                    .and_then(|v| v.entries.get(*slot as usize))
                else {
                    return Err(self.fault(FaultKind::BadVTableSlot));
                };
                let Some(r) = self.bindings.resolve_in(image, vm, entry) else {
                    return Err(self.fault(FaultKind::UnboundSymbol));
                };
                self.record_indirect(&r);
                self.enter(r)?;
            }
            Statement::NewObject { dst, type_name } => {
                if image.modules[module].ir.vtable(type_name).is_none() {
                    return Err(self.fault(FaultKind::UnknownType));
                }
                self.write(dst, Value::VTable { module, type_name: type_name.clone() });
            }
            Statement::SpAdj | Statement::Syscall => {}
            Statement::Ret => {
                self.frames.pop();
            }
        }
        Ok(())
    }
}

fn run(
    image: &ProcessImage,
    bindings: &Bindings,
    entry: &SymbolRef,
    step_limit: u64,
    check_traps: bool,
) -> Result<Trace, VmError> {
    if step_limit == 0 {
        return Err(VmError::ZeroStepLimit);
    }
    let defined = image
        .modules
        .get(entry.module)
        .is_some_and(|m| m.ir.function_index(&entry.symbol).is_some());
    if !defined {
        return Err(VmError::BadEntry {
            module: image.modules.get(entry.module).map(|m| m.name().to_string()).unwrap_or_default(),
            function: entry.symbol.clone(),
        });
    }
    let mut m = Machine::new(image, bindings, check_traps);
    let outcome = m.run(entry.clone(), step_limit);
    m.trace.outcome = outcome;
    Ok(m.trace)
}

/// Runs from `entry`, ignoring the code bytes.
pub fn execute(image: &ProcessImage, bindings: &Bindings, entry: &SymbolRef, step_limit: u64) -> Result<Trace, VmError> {
    run(image, bindings, entry, step_limit, false)
}

/// Like [`execute`], but entering a function on a non-executable page or
/// whose first byte is the trap byte ends the run as trapped.
pub fn execute_debloated(
    image: &ProcessImage,
    bindings: &Bindings,
    entry: &SymbolRef,
    step_limit: u64,
) -> Result<Trace, VmError> {
    run(image, bindings, entry, step_limit, true)
}

/// The workloads a process is expected to run: the executable's entry
/// followed by every trained `dlsym` target.
pub fn workloads(image: &ProcessImage, bindings: &Bindings) -> Vec<SymbolRef> {
    let mut out = Vec::new();
    if let Some(e) = image.executable().ir.entry_function() {
        out.push(SymbolRef { module: 0, symbol: e.name.clone() });
    }
    out.extend(bindings.dlsym.values().cloned());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::compile;
    use crate::depgraph::Strategy;
    use crate::loader::{self, LoadOptions, MemorySource};

    fn load_one(text: &str, strategy: Option<Strategy>, debloat: bool) -> loader::Loaded {
        let exe = compile(text, strategy, vec![]).unwrap();
        loader::load(&exe, &MemorySource::default(), &LoadOptions { debloat, ..Default::default() }).unwrap()
    }

    fn main_of(l: &loader::Loaded) -> SymbolRef {
        workloads(&l.image, &l.bindings).remove(0)
    }

    fn names(t: &Trace) -> Vec<&str> {
        t.entered.iter().map(|f| f.function.as_str()).collect()
    }

    #[test]
    fn direct_call() {
        let l = load_one("module exe executable\nfunc main entry { call f\n ret }\nfunc f { ret }", None, false);
        let t = execute(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert_eq!(names(&t), vec!["main", "f"]);
        assert_eq!(t.outcome, Outcome::Completed);
    }

    #[test]
    fn global_held_code_address() {
        let l = load_one(
            "module exe executable\nglobal w = &stdout_write\nfunc stdout_write strong local { ret }\n\
             func close_file strong exported { p = w\n icall p\n ret }\nfunc main entry { call close_file\n ret }",
            None,
            false,
        );
        let t = execute(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert_eq!(t.indirect_targets.len(), 1);
        assert_eq!(t.indirect_targets[0].target.function, "stdout_write");
        assert_eq!(t.indirect_targets[0].site.function, "close_file");
    }

    #[test]
    fn vtable_slot_bounds() {
        let l = load_one(
            "module exe executable\nvtable S { a, b }\nfunc a { ret }\nfunc b { ret }\n\
             func main entry { o = new S\n vcall o, 5\n ret }",
            None,
            false,
        );
        let t = execute(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert!(matches!(t.outcome, Outcome::Fault { fault: FaultKind::BadVTableSlot, .. }));
    }

    #[test]
    fn faults_and_limits() {
        let l = load_one("module exe executable\nfunc main entry { icall p\n ret }", None, false);
        let t = execute(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert!(matches!(t.outcome, Outcome::Fault { fault: FaultKind::NullIndirectCall, .. }));

        let l = load_one("module exe executable\nfunc main entry { call main\n ret }", None, false);
        let t = execute(&l.image, &l.bindings, &main_of(&l), 50).unwrap();
        assert_eq!(t.outcome, Outcome::LimitExceeded);
        assert_eq!(t.steps, 50);
        assert!(execute(&l.image, &l.bindings, &main_of(&l), 0).is_err());
    }

    #[test]
    fn memory_through_cells() {
        let l = load_one(
            "module exe executable\nglobal g\nfunc t { ret }\n\
             func main entry { a = &t\n c = &g\n *c = a\n d = *c\n icall d\n e = g\n ijmp e\n}",
            None,
            false,
        );
        let t = execute(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert_eq!(names(&t), vec!["main", "t", "t"]);
        assert_eq!(t.outcome, Outcome::Completed);
    }

    #[test]
    fn debloated_run_matches_original() {
        let text = "module exe executable\nfunc main entry { p = &f\n icall p\n ret }\nfunc f { ret }\nfunc dead { syscall\n ret }";
        let before = load_one(text, Some(Strategy::Localized), false);
        let after = load_one(text, Some(Strategy::Localized), true);
        assert_eq!(after.report.removed_functions, 1);
        let t0 = execute(&before.image, &before.bindings, &main_of(&before), 100).unwrap();
        let t1 = execute_debloated(&after.image, &after.bindings, &main_of(&after), 100).unwrap();
        assert_eq!(t0, t1);
    }

    #[test]
    fn removed_live_function_traps() {
        let text = "module exe executable\nfunc main entry { call f\n ret }\nfunc f { ret }";
        let mut l = load_one(text, Some(Strategy::Localized), true);
        let (off, size) = l.image.modules[0].function_span("f").unwrap();
        l.image.modules[0].memory[off..off + size].fill(opcode::TRAP);
        let t = execute_debloated(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert_eq!(
            t.outcome,
            Outcome::Trapped {
                function: FunctionId { module: "exe".into(), function: "f".into() },
                reason: TrapReason::IllegalInstruction
            }
        );
        // The plain interpreter does not look at code bytes.
        assert_eq!(execute(&l.image, &l.bindings, &main_of(&l), 100).unwrap().outcome, Outcome::Completed);
    }

    #[test]
    fn nx_page_check_precedes_byte_check() {
        let text = "module exe executable\nfunc main entry { call f\n ret }\nfunc f { ret }";
        let mut l = load_one(text, Some(Strategy::Localized), true);
        l.image.modules[0].pages[0] = PageState::Nx;
        let t = execute_debloated(&l.image, &l.bindings, &main_of(&l), 100).unwrap();
        assert!(matches!(t.outcome, Outcome::Trapped { reason: TrapReason::Nx, .. }));
    }
}
