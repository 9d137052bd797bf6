// SPDX-License-Identifier: Apache-2.0

//! The piece-wise loader: pre-load the module tree, relocate `.dep`
//! sections, pre-bind every undefined symbol, compute the retained set and
//! remove everything else.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mir::{self, opcode, Module};
use crate::pwof::{self, Definedness, DepSection, ObjectFile, PwofError, SymBinding, TrainingKind};

pub const DEFAULT_PAGE_SIZE: u64 = 4096;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("module `{name}` needed by `{requester}` not found")]
    ModuleNotFound { name: String, requester: String },
    #[error("unresolved symbol `{symbol}` requested by `{requester}`")]
    UnresolvedSymbol { symbol: String, requester: String },
    #[error("module `{module}`: {source}")]
    Format { module: String, source: PwofError },
    #[error("module `{0}` carries no IR body")]
    MissingBody(String),
    #[error("`{0}` is not an executable module")]
    NotExecutable(String),
    #[error("page size {0} is not a positive power of two")]
    BadPageSize(u64),
    #[error("reading `{path}`: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Where the loader finds modules named in `needed` lists and training records.
pub trait ModuleSource {
    /// Returns the raw bytes of the named module, or `None` if absent.
    fn fetch(&self, name: &str) -> Result<Option<Vec<u8>>, LoadError>;
}

/// Looks up `<dir>/<name>.pwof`, then `<dir>/<name>`, in each directory.
#[derive(Debug, Clone, Default)]
pub struct SearchPath(pub Vec<PathBuf>);

impl ModuleSource for SearchPath {
    fn fetch(&self, name: &str) -> Result<Option<Vec<u8>>, LoadError> {
        for dir in &self.0 {
            for candidate in [dir.join(format!("{name}.pwof")), dir.join(name)] {
                if candidate.is_file() {
                    return std::fs::read(&candidate)
                        .map(Some)
                        .map_err(|source| LoadError::Io { path: candidate, source });
                }
            }
        }
        Ok(None)
    }
}

/// In-memory modules keyed by name.
#[derive(Debug, Clone, Default)]
pub struct MemorySource(pub BTreeMap<String, Vec<u8>>);

impl MemorySource {
    pub fn insert(&mut self, obj: &ObjectFile) {
        self.0.insert(obj.name.clone(), obj.to_bytes());
    }
}

impl ModuleSource for MemorySource {
    fn fetch(&self, name: &str) -> Result<Option<Vec<u8>>, LoadError> {
        Ok(self.0.get(name).cloned())
    }
}

pub fn read_object_file(path: &Path) -> Result<ObjectFile, LoadError> {
    let bytes = std::fs::read(path).map_err(|source| LoadError::Io { path: path.to_path_buf(), source })?;
    pwof::read_module(&bytes).map_err(|source| LoadError::Format { module: path.display().to_string(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageState {
    Untouched,
    CowWritten,
    Nx,
}

#[derive(Debug, Clone)]
pub struct LoadedModule {
    pub object: ObjectFile,
    pub ir: Module,
    pub base: u64,
    /// Private copy of the code, the target of trap-byte overwrites.
    pub memory: Vec<u8>,
    /// Relocated `.dep`, if the module is piece-wise.
    pub dep: Option<DepSection>,
    pub pages: Vec<PageState>,
}

impl LoadedModule {
    pub fn name(&self) -> &str {
        &self.object.name
    }

    pub fn is_piecewise(&self) -> bool {
        self.dep.is_some()
    }

    /// Offset and size of a defined function within the module's code.
    pub fn function_span(&self, name: &str) -> Option<(usize, usize)> {
        self.object
            .symbol(name)
            .filter(|s| s.is_defined())
            .map(|s| (s.value as usize, s.size as usize))
    }
}

#[derive(Debug, Clone)]
pub struct ProcessImage {
    /// Load order; the executable is first.
    pub modules: Vec<LoadedModule>,
    pub page_size: u64,
}

impl ProcessImage {
    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.name() == name)
    }

    pub fn executable(&self) -> &LoadedModule {
        &self.modules[0]
    }

    pub fn load_order(&self) -> Vec<&str> {
        self.modules.iter().map(LoadedModule::name).collect()
    }
}

fn decode(name: &str, bytes: &[u8]) -> Result<(ObjectFile, Module), LoadError> {
    let object = pwof::read_module(bytes).map_err(|source| LoadError::Format { module: name.to_string(), source })?;
    let ir = object
        .module()
        .ok_or_else(|| LoadError::MissingBody(object.name.clone()))?
        .map_err(|source| LoadError::Format { module: name.to_string(), source })?;
    Ok((object, ir))
}

/// Breadth-first traversal of `needed` lists from the executable, first
/// occurrence wins; the executable's trained `dlopen` modules are queued
/// after the static dependencies. Bases are assigned sequentially on page
/// boundaries, every module occupying at least one page.
pub fn preload(exe: &ObjectFile, source: &dyn ModuleSource, page_size: u64) -> Result<ProcessImage, LoadError> {
    if page_size == 0 || !page_size.is_power_of_two() {
        return Err(LoadError::BadPageSize(page_size));
    }
    if !exe.is_executable {
        return Err(LoadError::NotExecutable(exe.name.clone()));
    }
    let exe_ir = exe
        .module()
        .ok_or_else(|| LoadError::MissingBody(exe.name.clone()))?
        .map_err(|source| LoadError::Format { module: exe.name.clone(), source })?;

    let mut loaded = vec![(exe.clone(), exe_ir)];
    let mut visited: BTreeSet<String> = BTreeSet::from([exe.name.clone()]);
    let mut queue: VecDeque<(String, String)> = VecDeque::new();
    for n in &exe.needed {
        if visited.insert(n.clone()) {
            queue.push_back((n.clone(), exe.name.clone()));
        }
    }
    let mut dlopens: VecDeque<String> = exe
        .training
        .iter()
        .filter(|t| t.kind == TrainingKind::Dlopen)
        .map(|t| t.module.clone())
        .collect();

    while let Some((name, requester)) = queue.pop_front().or_else(|| {
        while let Some(d) = dlopens.pop_front() {
            if visited.insert(d.clone()) {
                return Some((d, exe.name.clone()));
            }
        }
        None
    }) {
        let bytes = source
            .fetch(&name)?
            .ok_or_else(|| LoadError::ModuleNotFound { name: name.clone(), requester: requester.clone() })?;
        let (object, ir) = decode(&name, &bytes)?;
        for n in &object.needed {
            if visited.insert(n.clone()) {
                queue.push_back((n.clone(), object.name.clone()));
            }
        }
        loaded.push((object, ir));
    }

    let mut modules = Vec::with_capacity(loaded.len());
    let mut next_base = page_size;
    for (object, ir) in loaded {
        let base = next_base;
        let pages = (object.code.len() as u64).div_ceil(page_size);
        next_base = base + pages.max(1) * page_size;
        let dep = match &object.dep {
            Some(d) => Some(
                pwof::relocate_dep(d, base).map_err(|source| LoadError::Format { module: object.name.clone(), source })?,
            ),
            None => None,
        };
        modules.push(LoadedModule {
            memory: object.code.clone(),
            pages: vec![PageState::Untouched; pages as usize],
            object,
            ir,
            base,
            dep,
        });
    }
    Ok(ProcessImage { modules, page_size })
}

/// A resolved definition: module index in load order and symbol name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolRef {
    pub module: usize,
    pub symbol: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    /// (requesting module, undefined symbol) -> definition.
    pub imports: BTreeMap<(usize, String), SymbolRef>,
    /// (dlopened module name, symbol) -> definition, from `dlsym` training.
    pub dlsym: BTreeMap<(String, String), SymbolRef>,
}

impl Bindings {
    pub fn lookup(&self, requester: usize, symbol: &str) -> Option<&SymbolRef> {
        self.imports.get(&(requester, symbol.to_string()))
    }

    /// Resolves a name as seen from inside `module`: its own definition if
    /// any (intra-module references are never interposed), else its binding.
    pub fn resolve_in(&self, image: &ProcessImage, module: usize, name: &str) -> Option<SymbolRef> {
        if image.modules[module].ir.function_index(name).is_some() {
            return Some(SymbolRef { module, symbol: name.to_string() });
        }
        self.lookup(module, name).cloned()
    }
}

fn find_definition(image: &ProcessImage, symbol: &str) -> Option<SymbolRef> {
    for wanted in [SymBinding::Strong, SymBinding::Weak] {
        for (i, m) in image.modules.iter().enumerate() {
            if m.object.symbols.iter().any(|s| s.name == symbol && s.is_exported() && s.binding == wanted) {
                return Some(SymbolRef { module: i, symbol: symbol.to_string() });
            }
        }
    }
    None
}

/// Pre-binding: each undefined symbol binds to the first strong exported
/// definition in load order, else the first weak one. Trained `dlsym`
/// symbols bind to the named module's exported definition.
pub fn resolve(image: &ProcessImage) -> Result<Bindings, LoadError> {
    let mut b = Bindings::default();
    for (i, m) in image.modules.iter().enumerate() {
        for s in m.object.undefined_symbols() {
            let def = find_definition(image, &s.name).ok_or_else(|| LoadError::UnresolvedSymbol {
                symbol: s.name.clone(),
                requester: m.name().to_string(),
            })?;
            b.imports.insert((i, s.name.clone()), def);
        }
    }
    let exe = image.executable();
    for t in exe.object.training.iter().filter(|t| t.kind == TrainingKind::Dlsym) {
        let unresolved = || LoadError::UnresolvedSymbol { symbol: t.symbol.clone(), requester: exe.name().to_string() };
        let module = image.module_index(&t.module).ok_or_else(unresolved)?;
        if !image.modules[module].object.symbol(&t.symbol).is_some_and(|s| s.is_exported()) {
            return Err(unresolved());
        }
        b.dlsym
            .insert((t.module.clone(), t.symbol.clone()), SymbolRef { module, symbol: t.symbol.clone() });
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Root,
    DepClosure,
    RequiredGlobal,
    Asm,
    Training,
    NoDepModule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetentionDiagnostic {
    /// A retained function of a piece-wise module has no `.dep` record; its
    /// direct calls are recovered from the code.
    ConservativeRetention { module: String, function: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RetainedSet {
    /// Per module in load order: retained function -> first reason.
    pub modules: Vec<BTreeMap<String, Reason>>,
    pub diagnostics: Vec<RetentionDiagnostic>,
}

impl RetainedSet {
    pub fn contains(&self, module: usize, function: &str) -> bool {
        self.modules.get(module).is_some_and(|m| m.contains_key(function))
    }

    pub fn names(&self, module: usize) -> BTreeSet<&str> {
        self.modules[module].keys().map(String::as_str).collect()
    }
}

/// Roots of the program itself: the executable's entry (or every function
/// of a `.dep`-less executable) and trained `dlsym` targets.
pub fn program_roots(image: &ProcessImage, bindings: &Bindings) -> Vec<(SymbolRef, Reason)> {
    let exe = image.executable();
    let mut roots = Vec::new();
    if exe.is_piecewise() {
        if let Some(e) = exe.ir.entry_function() {
            roots.push((SymbolRef { module: 0, symbol: e.name.clone() }, Reason::Root));
        }
    } else {
        for f in &exe.ir.functions {
            roots.push((SymbolRef { module: 0, symbol: f.name.clone() }, Reason::NoDepModule));
        }
    }
    for r in bindings.dlsym.values() {
        roots.push((r.clone(), Reason::Training));
    }
    roots
}

/// Seeds every loaded module contributes regardless of the program:
/// required globals and asm functions of piece-wise modules, and all of a
/// `.dep`-less module.
pub fn module_seeds(image: &ProcessImage, bindings: &Bindings) -> Vec<(SymbolRef, Reason)> {
    let mut seeds = Vec::new();
    for (i, m) in image.modules.iter().enumerate() {
        match &m.dep {
            Some(dep) => {
                for &g in &dep.required_globals {
                    if let Some(r) = symbol_target(image, bindings, i, g) {
                        seeds.push((r, Reason::RequiredGlobal));
                    }
                }
                for s in m.object.symbols.iter().filter(|s| s.defined == Definedness::DefinedAsm) {
                    seeds.push((SymbolRef { module: i, symbol: s.name.clone() }, Reason::Asm));
                }
            }
            None if i == 0 => {}
            None => {
                for f in &m.ir.functions {
                    seeds.push((SymbolRef { module: i, symbol: f.name.clone() }, Reason::NoDepModule));
                }
            }
        }
    }
    seeds
}

/// Maps a symbol-table index of module `m` to a definition: itself when
/// defined, else through the bindings.
fn symbol_target(image: &ProcessImage, bindings: &Bindings, m: usize, index: u32) -> Option<SymbolRef> {
    let sym = image.modules[m].object.symbols.get(index as usize)?;
    if sym.is_defined() {
        Some(SymbolRef { module: m, symbol: sym.name.clone() })
    } else {
        bindings.lookup(m, &sym.name).cloned()
    }
}

/// Direct-call targets decoded from a function's machine code.
fn decoded_calls(module: &LoadedModule, function: &str) -> Vec<u32> {
    let Some((off, size)) = module.function_span(function) else { return Vec::new() };
    module.object.code[off..off + size]
        .chunks_exact(mir::INSN_SIZE)
        .filter(|insn| insn[0] == opcode::CALL)
        .map(|insn| u32::from(u16::from_le_bytes([insn[1], insn[2]])))
        .collect()
}

/// Closure of `seeds` over `.dep` records and bindings.
pub fn closure(
    image: &ProcessImage,
    bindings: &Bindings,
    seeds: impl IntoIterator<Item = (SymbolRef, Reason)>,
) -> RetainedSet {
    let mut set = RetainedSet { modules: vec![BTreeMap::new(); image.modules.len()], diagnostics: Vec::new() };
    let mut work: VecDeque<SymbolRef> = VecDeque::new();
    let retain = |r: SymbolRef, why: Reason, set: &mut RetainedSet, work: &mut VecDeque<SymbolRef>| {
        if let std::collections::btree_map::Entry::Vacant(e) = set.modules[r.module].entry(r.symbol.clone()) {
            e.insert(why);
            work.push_back(r);
        }
    };
    for (r, why) in seeds {
        retain(r, why, &mut set, &mut work);
    }
    while let Some(r) = work.pop_front() {
        let m = &image.modules[r.module];
        let Some(dep) = &m.dep else {
            // Everything in a `.dep`-less module is live, so are its imports.
            for s in m.object.undefined_symbols() {
                if let Some(t) = bindings.lookup(r.module, &s.name) {
                    retain(t.clone(), Reason::DepClosure, &mut set, &mut work);
                }
            }
            continue;
        };
        let Some(index) = m.object.symbol_index(&r.symbol) else { continue };
        let targets: Vec<u32> = match dep.record(index as u32) {
            Some(rec) => rec.deps.iter().map(|d| d.index).collect(),
            None => {
                if m.object.symbols[index].defined != Definedness::DefinedAsm {
                    set.diagnostics.push(RetentionDiagnostic::ConservativeRetention {
                        module: m.name().to_string(),
                        function: r.symbol.clone(),
                    });
                }
                decoded_calls(m, &r.symbol)
            }
        };
        for t in targets {
            if let Some(target) = symbol_target(image, bindings, r.module, t) {
                retain(target, Reason::DepClosure, &mut set, &mut work);
            }
        }
    }
    set
}

pub fn compute_retained(image: &ProcessImage, bindings: &Bindings) -> RetainedSet {
    let mut seeds = program_roots(image, bindings);
    seeds.extend(module_seeds(image, bindings));
    closure(image, bindings, seeds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub module: String,
    pub piecewise: bool,
    pub base: u64,
    pub total_functions: usize,
    pub removed_functions: usize,
    pub total_bytes: usize,
    pub removed_bytes: usize,
    pub total_pages: usize,
    pub nx_pages: usize,
    pub cow_pages: usize,
    pub untouched_pages: usize,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DebloatReport {
    pub page_size: u64,
    pub modules: Vec<ModuleReport>,
    pub total_functions: usize,
    pub removed_functions: usize,
    pub total_instructions: usize,
    pub removed_instructions: usize,
    pub nx_pages: usize,
    pub cow_pages: usize,
    pub function_reduction_pct: f64,
    pub instruction_reduction_pct: f64,
}

impl DebloatReport {
    fn finish(page_size: u64, modules: Vec<ModuleReport>) -> Self {
        let mut r = DebloatReport { page_size, ..Default::default() };
        for m in &modules {
            r.total_functions += m.total_functions;
            r.removed_functions += m.removed_functions;
            r.total_instructions += m.total_bytes / mir::INSN_SIZE;
            r.removed_instructions += m.removed_bytes / mir::INSN_SIZE;
            r.nx_pages += m.nx_pages;
            r.cow_pages += m.cow_pages;
        }
        r.function_reduction_pct = pct(r.removed_functions, r.total_functions);
        r.instruction_reduction_pct = pct(r.removed_instructions, r.total_instructions);
        r.modules = modules;
        r
    }
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 * 100.0 / whole as f64
    }
}

fn module_report(m: &LoadedModule) -> ModuleReport {
    ModuleReport {
        module: m.name().to_string(),
        piecewise: m.is_piecewise(),
        base: m.base,
        total_functions: m.ir.functions.len(),
        total_bytes: m.object.code.len(),
        total_pages: m.pages.len(),
        untouched_pages: m.pages.len(),
        ..Default::default()
    }
}

/// Report for a loader that does not debloat: every count zero.
pub fn no_debloat_report(image: &ProcessImage) -> DebloatReport {
    DebloatReport::finish(image.page_size, image.modules.iter().map(module_report).collect())
}

/// Removes every non-retained function of piece-wise modules. Pages whose
/// code is entirely dead become non-executable without being written; the
/// remaining dead bytes are overwritten with the trap byte, which marks
/// their pages copy-on-write.
pub fn debloat(image: &mut ProcessImage, retained: &RetainedSet) -> DebloatReport {
    let page = image.page_size as usize;
    let mut reports = Vec::with_capacity(image.modules.len());
    for (mi, m) in image.modules.iter_mut().enumerate() {
        let mut report = module_report(m);
        if !m.is_piecewise() {
            reports.push(report);
            continue;
        }
        let dead: Vec<(String, usize, usize)> = m
            .ir
            .functions
            .iter()
            .filter(|f| !retained.contains(mi, &f.name))
            .filter_map(|f| m.function_span(&f.name).map(|(o, s)| (f.name.clone(), o, s)))
            .collect();
        let len = m.memory.len();
        let mut is_dead = vec![false; len];
        for (_, off, size) in &dead {
            is_dead[*off..off + size].iter_mut().for_each(|b| *b = true);
        }
        for (p, state) in m.pages.iter_mut().enumerate() {
            let range = p * page..((p + 1) * page).min(len);
            if is_dead[range].iter().all(|&d| d) {
                *state = PageState::Nx;
            }
        }
        for (name, off, size) in &dead {
            for addr in *off..off + size {
                let p = addr / page;
                if m.pages[p] != PageState::Nx {
                    m.memory[addr] = opcode::TRAP;
                    m.pages[p] = PageState::CowWritten;
                }
            }
            report.removed_functions += 1;
            report.removed_bytes += size;
            report.removed.push(name.clone());
        }
        report.nx_pages = m.pages.iter().filter(|s| **s == PageState::Nx).count();
        report.cow_pages = m.pages.iter().filter(|s| **s == PageState::CowWritten).count();
        report.untouched_pages = report.total_pages - report.nx_pages - report.cow_pages;
        reports.push(report);
    }
    DebloatReport::finish(image.page_size, reports)
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub page_size: u64,
    pub debloat: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { page_size: DEFAULT_PAGE_SIZE, debloat: true }
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub image: ProcessImage,
    pub bindings: Bindings,
    pub retained: Option<RetainedSet>,
    pub report: DebloatReport,
}

/// The whole loader workflow.
pub fn load(exe: &ObjectFile, source: &dyn ModuleSource, opts: &LoadOptions) -> Result<Loaded, LoadError> {
    let mut image = preload(exe, source, opts.page_size)?;
    let bindings = resolve(&image)?;
    if !opts.debloat {
        let report = no_debloat_report(&image);
        return Ok(Loaded { image, bindings, retained: None, report });
    }
    let retained = compute_retained(&image, &bindings);
    let report = debloat(&mut image, &retained);
    Ok(Loaded { image, bindings, retained: Some(retained), report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub n: usize,
}

impl TimingStats {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean_ms = if n == 0 { 0.0 } else { samples.iter().sum::<f64>() / n as f64 };
        let max_ms = samples.iter().copied().fold(0.0, f64::max);
        TimingStats { mean_ms, max_ms, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadTimeReport {
    /// preload + resolve.
    pub default_loader: TimingStats,
    /// preload + resolve + retention + debloat.
    pub piecewise_loader: TimingStats,
    pub overhead_ms: f64,
    /// Mean paired difference (piece-wise minus default) is non-negative.
    pub disabled_le_enabled: bool,
    /// The difference is negative but within three standard errors.
    pub within_noise: bool,
}

impl LoadTimeReport {
    pub fn sanity_holds(&self) -> bool {
        self.disabled_le_enabled || self.within_noise
    }
}

/// Times both loader variants on identical inputs, alternating runs so that
/// system noise affects both alike.
pub fn measure_load_time(
    exe: &ObjectFile,
    source: &dyn ModuleSource,
    repetitions: usize,
    page_size: u64,
) -> Result<LoadTimeReport, LoadError> {
    let mut default = Vec::with_capacity(repetitions);
    let mut piecewise = Vec::with_capacity(repetitions);
    for _ in 0..repetitions.max(1) {
        let t = Instant::now();
        let image = preload(exe, source, page_size)?;
        let b = resolve(&image)?;
        std::hint::black_box((&image, &b));
        default.push(t.elapsed().as_secs_f64() * 1e3);

        let t = Instant::now();
        let mut image = preload(exe, source, page_size)?;
        let b = resolve(&image)?;
        let retained = compute_retained(&image, &b);
        let report = debloat(&mut image, &retained);
        std::hint::black_box(&report);
        piecewise.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let diffs: Vec<f64> = piecewise.iter().zip(&default).map(|(p, d)| p - d).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let stderr = (var / n).sqrt();
    let default_loader = TimingStats::from_samples(&default);
    let piecewise_loader = TimingStats::from_samples(&piecewise);
    Ok(LoadTimeReport {
        overhead_ms: piecewise_loader.mean_ms - default_loader.mean_ms,
        default_loader,
        piecewise_loader,
        disabled_le_enabled: mean >= 0.0,
        within_noise: mean < 0.0 && -mean <= 3.0 * stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::compile;
    use crate::depgraph::Strategy;
    use crate::pwof::TrainingRecord;

    fn system(mods: &[(&str, Option<Strategy>)]) -> (ObjectFile, MemorySource) {
        let mut src = MemorySource::default();
        let mut exe = None;
        for (text, s) in mods {
            let obj = compile(text, *s, vec![]).unwrap();
            if obj.is_executable {
                exe = Some(obj);
            } else {
                src.insert(&obj);
            }
        }
        (exe.expect("executable"), src)
    }

    #[test]
    fn bfs_load_order() {
        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nfunc main entry { ret }", None),
            ("module a\nneeds b c\nfunc fa { ret }", None),
            ("module b\nfunc fb { ret }", None),
            ("module c\nneeds b\nfunc fc { ret }", None),
        ]);
        let img = preload(&exe, &src, 4096).unwrap();
        assert_eq!(img.load_order(), vec!["exe", "a", "b", "c"]);
        let bases: Vec<u64> = img.modules.iter().map(|m| m.base).collect();
        assert_eq!(bases, vec![4096, 8192, 12288, 16384]);
    }

    #[test]
    fn cycles_and_missing_modules() {
        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nfunc main entry { ret }", None),
            ("module a\nneeds b\nfunc fa { ret }", None),
            ("module b\nneeds a exe\nfunc fb { ret }", None),
        ]);
        assert_eq!(preload(&exe, &src, 4096).unwrap().load_order(), vec!["exe", "a", "b"]);

        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nfunc main entry { ret }", None),
            ("module a\nneeds ghost\nfunc fa { ret }", None),
        ]);
        match preload(&exe, &src, 4096) {
            Err(LoadError::ModuleNotFound { name, requester }) => {
                assert_eq!((name.as_str(), requester.as_str()), ("ghost", "a"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_dlopen_is_preloaded() {
        let mut src = MemorySource::default();
        src.insert(&compile("module plugin\nneeds dep\nfunc init strong exported { ret }", None, vec![]).unwrap());
        let dep = compile("module dep\nfunc d { ret }", None, vec![]).unwrap();
        src.insert(&dep);
        let exe = compile(
            "module exe executable\nfunc main entry { ret }",
            Some(Strategy::Localized),
            vec![TrainingRecord::dlopen("plugin"), TrainingRecord::dlsym("plugin", "init")],
        )
        .unwrap();
        let img = preload(&exe, &src, 4096).unwrap();
        assert_eq!(img.load_order(), vec!["exe", "plugin", "dep"]);
        let b = resolve(&img).unwrap();
        assert_eq!(b.dlsym[&("plugin".into(), "init".into())], SymbolRef { module: 1, symbol: "init".into() });
    }

    #[test]
    fn no_needs_and_page_size_checks() {
        let (exe, src) = system(&[("module exe executable\nfunc main entry { ret }", None)]);
        assert_eq!(preload(&exe, &src, 4096).unwrap().load_order(), vec!["exe"]);
        assert!(matches!(preload(&exe, &src, 3000), Err(LoadError::BadPageSize(3000))));
        let lib = compile("module l\nfunc f { ret }", None, vec![]).unwrap();
        assert!(matches!(preload(&lib, &src, 4096), Err(LoadError::NotExecutable(_))));
    }

    #[test]
    fn dep_sections_are_relocated_to_base() {
        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nfunc main entry { ret }", Some(Strategy::Localized)),
            ("module a\nfunc f { ret }\nfunc g { ret }", Some(Strategy::Localized)),
        ]);
        let img = preload(&exe, &src, 4096).unwrap();
        let dep = img.modules[1].dep.as_ref().unwrap();
        assert!(dep.relocated);
        assert_eq!(dep.records[1].location as u64, img.modules[1].base + 4);
    }

    #[test]
    fn strong_beats_weak_even_when_later() {
        let (exe, src) = system(&[
            (
                "module exe executable\nneeds libw libu\nimport use\nfunc calloc strong exported { ret }\nfunc main entry { call use\n ret }",
                Some(Strategy::Localized),
            ),
            ("module libw\nfunc calloc weak exported { ret }", Some(Strategy::Localized)),
            ("module libu\nimport calloc\nfunc use strong exported { call calloc\n ret }", Some(Strategy::Localized)),
        ]);
        let img = preload(&exe, &src, 4096).unwrap();
        let b = resolve(&img).unwrap();
        assert_eq!(b.lookup(2, "calloc"), Some(&SymbolRef { module: 0, symbol: "calloc".into() }));

        let (exe, src) = system(&[
            ("module exe executable\nneeds w s\nimport f\nfunc main entry { call f\n ret }", None),
            ("module w\nfunc f weak exported { ret }", None),
            ("module s\nfunc f strong exported { ret }", None),
        ]);
        let img = preload(&exe, &src, 4096).unwrap();
        assert_eq!(resolve(&img).unwrap().lookup(0, "f").unwrap().module, 2);
    }

    #[test]
    fn local_symbols_are_invisible() {
        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nimport f\nfunc main entry { call f\n ret }", None),
            ("module a\nfunc f strong local { ret }", None),
        ]);
        let img = preload(&exe, &src, 4096).unwrap();
        assert!(matches!(resolve(&img), Err(LoadError::UnresolvedSymbol { .. })));
    }

    #[test]
    fn page_accounting() {
        // 1024 four-byte functions fill exactly one 4096-byte page.
        let mut text = String::from("module a\n");
        for i in 0..1024 {
            text.push_str(&format!("func f{i} strong exported {{ ret }}\n"));
        }
        text.push_str("func live strong exported { syscall\n ret }\nfunc dead2 { spadj\n ret }\n");
        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nimport live\nfunc main entry { call live\n ret }", Some(Strategy::Localized)),
            (&text, Some(Strategy::Localized)),
        ]);
        let out = load(&exe, &src, &LoadOptions::default()).unwrap();
        let a = &out.image.modules[1];
        assert_eq!(a.pages, vec![PageState::Nx, PageState::CowWritten]);
        assert!(a.memory[..4096].iter().all(|&b| b == 7 || b == 0), "nx page not written");
        assert_eq!(&a.memory[4096 + 8..4096 + 16], &[opcode::TRAP; 8]);
        assert_eq!(a.memory[4096], opcode::SYSCALL);
        let r = &out.report.modules[1];
        assert_eq!((r.removed_functions, r.removed_bytes), (1025, 4104));
        assert_eq!((r.nx_pages, r.cow_pages, r.untouched_pages), (1, 1, 0));
    }

    #[test]
    fn everything_retained_reports_zero() {
        let (exe, src) = system(&[
            ("module exe executable\nneeds a\nimport f\nfunc main entry { call f\n ret }", Some(Strategy::Localized)),
            ("module a\nfunc f strong exported { ret }", Some(Strategy::Localized)),
        ]);
        let out = load(&exe, &src, &LoadOptions::default()).unwrap();
        assert_eq!(out.report.removed_functions, 0);
        assert_eq!(out.report.function_reduction_pct, 0.0);
        assert!(out.image.modules.iter().all(|m| m.pages.iter().all(|p| *p == PageState::Untouched)));
    }

    #[test]
    fn missing_record_is_conservative() {
        let (exe, src) = system(&[(
            "module exe executable\nfunc main entry { call g\n ret }\nfunc g { call h\n ret }\nfunc h { ret }",
            Some(Strategy::Localized),
        )]);
        let mut exe = exe;
        exe.dep.as_mut().unwrap().records.retain(|r| r.symbol != 1);
        let img = preload(&exe, &src, 4096).unwrap();
        let b = resolve(&img).unwrap();
        let r = compute_retained(&img, &b);
        assert!(r.contains(0, "h"));
        assert_eq!(r.diagnostics.len(), 1);
    }

    #[test]
    fn timing_schema() {
        let (exe, src) = system(&[("module exe executable\nfunc main entry { ret }", Some(Strategy::Localized))]);
        let t = measure_load_time(&exe, &src, 1, 4096).unwrap();
        assert_eq!((t.default_loader.n, t.piecewise_loader.n), (1, 1));
        let json = serde_json::to_value(&t.default_loader).unwrap();
        for k in ["mean_ms", "max_ms", "n"] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }
}
