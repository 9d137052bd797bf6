// SPDX-License-Identifier: Apache-2.0

//! The piece-wise object format (PWOF).
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! "PWOF" | version u16 = 1 | flags u16
//! name: u16 len + bytes
//! needed: u16 count + names
//! symbols: u32 count + { name, binding u8, defined u8, value u32, size u32 }
//! code: u32 len + bytes
//! vtables: u16 count + { type name, u16 entry count, u32 symbol index * n }
//! training: u16 count + { kind u8, module name, symbol name }
//! [.dep]  "PWDP" | version u16 | strategy u8 | relocated u8
//!         | u32 count + u32 required symbol indices
//!         | u32 count + { symbol u32, location u32, size u32,
//!                         u32 dep count + { kind u8, index u32 } }
//! [body]  "PWIR" | u32 len + IR text
//! ```
//!
//! Flags: bit0 has `.dep`, bit1 executable, bit2 has body. The body section
//! carries the module's IR so the reference interpreter can execute it;
//! readers that stop after the training records see a plain module.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::{DepGraph, Strategy, TargetKind};
use crate::mir::{self, Binding, CodeImage, Module};

pub const MAGIC: &[u8; 4] = b"PWOF";
pub const DEP_MAGIC: &[u8; 4] = b"PWDP";
pub const BODY_MAGIC: &[u8; 4] = b"PWIR";
pub const VERSION: u16 = 1;
pub const DEP_VERSION: u16 = 1;

pub const FLAG_HAS_DEP: u16 = 1 << 0;
pub const FLAG_EXECUTABLE: u16 = 1 << 1;
pub const FLAG_HAS_BODY: u16 = 1 << 2;
const KNOWN_FLAGS: u16 = FLAG_HAS_DEP | FLAG_EXECUTABLE | FLAG_HAS_BODY;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PwofError {
    #[error("bad magic in {section} section")]
    BadMagic { section: &'static str },
    #[error("unsupported {section} version {version}")]
    UnsupportedVersion { section: &'static str, version: u16 },
    #[error("unknown flag bits {0:#06x}")]
    UnknownFlags(u16),
    #[error("truncated {0} section")]
    TruncatedSection(&'static str),
    #[error("{what} index {index} out of range (table size {len})")]
    IndexOutOfRange { what: &'static str, index: u32, len: usize },
    #[error("invalid {what} value {value}")]
    InvalidEnum { what: &'static str, value: u8 },
    #[error("invalid UTF-8 in {0}")]
    BadString(&'static str),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("malformed training records: {0}")]
    MalformedTraining(String),
    #[error("{0} trailing bytes after last section")]
    TrailingBytes(usize),
    #[error("embedded IR body: {0}")]
    Body(#[from] mir::MirError),
    #[error(".dep section already relocated")]
    AlreadyRelocated,
    #[error("relocated location overflows 32 bits")]
    RelocationOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymBinding {
    Local = 0,
    Strong = 1,
    Weak = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definedness {
    Undefined = 0,
    Defined = 1,
    DefinedAsm = 2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub name: String,
    pub binding: SymBinding,
    pub defined: Definedness,
    pub value: u32,
    pub size: u32,
}

impl SymbolEntry {
    pub fn is_defined(&self) -> bool {
        self.defined != Definedness::Undefined
    }

    /// Visible to other modules during symbol resolution.
    pub fn is_exported(&self) -> bool {
        self.is_defined() && self.binding != SymBinding::Local
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VTableEntry {
    pub type_name: String,
    pub entries: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    Dlopen = 0,
    Dlsym = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub kind: TrainingKind,
    pub module: String,
    /// Empty for `dlopen`.
    pub symbol: String,
}

impl TrainingRecord {
    pub fn dlopen(module: impl Into<String>) -> Self {
        TrainingRecord { kind: TrainingKind::Dlopen, module: module.into(), symbol: String::new() }
    }

    pub fn dlsym(module: impl Into<String>, symbol: impl Into<String>) -> Self {
        TrainingRecord { kind: TrainingKind::Dlsym, module: module.into(), symbol: symbol.into() }
    }
}

/// Every `dlsym` record must name a module that also has a `dlopen` record,
/// and `dlopen` records carry no symbol.
pub fn check_training(records: &[TrainingRecord]) -> Result<(), PwofError> {
    let opened: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.kind == TrainingKind::Dlopen)
        .map(|r| r.module.as_str())
        .collect();
    for r in records {
        match r.kind {
            TrainingKind::Dlopen if !r.symbol.is_empty() => {
                return Err(PwofError::MalformedTraining(format!(
                    "dlopen of `{}` carries symbol `{}`",
                    r.module, r.symbol
                )))
            }
            TrainingKind::Dlsym if !opened.contains(r.module.as_str()) => {
                return Err(PwofError::MalformedTraining(format!(
                    "dlsym `{}` names module `{}` that was never dlopened",
                    r.symbol, r.module
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepRef {
    pub kind: TargetKind,
    /// Symbol table index: a defined function for `Local`, an undefined
    /// symbol for `Import`.
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepRecord {
    pub symbol: u32,
    /// File-relative until relocated, then absolute.
    pub location: u32,
    pub size: u32,
    pub deps: Vec<DepRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepSection {
    pub strategy: Strategy,
    pub relocated: bool,
    pub required_globals: Vec<u32>,
    pub records: Vec<DepRecord>,
}

impl DepSection {
    /// Encodes a dependency graph against the module's symbol table. Asm
    /// functions get no record: they are marked in the symbol table instead.
    pub fn from_graph(graph: &DepGraph, module: &Module, image: &CodeImage) -> Result<Self, PwofError> {
        let index = |name: &str, kind: TargetKind| -> Result<u32, PwofError> {
            let i = match kind {
                TargetKind::Local => module.function_index(name),
                TargetKind::Import => module
                    .imports
                    .iter()
                    .position(|n| n == name)
                    .map(|i| i + module.functions.len()),
            };
            i.map(|i| i as u32)
                .ok_or_else(|| PwofError::LayoutMismatch(format!("dependency `{name}` is not a {kind:?} symbol")))
        };
        let required_globals = graph
            .required_globals
            .iter()
            .map(|n| {
                let kind = if module.function_index(n).is_some() { TargetKind::Local } else { TargetKind::Import };
                index(n, kind)
            })
            .collect::<Result<BTreeSet<u32>, _>>()?
            .into_iter()
            .collect();
        let mut records = Vec::new();
        for (i, f) in module.functions.iter().enumerate() {
            if f.is_asm {
                continue;
            }
            let span = image
                .span(&f.name)
                .ok_or_else(|| PwofError::LayoutMismatch(format!("no layout for `{}`", f.name)))?;
            let deps = graph
                .deps(&f.name)
                .map(|t| Ok(DepRef { kind: t.kind, index: index(&t.symbol, t.kind)? }))
                .collect::<Result<Vec<_>, PwofError>>()?;
            records.push(DepRecord {
                symbol: i as u32,
                location: span.offset as u32,
                size: span.size as u32,
                deps,
            });
        }
        Ok(DepSection { strategy: graph.strategy, relocated: false, required_globals, records })
    }

    pub fn record(&self, symbol: u32) -> Option<&DepRecord> {
        self.records.iter().find(|r| r.symbol == symbol)
    }
}

/// Adds `base` to every record location, exactly once.
pub fn relocate_dep(dep: &DepSection, base: u64) -> Result<DepSection, PwofError> {
    if dep.relocated {
        return Err(PwofError::AlreadyRelocated);
    }
    let mut out = dep.clone();
    for r in &mut out.records {
        let loc = u64::from(r.location) + base;
        r.location = u32::try_from(loc).map_err(|_| PwofError::RelocationOverflow)?;
    }
    out.relocated = true;
    Ok(out)
}

/// A decoded object file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectFile {
    pub name: String,
    pub is_executable: bool,
    pub needed: Vec<String>,
    pub symbols: Vec<SymbolEntry>,
    pub code: Vec<u8>,
    pub vtables: Vec<VTableEntry>,
    pub training: Vec<TrainingRecord>,
    pub dep: Option<DepSection>,
    pub body: Option<String>,
}

impl ObjectFile {
    pub fn symbol_index(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.name == name)
    }

    pub fn symbol(&self, name: &str) -> Option<&SymbolEntry> {
        self.symbols.iter().find(|s| s.name == name)
    }

    pub fn undefined_symbols(&self) -> impl Iterator<Item = &SymbolEntry> {
        self.symbols.iter().filter(|s| !s.is_defined())
    }

    pub fn defined_functions(&self) -> impl Iterator<Item = &SymbolEntry> {
        self.symbols.iter().filter(|s| s.is_defined())
    }

    pub fn entry_offsets(&self) -> BTreeSet<usize> {
        self.defined_functions().map(|s| s.value as usize).collect()
    }

    /// Parses the embedded IR, if present.
    pub fn module(&self) -> Option<Result<Module, PwofError>> {
        self.body.as_deref().map(|b| Ok(mir::parse_module(b)?))
    }

    pub fn flags(&self) -> u16 {
        let mut f = 0;
        if self.dep.is_some() {
            f |= FLAG_HAS_DEP;
        }
        if self.is_executable {
            f |= FLAG_EXECUTABLE;
        }
        if self.body.is_some() {
            f |= FLAG_HAS_BODY;
        }
        f
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u16(self.flags());
        w.str(&self.name);
        w.u16(self.needed.len() as u16);
        for n in &self.needed {
            w.str(n);
        }
        w.u32(self.symbols.len() as u32);
        for s in &self.symbols {
            w.str(&s.name);
            w.u8(s.binding as u8);
            w.u8(s.defined as u8);
            w.u32(s.value);
            w.u32(s.size);
        }
        w.u32(self.code.len() as u32);
        w.bytes(&self.code);
        w.u16(self.vtables.len() as u16);
        for v in &self.vtables {
            w.str(&v.type_name);
            w.u16(v.entries.len() as u16);
            for &e in &v.entries {
                w.u32(e);
            }
        }
        w.u16(self.training.len() as u16);
        for t in &self.training {
            w.u8(t.kind as u8);
            w.str(&t.module);
            w.str(&t.symbol);
        }
        if let Some(dep) = &self.dep {
            w.bytes(DEP_MAGIC);
            w.u16(DEP_VERSION);
            w.u8(dep.strategy.tag());
            w.u8(dep.relocated as u8);
            w.u32(dep.required_globals.len() as u32);
            for &r in &dep.required_globals {
                w.u32(r);
            }
            w.u32(dep.records.len() as u32);
            for r in &dep.records {
                w.u32(r.symbol);
                w.u32(r.location);
                w.u32(r.size);
                w.u32(r.deps.len() as u32);
                for d in &r.deps {
                    w.u8(match d.kind {
                        TargetKind::Local => 0,
                        TargetKind::Import => 1,
                    });
                    w.u32(d.index);
                }
            }
        }
        if let Some(body) = &self.body {
            w.bytes(BODY_MAGIC);
            w.u32(body.len() as u32);
            w.bytes(body.as_bytes());
        }
        w.0
    }
}

/// Builds the object file for a module, checking that the code layout and
/// the symbol table agree.
pub fn build_object(
    module: &Module,
    image: &CodeImage,
    dep: Option<DepSection>,
    training: Vec<TrainingRecord>,
) -> Result<ObjectFile, PwofError> {
    if image.layout.len() != module.functions.len() {
        return Err(PwofError::LayoutMismatch(format!(
            "{} functions but {} layout entries",
            module.functions.len(),
            image.layout.len()
        )));
    }
    let mut symbols = Vec::with_capacity(module.functions.len() + module.imports.len());
    for (f, (name, span)) in module.functions.iter().zip(&image.layout) {
        if &f.name != name || span.size != f.size() || span.end() > image.bytes.len() {
            return Err(PwofError::LayoutMismatch(format!("function `{}` does not match its layout", f.name)));
        }
        let binding = match (f.exported, f.binding) {
            (false, _) | (_, Binding::Local) => SymBinding::Local,
            (true, Binding::Strong) => SymBinding::Strong,
            (true, Binding::Weak) => SymBinding::Weak,
        };
        symbols.push(SymbolEntry {
            name: f.name.clone(),
            binding,
            defined: if f.is_asm { Definedness::DefinedAsm } else { Definedness::Defined },
            value: span.offset as u32,
            size: span.size as u32,
        });
    }
    for i in &module.imports {
        symbols.push(SymbolEntry {
            name: i.clone(),
            binding: SymBinding::Strong,
            defined: Definedness::Undefined,
            value: 0,
            size: 0,
        });
    }
    let vtables = module
        .vtables
        .iter()
        .map(|v| VTableEntry {
            type_name: v.type_name.clone(),
            entries: v
                .entries
                .iter()
                .map(|e| module.symbol_index(e).expect("validated vtable entry") as u32)
                .collect(),
        })
        .collect();
    check_training(&training)?;
    let obj = ObjectFile {
        name: module.name.clone(),
        is_executable: module.is_executable,
        needed: module.needed.clone(),
        symbols,
        code: image.bytes.clone(),
        vtables,
        training,
        dep,
        body: Some(module.pretty_print()),
    };
    validate(&obj)?;
    Ok(obj)
}

/// Serializes a module; `dep = None` produces a legacy module.
pub fn write_module(
    module: &Module,
    image: &CodeImage,
    dep: Option<DepSection>,
    training: Vec<TrainingRecord>,
) -> Result<Vec<u8>, PwofError> {
    Ok(build_object(module, image, dep, training)?.to_bytes())
}

/// Decodes and validates an object file. Never panics on malformed input.
pub fn read_module(bytes: &[u8]) -> Result<ObjectFile, PwofError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut obj = read_base(&mut r)?;
    let flags = obj.flags_raw;
    if flags & FLAG_HAS_DEP != 0 {
        obj.file.dep = Some(read_dep(&mut r)?);
    }
    if flags & FLAG_HAS_BODY != 0 {
        if r.take(4, "body")? != BODY_MAGIC {
            return Err(PwofError::BadMagic { section: "body" });
        }
        let len = r.u32("body")? as usize;
        let text = std::str::from_utf8(r.take(len, "body")?).map_err(|_| PwofError::BadString("body"))?;
        obj.file.body = Some(text.to_string());
    }
    if r.remaining() != 0 {
        return Err(PwofError::TrailingBytes(r.remaining()));
    }
    validate(&obj.file)?;
    Ok(obj.file)
}

/// Reads only the sections every loader understands, ignoring the `.dep`
/// and body sections and anything after them.
pub fn read_module_legacy(bytes: &[u8]) -> Result<ObjectFile, PwofError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let obj = read_base(&mut r)?.file;
    validate(&obj)?;
    Ok(obj)
}

struct Base {
    file: ObjectFile,
    flags_raw: u16,
}

fn read_base(r: &mut Reader<'_>) -> Result<Base, PwofError> {
    if r.take(4, "header")? != MAGIC {
        return Err(PwofError::BadMagic { section: "header" });
    }
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(PwofError::UnsupportedVersion { section: "header", version });
    }
    let flags = r.u16("header")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(PwofError::UnknownFlags(flags));
    }
    let name = r.str("header")?;
    let n = r.u16("needed")?;
    let mut needed = Vec::new();
    for _ in 0..n {
        needed.push(r.str("needed")?);
    }
    let n = r.u32("symbols")?;
    let mut symbols = Vec::new();
    for _ in 0..n {
        let name = r.str("symbols")?;
        let binding = match r.u8("symbols")? {
            0 => SymBinding::Local,
            1 => SymBinding::Strong,
            2 => SymBinding::Weak,
            value => return Err(PwofError::InvalidEnum { what: "binding", value }),
        };
        let defined = match r.u8("symbols")? {
            0 => Definedness::Undefined,
            1 => Definedness::Defined,
            2 => Definedness::DefinedAsm,
            value => return Err(PwofError::InvalidEnum { what: "defined", value }),
        };
        let value = r.u32("symbols")?;
        let size = r.u32("symbols")?;
        symbols.push(SymbolEntry { name, binding, defined, value, size });
    }
    let len = r.u32("code")? as usize;
    let code = r.take(len, "code")?.to_vec();
    let n = r.u16("vtables")?;
    let mut vtables = Vec::new();
    for _ in 0..n {
        let type_name = r.str("vtables")?;
        let count = r.u16("vtables")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            entries.push(r.u32("vtables")?);
        }
        vtables.push(VTableEntry { type_name, entries });
    }
    let n = r.u16("training")?;
    let mut training = Vec::new();
    for _ in 0..n {
        let kind = match r.u8("training")? {
            0 => TrainingKind::Dlopen,
            1 => TrainingKind::Dlsym,
            value => return Err(PwofError::InvalidEnum { what: "training kind", value }),
        };
        let module = r.str("training")?;
        let symbol = r.str("training")?;
        training.push(TrainingRecord { kind, module, symbol });
    }
    Ok(Base {
        file: ObjectFile {
            name,
            is_executable: flags & FLAG_EXECUTABLE != 0,
            needed,
            symbols,
            code,
            vtables,
            training,
            dep: None,
            body: None,
        },
        flags_raw: flags,
    })
}

fn read_dep(r: &mut Reader<'_>) -> Result<DepSection, PwofError> {
    const S: &str = ".dep";
    if r.take(4, S)? != DEP_MAGIC {
        return Err(PwofError::BadMagic { section: S });
    }
    let version = r.u16(S)?;
    if version != DEP_VERSION {
        return Err(PwofError::UnsupportedVersion { section: S, version });
    }
    let tag = r.u8(S)?;
    let strategy = Strategy::from_tag(tag).ok_or(PwofError::InvalidEnum { what: "strategy", value: tag })?;
    let relocated = match r.u8(S)? {
        0 => false,
        1 => true,
        value => return Err(PwofError::InvalidEnum { what: "relocated", value }),
    };
    let n = r.u32(S)?;
    let mut required_globals = Vec::new();
    for _ in 0..n {
        required_globals.push(r.u32(S)?);
    }
    let n = r.u32(S)?;
    let mut records = Vec::new();
    for _ in 0..n {
        let symbol = r.u32(S)?;
        let location = r.u32(S)?;
        let size = r.u32(S)?;
        let count = r.u32(S)?;
        let mut deps = Vec::new();
        for _ in 0..count {
            let kind = match r.u8(S)? {
                0 => TargetKind::Local,
                1 => TargetKind::Import,
                value => return Err(PwofError::InvalidEnum { what: "dependency kind", value }),
            };
            deps.push(DepRef { kind, index: r.u32(S)? });
        }
        records.push(DepRecord { symbol, location, size, deps });
    }
    Ok(DepSection { strategy, relocated, required_globals, records })
}

fn validate(obj: &ObjectFile) -> Result<(), PwofError> {
    let len = obj.symbols.len();
    let in_range = |what, index: u32| -> Result<&SymbolEntry, PwofError> {
        obj.symbols.get(index as usize).ok_or(PwofError::IndexOutOfRange { what, index, len })
    };
    for s in &obj.symbols {
        let ok = if s.is_defined() {
            u64::from(s.value) + u64::from(s.size) <= obj.code.len() as u64
                && s.size > 0
                && (s.value as usize).is_multiple_of(mir::INSN_SIZE)
                && (s.size as usize).is_multiple_of(mir::INSN_SIZE)
        } else {
            s.value == 0 && s.size == 0
        };
        if !ok {
            return Err(PwofError::LayoutMismatch(format!("symbol `{}` has an invalid range", s.name)));
        }
    }
    for v in &obj.vtables {
        for &e in &v.entries {
            in_range("vtable entry", e)?;
        }
    }
    check_training(&obj.training)?;
    if let Some(dep) = &obj.dep {
        for &g in &dep.required_globals {
            in_range("required symbol", g)?;
        }
        for rec in &dep.records {
            let sym = in_range("dep record symbol", rec.symbol)?;
            if sym.defined != Definedness::Defined {
                return Err(PwofError::LayoutMismatch(format!(
                    "dep record for `{}`, which is not a defined non-asm function",
                    sym.name
                )));
            }
            if !dep.relocated && (rec.location != sym.value || rec.size != sym.size) {
                return Err(PwofError::LayoutMismatch(format!(
                    "dep record for `{}` disagrees with its symbol",
                    sym.name
                )));
            }
            for d in &rec.deps {
                let t = in_range("dependency", d.index)?;
                let consistent = match d.kind {
                    TargetKind::Local => t.is_defined(),
                    TargetKind::Import => !t.is_defined(),
                };
                if !consistent {
                    return Err(PwofError::LayoutMismatch(format!(
                        "dependency `{}` has the wrong kind",
                        t.name
                    )));
                }
            }
        }
    }
    if let Some(m) = obj.module() {
        let m = m?;
        check_body(obj, &m)?;
    }
    Ok(())
}

fn check_body(obj: &ObjectFile, m: &Module) -> Result<(), PwofError> {
    let mismatch = |what: &str| Err(PwofError::LayoutMismatch(format!("IR body disagrees on {what}")));
    if m.name != obj.name || m.is_executable != obj.is_executable || m.needed != obj.needed {
        return mismatch("module header");
    }
    let names: Vec<&str> = m
        .functions
        .iter()
        .map(|f| f.name.as_str())
        .chain(m.imports.iter().map(String::as_str))
        .collect();
    if names.len() != obj.symbols.len() || names.iter().zip(&obj.symbols).any(|(n, s)| *n != s.name) {
        return mismatch("symbol names");
    }
    for (f, s) in m.functions.iter().zip(&obj.symbols) {
        if s.size as usize != f.size() || (s.defined == Definedness::DefinedAsm) != f.is_asm {
            return mismatch("function sizes");
        }
    }
    if m.vtables.len() != obj.vtables.len() {
        return mismatch("vtables");
    }
    Ok(())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], PwofError> {
        if self.remaining() < n {
            return Err(PwofError::TruncatedSection(section));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8, PwofError> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &'static str) -> Result<u16, PwofError> {
        let b = self.take(2, section)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, PwofError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self, section: &'static str) -> Result<String, PwofError> {
        let n = self.u16(section)? as usize;
        let b = self.take(n, section)?;
        std::str::from_utf8(b).map(str::to_string).map_err(|_| PwofError::BadString(section))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::build_depgraph;
    use crate::mir::{lower_code, parse_module};

    fn compile(text: &str, strategy: Option<Strategy>) -> ObjectFile {
        let m = parse_module(text).unwrap();
        let img = lower_code(&m).unwrap();
        let dep = strategy.map(|s| DepSection::from_graph(&build_depgraph(&m, s).unwrap(), &m, &img).unwrap());
        build_object(&m, &img, dep, vec![]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = compile("module m\nfunc f strong exported { ret }", None).to_bytes();
        assert_eq!(&bytes[..4], b"PWOF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), FLAG_HAS_BODY);
        // name "m"
        assert_eq!(&bytes[8..11], &[1, 0, b'm']);
        let obj = read_module(&bytes).unwrap();
        assert_eq!(
            obj.symbols,
            vec![SymbolEntry {
                name: "f".into(),
                binding: SymBinding::Strong,
                defined: Definedness::Defined,
                value: 0,
                size: 4
            }]
        );
        assert_eq!(obj.code, vec![7, 0, 0, 0]);
    }

    #[test]
    fn dep_flag_and_legacy_reader() {
        let obj = compile(
            "module m\nimport sort\nfunc comp { ret }\nfunc foo strong exported { p = &comp\n call sort\n ret }",
            Some(Strategy::Localized),
        );
        let bytes = obj.to_bytes();
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]) & FLAG_HAS_DEP, FLAG_HAS_DEP);
        let full = read_module(&bytes).unwrap();
        assert_eq!(full, obj);
        let legacy = read_module_legacy(&bytes).unwrap();
        assert_eq!(legacy.symbols, full.symbols);
        assert_eq!(legacy.code, full.code);
        assert!(legacy.dep.is_none());
        let dep = full.dep.unwrap();
        assert_eq!(dep.strategy, Strategy::Localized);
        // foo (index 1) depends on comp (0, local) and sort (2, import).
        let rec = dep.record(1).unwrap();
        assert_eq!(
            rec.deps,
            vec![DepRef { kind: TargetKind::Local, index: 0 }, DepRef { kind: TargetKind::Import, index: 2 }]
        );
        assert_eq!((rec.location, rec.size), (4, 12));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let obj = compile(
            "module m executable\nneeds libc\nimport puts\nglobal g = &a\nvtable T { a, puts }\n\
             func a weak exported { ret }\nfunc s strong exported asm { call puts\n ret }\n\
             func main entry { o = new T\n vcall o, 0\n call puts\n ret }",
            Some(Strategy::FullModule),
        );
        let once = obj.to_bytes();
        let twice = read_module(&once).unwrap().to_bytes();
        assert_eq!(once, twice);
        assert_eq!(read_module(&once).unwrap().dep.unwrap().required_globals, vec![0, 3]);
    }

    #[test]
    fn asm_functions_have_no_records() {
        let obj = compile("module m\nfunc s asm { ret }\nfunc t { ret }", Some(Strategy::Pta));
        let dep = obj.dep.unwrap();
        assert_eq!(dep.records.len(), 1);
        assert_eq!(dep.records[0].symbol, 1);
        assert_eq!(obj.symbols[0].defined, Definedness::DefinedAsm);
    }

    #[test]
    fn reader_errors() {
        let good = compile("module m\nfunc f { ret }", Some(Strategy::Localized)).to_bytes();
        assert_eq!(read_module(b"ELF\x7f"), Err(PwofError::BadMagic { section: "header" }));
        assert!(matches!(read_module(&good[..good.len() - 3]), Err(PwofError::TruncatedSection(_))));

        // Corrupt the symbol count (after magic, version, flags, name "m", needed count).
        let mut bad = good.clone();
        let at = 4 + 2 + 2 + 3 + 2;
        bad[at..at + 4].copy_from_slice(&1000u32.to_le_bytes());
        assert!(read_module(&bad).is_err());

        // has-dep flag set on a module without a .dep section.
        let plain = compile("module m\nfunc f { ret }", None);
        let mut bytes = plain.to_bytes();
        bytes[6] |= FLAG_HAS_DEP as u8;
        assert_eq!(read_module(&bytes), Err(PwofError::BadMagic { section: ".dep" }));
    }

    #[test]
    fn index_out_of_range() {
        let mut obj = compile("module m\nfunc f { ret }", Some(Strategy::Localized));
        obj.dep.as_mut().unwrap().records[0].deps.push(DepRef { kind: TargetKind::Local, index: 9 });
        assert!(matches!(read_module(&obj.to_bytes()), Err(PwofError::IndexOutOfRange { index: 9, .. })));
    }

    #[test]
    fn relocation_exactly_once() {
        let obj = compile("module m\nfunc a { ret }\nfunc b { spadj\n ret }", Some(Strategy::Localized));
        let mut dep = obj.dep.unwrap();
        dep.records[1].location = 64;
        let moved = relocate_dep(&dep, 4096).unwrap();
        assert_eq!(moved.records[1].location, 4160);
        assert!(moved.relocated);
        assert_eq!(relocate_dep(&moved, 4096), Err(PwofError::AlreadyRelocated));
        let same = relocate_dep(&dep, 0).unwrap();
        assert!(same.relocated);
        assert_eq!(same.records, dep.records);
    }

    #[test]
    fn training_validation() {
        assert!(check_training(&[TrainingRecord::dlopen("p"), TrainingRecord::dlsym("p", "init")]).is_ok());
        assert!(check_training(&[TrainingRecord::dlsym("p", "init")]).is_err());
        let m = parse_module("module m\nfunc f { ret }").unwrap();
        let img = lower_code(&m).unwrap();
        assert!(build_object(&m, &img, None, vec![TrainingRecord::dlsym("x", "y")]).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let m = parse_module("module m\nfunc f { ret }\nfunc g { ret }").unwrap();
        let mut img = lower_code(&m).unwrap();
        img.layout[1].1.size = 8;
        assert!(matches!(write_module(&m, &img, None, vec![]), Err(PwofError::LayoutMismatch(_))));
    }
}
