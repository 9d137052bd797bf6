// SPDX-License-Identifier: Apache-2.0

//! The textual mini-IR and its lowering to the fixed-width toy code image.
//!
//! A module is written one declaration per line; `;` starts a comment:
//!
//! ```text
//! module libio
//! needs libc
//! import memcpy
//! global w = &stdout_write
//! vtable Shape { area, draw }
//! func stdout_write strong local { ret }
//! func close_file strong exported {
//!   p = w
//!   icall p
//!   ret
//! }
//! ```
//!
//! Function attributes follow the name: an optional binding (`strong`,
//! `weak`, `local`), then any of `exported`/`local` (visibility), `asm`, and
//! `entry`. Bodies are straight-line statement lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of one encoded instruction.
pub const INSN_SIZE: usize = 4;

pub mod opcode {
    pub const ADDR: u8 = 0x01;
    pub const COPY: u8 = 0x02;
    pub const LOAD: u8 = 0x03;
    pub const STORE: u8 = 0x04;
    pub const CALL: u8 = 0x05;
    pub const ICALL: u8 = 0x06;
    pub const RET: u8 = 0x07;
    pub const SYSCALL: u8 = 0x08;
    pub const SPADJ: u8 = 0x09;
    pub const IJMP: u8 = 0x0A;
    pub const NEW: u8 = 0x0B;
    pub const NOP: u8 = 0x0C;
    pub const VCALL: u8 = 0x0D;
    /// Invalid instruction written over removed code.
    pub const TRAP: u8 = 0x6D;

    pub fn is_terminator(op: u8) -> bool {
        matches!(op, RET | ICALL | IJMP)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MirError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unresolved name `{name}`")]
    UnresolvedName { line: usize, name: String },
    #[error("operand index {index} of `{function}` does not fit in 16 bits")]
    OperandOverflow { function: String, index: usize },
    #[error("type `{0}` has no declared vtable")]
    UnknownType(String),
}

fn parse_err<T>(line: usize, message: impl Into<String>) -> Result<T, MirError> {
    Err(MirError::Parse { line, message: message.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Strong,
    Weak,
    Local,
}

impl Binding {
    pub fn keyword(self) -> &'static str {
        match self {
            Binding::Strong => "strong",
            Binding::Weak => "weak",
            Binding::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statement {
    AddrOf { dst: String, target: String },
    Copy { dst: String, src: String },
    /// `dst = *src`
    Load { dst: String, src: String },
    /// `*dst = src`
    Store { dst: String, src: String },
    Call { target: String },
    ICall { var: String },
    VCall { var: String, slot: u32 },
    NewObject { dst: String, type_name: String },
    SpAdj,
    Syscall,
    IJmp { var: String },
    Ret,
}

impl Statement {
    pub fn opcode(&self) -> u8 {
        use opcode::*;
        match self {
            Statement::AddrOf { .. } => ADDR,
            Statement::Copy { .. } => COPY,
            Statement::Load { .. } => LOAD,
            Statement::Store { .. } => STORE,
            Statement::Call { .. } => CALL,
            Statement::ICall { .. } => ICALL,
            Statement::VCall { .. } => VCALL,
            Statement::NewObject { .. } => NEW,
            Statement::SpAdj => SPADJ,
            Statement::Syscall => SYSCALL,
            Statement::IJmp { .. } => IJMP,
            Statement::Ret => RET,
        }
    }

    /// Variables (locals or globals) read or written by this statement.
    pub fn variables(&self) -> Vec<&str> {
        match self {
            Statement::AddrOf { dst, .. } | Statement::NewObject { dst, .. } => vec![dst],
            Statement::Copy { dst, src }
            | Statement::Load { dst, src }
            | Statement::Store { dst, src } => vec![dst, src],
            Statement::ICall { var } | Statement::VCall { var, .. } | Statement::IJmp { var } => {
                vec![var]
            }
            Statement::Call { .. } | Statement::SpAdj | Statement::Syscall | Statement::Ret => {
                vec![]
            }
        }
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::AddrOf { dst, target } => write!(f, "{dst} = &{target}"),
            Statement::Copy { dst, src } => write!(f, "{dst} = {src}"),
            Statement::Load { dst, src } => write!(f, "{dst} = *{src}"),
            Statement::Store { dst, src } => write!(f, "*{dst} = {src}"),
            Statement::Call { target } => write!(f, "call {target}"),
            Statement::ICall { var } => write!(f, "icall {var}"),
            Statement::VCall { var, slot } => write!(f, "vcall {var}, {slot}"),
            Statement::NewObject { dst, type_name } => write!(f, "{dst} = new {type_name}"),
            Statement::SpAdj => f.write_str("spadj"),
            Statement::Syscall => f.write_str("syscall"),
            Statement::IJmp { var } => write!(f, "ijmp {var}"),
            Statement::Ret => f.write_str("ret"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub binding: Binding,
    pub exported: bool,
    pub is_asm: bool,
    pub entry: bool,
    pub body: Vec<Statement>,
}

impl Function {
    pub fn new(name: impl Into<String>, binding: Binding, exported: bool) -> Self {
        Function {
            name: name.into(),
            binding,
            exported,
            is_asm: false,
            entry: false,
            body: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.body.len() * INSN_SIZE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Global {
    pub name: String,
    /// Function whose address initializes the cell, if any.
    pub initializer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VTable {
    pub type_name: String,
    pub entries: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Module {
    pub name: String,
    pub is_executable: bool,
    pub needed: Vec<String>,
    /// Undefined symbols this module expects another module to provide.
    pub imports: Vec<String>,
    pub globals: Vec<Global>,
    pub vtables: Vec<VTable>,
    pub functions: Vec<Function>,
}

impl Module {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn is_global(&self, name: &str) -> bool {
        self.globals.iter().any(|g| g.name == name)
    }

    pub fn is_import(&self, name: &str) -> bool {
        self.imports.iter().any(|i| i == name)
    }

    pub fn vtable(&self, type_name: &str) -> Option<&VTable> {
        self.vtables.iter().find(|v| v.type_name == type_name)
    }

    pub fn entry_function(&self) -> Option<&Function> {
        self.functions.iter().find(|f| f.entry)
    }

    /// Index into the symbol space: functions, then imports, then globals.
    /// The first two ranges coincide with the object-file symbol table.
    pub fn symbol_index(&self, name: &str) -> Option<usize> {
        if let Some(i) = self.function_index(name) {
            return Some(i);
        }
        let base = self.functions.len();
        if let Some(i) = self.imports.iter().position(|n| n == name) {
            return Some(base + i);
        }
        let base = base + self.imports.len();
        self.globals.iter().position(|g| g.name == name).map(|i| base + i)
    }

    /// Renders the module in the textual syntax accepted by [`parse_module`].
    pub fn pretty_print(&self) -> String {
        let mut out = String::new();
        out.push_str("module ");
        out.push_str(&self.name);
        if self.is_executable {
            out.push_str(" executable");
        }
        out.push('\n');
        if !self.needed.is_empty() {
            out.push_str(&format!("needs {}\n", self.needed.join(" ")));
        }
        if !self.imports.is_empty() {
            out.push_str(&format!("import {}\n", self.imports.join(" ")));
        }
        for g in &self.globals {
            match &g.initializer {
                Some(t) => out.push_str(&format!("global {} = &{}\n", g.name, t)),
                None => out.push_str(&format!("global {}\n", g.name)),
            }
        }
        for v in &self.vtables {
            out.push_str(&format!("vtable {} {{ {} }}\n", v.type_name, v.entries.join(", ")));
        }
        for f in &self.functions {
            out.push_str("func ");
            out.push_str(&f.name);
            out.push(' ');
            out.push_str(f.binding.keyword());
            if f.binding != Binding::Local {
                out.push_str(if f.exported { " exported" } else { " local" });
            }
            if f.is_asm {
                out.push_str(" asm");
            }
            if f.entry {
                out.push_str(" entry");
            }
            out.push_str(" {\n");
            for s in &f.body {
                out.push_str("  ");
                out.push_str(&s.to_string());
                out.push('\n');
            }
            out.push_str("}\n");
        }
        out
    }

    /// Checks every structural invariant; the parser calls this before
    /// returning, and builders of synthetic modules may call it directly.
    pub fn validate(&self) -> Result<(), MirError> {
        let line = 0;
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for n in self
            .functions
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.imports.iter().map(String::as_str))
            .chain(self.globals.iter().map(|g| g.name.as_str()))
        {
            if !names.insert(n) {
                return parse_err(line, format!("duplicate symbol `{n}`"));
            }
        }
        let mut types = BTreeSet::new();
        for v in &self.vtables {
            if !types.insert(v.type_name.as_str()) {
                return parse_err(line, format!("duplicate vtable `{}`", v.type_name));
            }
            if v.entries.is_empty() {
                return parse_err(line, format!("vtable `{}` has no entries", v.type_name));
            }
            for e in &v.entries {
                self.expect_function_like(line, e)?;
            }
        }
        for g in &self.globals {
            if let Some(t) = &g.initializer {
                self.expect_function_like(line, t)?;
            }
        }
        let mut entries = 0;
        for f in &self.functions {
            self.validate_function(f, line)?;
            if f.entry {
                entries += 1;
            }
        }
        if entries > 1 {
            return parse_err(line, "more than one entry function");
        }
        if self.is_executable && entries == 0 {
            return parse_err(line, "executable module has no entry function");
        }
        if !self.is_executable && entries > 0 {
            return parse_err(line, "entry function in a non-executable module");
        }
        Ok(())
    }

    fn expect_function_like(&self, line: usize, name: &str) -> Result<(), MirError> {
        if self.function_index(name).is_some() || self.is_import(name) {
            Ok(())
        } else if self.is_global(name) {
            parse_err(line, format!("`{name}` is a global, expected a function"))
        } else {
            Err(MirError::UnresolvedName { line, name: name.to_string() })
        }
    }

    fn validate_function(&self, f: &Function, line: usize) -> Result<(), MirError> {
        if f.binding == Binding::Local && f.exported {
            return parse_err(line, format!("local function `{}` cannot be exported", f.name));
        }
        if f.body.is_empty() {
            return parse_err(line, format!("function `{}` has an empty body", f.name));
        }
        for s in &f.body {
            self.validate_statement(f, s, line)?;
        }
        Ok(())
    }

    fn validate_statement(&self, f: &Function, s: &Statement, line: usize) -> Result<(), MirError> {
        if f.is_asm && !matches!(s, Statement::Call { .. } | Statement::Ret) {
            return parse_err(
                line,
                format!("asm function `{}` may only contain `call` and `ret`", f.name),
            );
        }
        for v in s.variables() {
            if self.function_index(v).is_some() || self.is_import(v) {
                return parse_err(line, format!("function `{v}` used as a variable"));
            }
        }
        match s {
            Statement::AddrOf { target, .. } => {
                if !self.is_global(target) {
                    self.expect_function_like(line, target)?;
                }
            }
            Statement::Call { target } => self.expect_function_like(line, target)?,
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Punct(char),
    Newline,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, MirError> {
    let mut toks = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let code = raw.split(';').next().unwrap_or("");
        let mut chars = code.char_indices().peekable();
        while let Some(&(start, c)) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else if matches!(c, '{' | '}' | '=' | '&' | '*' | ',') {
                toks.push((line, Tok::Punct(c)));
                chars.next();
            } else if is_word_char(c) {
                let mut end = start;
                while let Some(&(j, d)) = chars.peek() {
                    if !is_word_char(d) {
                        break;
                    }
                    end = j + d.len_utf8();
                    chars.next();
                }
                toks.push((line, Tok::Word(code[start..end].to_string())));
            } else {
                return parse_err(line, format!("unexpected character `{c}`"));
            }
        }
        toks.push((line, Tok::Newline));
    }
    Ok(toks)
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '@' | '-')
}

fn is_ident(w: &str) -> bool {
    w.chars().next().is_some_and(|c| !c.is_ascii_digit())
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or(self.toks.last())
            .map(|t| t.0)
            .unwrap_or(1)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.1.clone());
        self.pos += 1;
        t
    }

    fn skip_newlines(&mut self) {
        while self.peek() == Some(&Tok::Newline) {
            self.pos += 1;
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, MirError> {
        let line = self.line();
        match self.next() {
            Some(Tok::Word(w)) if is_ident(&w) => Ok(w),
            Some(Tok::Word(w)) => parse_err(line, format!("expected {what}, found `{w}`")),
            _ => parse_err(line, format!("expected {what}")),
        }
    }

    fn expect(&mut self, c: char) -> Result<(), MirError> {
        let line = self.line();
        match self.next() {
            Some(Tok::Punct(p)) if p == c => Ok(()),
            _ => parse_err(line, format!("expected `{c}`")),
        }
    }

    fn end_of_line(&mut self) -> Result<(), MirError> {
        let line = self.line();
        match self.next() {
            None | Some(Tok::Newline) => Ok(()),
            Some(t) => parse_err(line, format!("unexpected {t:?} at end of declaration")),
        }
    }

    fn words_to_eol(&mut self) -> Result<Vec<String>, MirError> {
        let mut out = Vec::new();
        loop {
            match self.peek() {
                None | Some(Tok::Newline) => return Ok(out),
                _ => out.push(self.ident("name")?),
            }
        }
    }

    /// Collects the tokens of one statement inside a braced body.
    fn statement_tokens(&mut self) -> Result<Option<(usize, Vec<Tok>)>, MirError> {
        self.skip_newlines();
        let line = self.line();
        let mut toks = Vec::new();
        loop {
            match self.peek() {
                None => return parse_err(line, "unterminated `{` block"),
                Some(Tok::Punct('}')) => {
                    if toks.is_empty() {
                        self.pos += 1;
                        return Ok(None);
                    }
                    return Ok(Some((line, toks)));
                }
                Some(Tok::Newline) => {
                    self.pos += 1;
                    return Ok(Some((line, toks)));
                }
                Some(_) => toks.push(self.next().expect("peeked")),
            }
        }
    }
}

fn parse_statement(line: usize, toks: &[Tok]) -> Result<Statement, MirError> {
    use Tok::{Punct, Word};
    let id = |w: &String| -> Result<String, MirError> {
        if is_ident(w) {
            Ok(w.clone())
        } else {
            parse_err(line, format!("invalid name `{w}`"))
        }
    };
    let stmt = match toks {
        [Word(w)] if w == "ret" => Statement::Ret,
        [Word(w)] if w == "syscall" => Statement::Syscall,
        [Word(w)] if w == "spadj" => Statement::SpAdj,
        [Word(w), Word(t)] if w == "call" => Statement::Call { target: id(t)? },
        [Word(w), Word(v)] if w == "icall" => Statement::ICall { var: id(v)? },
        [Word(w), Word(v)] if w == "ijmp" => Statement::IJmp { var: id(v)? },
        [Word(w), Word(v), Punct(','), Word(k)] | [Word(w), Word(v), Word(k)] if w == "vcall" => {
            let slot = k
                .parse::<u32>()
                .or_else(|_| parse_err(line, format!("invalid vtable slot `{k}`")))?;
            Statement::VCall { var: id(v)?, slot }
        }
        [Word(d), Punct('='), Punct('&'), Word(t)] => Statement::AddrOf { dst: id(d)?, target: id(t)? },
        [Word(d), Punct('='), Punct('*'), Word(s)] => Statement::Load { dst: id(d)?, src: id(s)? },
        [Punct('*'), Word(d), Punct('='), Word(s)] => Statement::Store { dst: id(d)?, src: id(s)? },
        [Word(d), Punct('='), Word(n), Word(t)] if n == "new" => {
            Statement::NewObject { dst: id(d)?, type_name: id(t)? }
        }
        [Word(d), Punct('='), Word(s)] => Statement::Copy { dst: id(d)?, src: id(s)? },
        _ => {
            let text: Vec<String> = toks
                .iter()
                .map(|t| match t {
                    Word(w) => w.clone(),
                    Punct(c) => c.to_string(),
                    Tok::Newline => String::new(),
                })
                .collect();
            return parse_err(line, format!("unknown statement `{}`", text.join(" ")));
        }
    };
    Ok(stmt)
}

/// Parses a module from its textual form, rejecting unknown statements and
/// references to names that are neither defined nor imported.
pub fn parse_module(text: &str) -> Result<Module, MirError> {
    let mut p = Parser { toks: tokenize(text)?, pos: 0 };
    let mut module = Module::default();
    let mut seen_header = false;
    // Line of first reference to each name, for error reporting.
    let mut refs: Vec<(usize, String)> = Vec::new();
    let mut decl_lines: BTreeMap<String, usize> = BTreeMap::new();

    loop {
        p.skip_newlines();
        let line = p.line();
        let Some(tok) = p.next() else { break };
        let Tok::Word(kw) = tok else {
            return parse_err(line, "expected a declaration");
        };
        match kw.as_str() {
            "module" => {
                if seen_header {
                    return parse_err(line, "duplicate `module` declaration");
                }
                seen_header = true;
                module.name = p.ident("module name")?;
                let rest = p.words_to_eol()?;
                match rest.as_slice() {
                    [] => {}
                    [w] if w == "executable" => module.is_executable = true,
                    _ => return parse_err(line, "unexpected words after module name"),
                }
            }
            "needs" => module.needed.extend(p.words_to_eol()?),
            "import" => {
                for n in p.words_to_eol()? {
                    decl_lines.entry(n.clone()).or_insert(line);
                    module.imports.push(n);
                }
            }
            "global" => {
                let name = p.ident("global name")?;
                let initializer = if p.peek() == Some(&Tok::Punct('=')) {
                    p.next();
                    p.expect('&')?;
                    let t = p.ident("function name")?;
                    refs.push((line, t.clone()));
                    Some(t)
                } else {
                    None
                };
                p.end_of_line()?;
                decl_lines.entry(name.clone()).or_insert(line);
                module.globals.push(Global { name, initializer });
            }
            "vtable" => {
                let type_name = p.ident("type name")?;
                p.expect('{')?;
                let mut entries = Vec::new();
                loop {
                    p.skip_newlines();
                    let l = p.line();
                    match p.next() {
                        Some(Tok::Punct('}')) => break,
                        Some(Tok::Punct(',')) => {}
                        Some(Tok::Word(w)) if is_ident(&w) => {
                            refs.push((l, w.clone()));
                            entries.push(w);
                        }
                        _ => return parse_err(l, "malformed vtable entry list"),
                    }
                }
                p.end_of_line()?;
                module.vtables.push(VTable { type_name, entries });
            }
            "func" => {
                let f = parse_function(&mut p, line, &mut refs)?;
                decl_lines.entry(f.name.clone()).or_insert(line);
                module.functions.push(f);
            }
            other => return parse_err(line, format!("unknown declaration `{other}`")),
        }
    }
    if !seen_header {
        return parse_err(1, "missing `module` declaration");
    }
    // Report unresolved names at the line where they are used.
    for (line, name) in &refs {
        if module.function_index(name).is_none() && !module.is_import(name) && !module.is_global(name)
        {
            return Err(MirError::UnresolvedName { line: *line, name: name.clone() });
        }
    }
    module.validate().map_err(|e| match e {
        MirError::Parse { line: 0, message } => {
            // Attach the best line we know: the declaration named in the message.
            let line = decl_lines
                .iter()
                .find(|(n, _)| message.contains(&format!("`{n}`")))
                .map(|(_, l)| *l)
                .unwrap_or(1);
            MirError::Parse { line, message }
        }
        other => other,
    })?;
    Ok(module)
}

fn parse_function(
    p: &mut Parser,
    line: usize,
    refs: &mut Vec<(usize, String)>,
) -> Result<Function, MirError> {
    let name = p.ident("function name")?;
    let mut f = Function::new(name, Binding::Strong, false);
    let mut first = true;
    loop {
        let l = p.line();
        match p.next() {
            Some(Tok::Punct('{')) => break,
            Some(Tok::Word(w)) => {
                match (first, w.as_str()) {
                    (true, "strong") => f.binding = Binding::Strong,
                    (true, "weak") => f.binding = Binding::Weak,
                    (true, "local") => f.binding = Binding::Local,
                    (_, "exported") => f.exported = true,
                    (false, "local") | (_, "hidden") => f.exported = false,
                    (_, "asm") => f.is_asm = true,
                    (_, "entry") => f.entry = true,
                    _ => return parse_err(l, format!("unknown function attribute `{w}`")),
                }
                first = false;
            }
            _ => return parse_err(line, "expected `{` to open function body"),
        }
    }
    while let Some((l, toks)) = p.statement_tokens()? {
        if toks.is_empty() {
            continue;
        }
        let s = parse_statement(l, &toks)?;
        match &s {
            Statement::AddrOf { target, .. } | Statement::Call { target } => {
                refs.push((l, target.clone()))
            }
            _ => {}
        }
        f.body.push(s);
    }
    p.end_of_line()?;
    Ok(f)
}

/// Placement of one function inside a [`CodeImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub size: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeImage {
    pub bytes: Vec<u8>,
    /// Functions in declaration order.
    pub layout: Vec<(String, Span)>,
}

impl CodeImage {
    pub fn span(&self, function: &str) -> Option<Span> {
        self.layout.iter().find(|(n, _)| n == function).map(|(_, s)| *s)
    }

    pub fn entry_offsets(&self) -> BTreeSet<usize> {
        self.layout.iter().map(|(_, s)| s.offset).collect()
    }
}

/// Lowers every function to 4-byte instructions laid out contiguously in
/// declaration order: opcode, little-endian 16-bit operand, reserved zero.
pub fn lower_code(module: &Module) -> Result<CodeImage, MirError> {
    let mut image = CodeImage::default();
    for f in &module.functions {
        let offset = image.bytes.len();
        for s in &f.body {
            let operand = match s {
                Statement::AddrOf { target, .. } => module
                    .symbol_index(target)
                    .ok_or_else(|| MirError::UnresolvedName { line: 0, name: target.clone() })?,
                Statement::Call { target } => module
                    .symbol_index(target)
                    .ok_or_else(|| MirError::UnresolvedName { line: 0, name: target.clone() })?,
                Statement::VCall { slot, .. } => *slot as usize,
                Statement::NewObject { type_name, .. } => module
                    .vtables
                    .iter()
                    .position(|v| &v.type_name == type_name)
                    .ok_or_else(|| MirError::UnknownType(type_name.clone()))?,
                _ => 0,
            };
            let operand = u16::try_from(operand).map_err(|_| MirError::OperandOverflow {
                function: f.name.clone(),
                index: operand,
            })?;
            let [lo, hi] = operand.to_le_bytes();
            image.bytes.extend_from_slice(&[s.opcode(), lo, hi, 0]);
        }
        image.layout.push((f.name.clone(), Span { offset, size: f.size() }));
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GLOBAL_FNPTR: &str = "module m\nglobal w = &stdout_write\nfunc stdout_write strong local { ret }\nfunc close_file strong exported { p = w\n icall p\n ret }";

    #[test]
    fn minimal_module() {
        let m = parse_module("module m\nfunc f strong exported { ret }").unwrap();
        assert_eq!(m.name, "m");
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].size(), 4);
        assert!(m.functions[0].exported);
    }

    #[test]
    fn global_held_code_address() {
        let m = parse_module(GLOBAL_FNPTR).unwrap();
        assert_eq!(m.globals[0].initializer.as_deref(), Some("stdout_write"));
        let sw = m.function("stdout_write").unwrap();
        assert_eq!(sw.binding, Binding::Strong);
        assert!(!sw.exported);
        assert_eq!(
            m.function("close_file").unwrap().body,
            vec![
                Statement::Copy { dst: "p".into(), src: "w".into() },
                Statement::ICall { var: "p".into() },
                Statement::Ret,
            ]
        );
    }

    #[test]
    fn unknown_statement_reports_line() {
        let err = parse_module("func f { bogus }").unwrap_err();
        match err {
            MirError::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("bogus"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = parse_module("module m\nfunc f {\n ret\n bogus x\n}").unwrap_err();
        assert!(matches!(err, MirError::Parse { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn unresolved_names() {
        let err = parse_module("module m\nfunc f {\n call g\n ret }").unwrap_err();
        assert_eq!(err, MirError::UnresolvedName { line: 3, name: "g".into() });
        let err = parse_module("module m\nglobal w = &nope\nfunc f { ret }").unwrap_err();
        assert_eq!(err, MirError::UnresolvedName { line: 2, name: "nope".into() });
        let m = parse_module("module m\nimport g\nfunc f {\n call g\n ret }").unwrap();
        assert_eq!(m.imports, vec!["g"]);
    }

    #[test]
    fn structural_rejections() {
        for (text, why) in [
            ("module m\nfunc f local exported { ret }", "exported local"),
            ("module m\nfunc f { ret }\nfunc f { ret }", "duplicate"),
            ("module m\nfunc a asm { syscall }", "asm body"),
            ("module m\nfunc f { }", "empty body"),
            ("module m executable\nfunc f { ret }", "no entry"),
            ("module m\nfunc f { p = g\n ret }\nfunc g { ret }", "function as variable"),
            ("module m\nvtable T { }\nfunc f { ret }", "empty vtable"),
        ] {
            assert!(parse_module(text).is_err(), "{why}");
        }
    }

    #[test]
    fn all_statement_forms_round_trip() {
        let text = "module m executable ; comment\nneeds libc libm\nimport puts\nglobal g\nglobal h = &f\n\
                    vtable Shape {\n area,\n draw\n}\n\
                    func area weak exported { ret }\nfunc draw local { syscall\n ret }\n\
                    func memcpy_impl strong exported asm { call puts\n ret }\n\
                    func f strong exported entry {\n p = &area\n q = p\n r = *q\n *q = r\n g = &g\n o = new Shape\n\
                    vcall o, 1\n icall p\n spadj\n call draw\n ijmp p\n}\n";
        let m = parse_module(text).unwrap();
        assert!(m.is_executable);
        assert_eq!(m.needed, vec!["libc", "libm"]);
        assert_eq!(m.vtables[0].entries, vec!["area", "draw"]);
        let again = parse_module(&m.pretty_print()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn lowering_encodes_fixed_width() {
        let m = parse_module("module m\nfunc f { ret }").unwrap();
        assert_eq!(lower_code(&m).unwrap().bytes, vec![0x07, 0, 0, 0]);

        let m = parse_module("module m\nfunc f { syscall\n ret }").unwrap();
        let img = lower_code(&m).unwrap();
        assert_eq!(img.bytes, vec![0x08, 0, 0, 0, 0x07, 0, 0, 0]);
        assert_eq!(img.span("f"), Some(Span { offset: 0, size: 8 }));

        let empty = lower_code(&Module::default()).unwrap();
        assert!(empty.bytes.is_empty() && empty.layout.is_empty());
    }

    #[test]
    fn lowering_operands() {
        let m = parse_module(
            "module m\nimport ext\nglobal g\nvtable A { a }\nvtable B { a }\n\
             func a { call ext\n p = &g\n o = new B\n vcall o, 3\n ret }",
        )
        .unwrap();
        let img = lower_code(&m).unwrap();
        let insn = |i: usize| &img.bytes[i * 4..i * 4 + 4];
        assert_eq!(insn(0), &[opcode::CALL, 1, 0, 0]);
        assert_eq!(insn(1), &[opcode::ADDR, 2, 0, 0]);
        assert_eq!(insn(2), &[opcode::NEW, 1, 0, 0]);
        assert_eq!(insn(3), &[opcode::VCALL, 3, 0, 0]);

        let m = parse_module("module m\nfunc a { o = new Missing\n ret }").unwrap();
        assert_eq!(lower_code(&m), Err(MirError::UnknownType("Missing".into())));

        let m = parse_module("module m\nfunc a { o = new T\n vcall o, 70000\n ret }\nvtable T { a }")
            .unwrap();
        assert!(matches!(lower_code(&m), Err(MirError::OperandOverflow { .. })));
    }

    #[test]
    fn layout_tiles_functions() {
        let m = parse_module("module m\nfunc a { ret }\nfunc b { spadj\n syscall\n ret }\nfunc c { ret }")
            .unwrap();
        let img = lower_code(&m).unwrap();
        let spans: Vec<Span> = img.layout.iter().map(|(_, s)| *s).collect();
        assert_eq!(
            spans,
            vec![
                Span { offset: 0, size: 4 },
                Span { offset: 4, size: 12 },
                Span { offset: 16, size: 4 }
            ]
        );
        assert_eq!(img.bytes.len(), 20);
    }
}
