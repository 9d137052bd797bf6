// SPDX-License-Identifier: Apache-2.0

//! Piece-wise debloating toolchain.
//!
//! The compiler side ([`mir`], [`depgraph`], [`pta`]) derives a
//! function-level dependency graph for each module and embeds it in the
//! object file ([`pwof`]) as a relocatable `.dep` section. The [`loader`]
//! pre-loads the whole module tree, pre-binds symbols, and overwrites or
//! unmaps every function the program cannot reach. [`vm`] executes a
//! process image to check that nothing live was removed, [`gadgets`]
//! measures the code-reuse surface before and after, and [`study`]
//! tabulates per-library footprints over a corpus.

pub mod compile;
pub mod depgraph;
pub mod gadgets;
pub mod loader;
pub mod mir;
pub mod pta;
pub mod pwof;
pub mod study;
pub mod synth;
pub mod vm;

pub use compile::{compile, compile_module, CompileError};
pub use depgraph::{build_depgraph, DepGraph, DepTarget, Strategy};
pub use loader::{load, LoadOptions, Loaded, ProcessImage};
pub use mir::{lower_code, parse_module, Module};
pub use pwof::{read_module, write_module, ObjectFile};
