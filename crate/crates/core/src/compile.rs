// SPDX-License-Identifier: Apache-2.0

//! Compiler driver: IR text to object file.

use thiserror::Error;

use crate::depgraph::{build_depgraph, DepError, DepGraph, Strategy};
use crate::mir::{lower_code, parse_module, MirError, Module};
use crate::pwof::{build_object, DepSection, ObjectFile, PwofError, TrainingRecord};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Mir(#[from] MirError),
    #[error(transparent)]
    Dep(#[from] DepError),
    #[error(transparent)]
    Format(#[from] PwofError),
}

/// Lowers and analyzes a parsed module. `strategy = None` emits a legacy
/// module without a `.dep` section.
pub fn compile_module(
    module: &Module,
    strategy: Option<Strategy>,
    training: Vec<TrainingRecord>,
) -> Result<ObjectFile, CompileError> {
    let image = lower_code(module)?;
    let dep = match strategy {
        Some(s) => {
            let graph: DepGraph = build_depgraph(module, s)?;
            Some(DepSection::from_graph(&graph, module, &image)?)
        }
        None => None,
    };
    Ok(build_object(module, &image, dep, training)?)
}

pub fn compile(
    text: &str,
    strategy: Option<Strategy>,
    training: Vec<TrainingRecord>,
) -> Result<ObjectFile, CompileError> {
    compile_module(&parse_module(text)?, strategy, training)
}
