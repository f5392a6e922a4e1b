//! A small C-like language and an interpreter that emits the same monitoring
//! data an instrumented native target would: one condition record per
//! Boolean-instruction evaluation, typed input reads, and a termination flag.
//!
//! Grammar summary: a program is a list of functions (`int main()` is the
//! entry). Statements are declarations, assignments (`=`, `op=`, `++`, `--`),
//! `if`/`else`, `while`, `do`/`while`, `for`, `break`, `continue`, `return`,
//! blocks and expression statements. Expressions follow C precedence. Inputs
//! come from `__VERIFIER_nondet_T()` (or `nondet_T()`), `abort()` and
//! `reach_error()` crash, `exit(n)` ends normally.

mod ast;
mod check;
mod interp;
mod lexer;
mod parser;

use std::fmt;

use thiserror::Error;

use crate::abi::{ExecutionConfig, ExecutionResult, TypeTag, DEFAULT_CONTEXT_DEPTH};

pub use check::SiteInfo;
pub use interp::BranchEvent;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

impl ParseError {
    pub fn new(line: u32, col: u32, msg: impl Into<String>) -> Self {
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ty {
    Bool,
    I8,
    I16,
    I32,
    I64,
    U8,
    U16,
    U32,
    U64,
    F32,
    F64,
    Void,
}

impl Ty {
    pub fn from_alias(s: &str) -> Option<Ty> {
        Some(match s {
            "i8" | "schar" => Ty::I8,
            "i16" => Ty::I16,
            "i32" => Ty::I32,
            "i64" => Ty::I64,
            "u8" | "uchar" => Ty::U8,
            "u16" | "ushort" => Ty::U16,
            "u32" | "uint" => Ty::U32,
            "u64" | "ulong" => Ty::U64,
            "f32" => Ty::F32,
            "f64" => Ty::F64,
            _ => return None,
        })
    }

    pub fn is_int(self) -> bool {
        matches!(
            self,
            Ty::I8 | Ty::I16 | Ty::I32 | Ty::I64 | Ty::U8 | Ty::U16 | Ty::U32 | Ty::U64
        )
    }

    pub fn is_float(self) -> bool {
        matches!(self, Ty::F32 | Ty::F64)
    }

    pub fn is_numeric(self) -> bool {
        self.is_int() || self.is_float()
    }

    pub fn is_signed(self) -> bool {
        matches!(self, Ty::I8 | Ty::I16 | Ty::I32 | Ty::I64)
    }

    pub fn bits(self) -> u32 {
        match self {
            Ty::Bool | Ty::I8 | Ty::U8 => 8,
            Ty::I16 | Ty::U16 => 16,
            Ty::I32 | Ty::U32 | Ty::F32 => 32,
            Ty::I64 | Ty::U64 | Ty::F64 => 64,
            Ty::Void => 0,
        }
    }

    pub fn tag(self) -> Option<TypeTag> {
        Some(match self {
            Ty::Bool => TypeTag::Boolean,
            Ty::I8 => TypeTag::Sint8,
            Ty::I16 => TypeTag::Sint16,
            Ty::I32 => TypeTag::Sint32,
            Ty::I64 => TypeTag::Sint64,
            Ty::U8 => TypeTag::Uint8,
            Ty::U16 => TypeTag::Uint16,
            Ty::U32 => TypeTag::Uint32,
            Ty::U64 => TypeTag::Uint64,
            Ty::F32 => TypeTag::Float32,
            Ty::F64 => TypeTag::Float64,
            Ty::Void => return None,
        })
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ty::Bool => "bool",
            Ty::I8 => "char",
            Ty::I16 => "short",
            Ty::I32 => "int",
            Ty::I64 => "long",
            Ty::U8 => "unsigned char",
            Ty::U16 => "unsigned short",
            Ty::U32 => "unsigned int",
            Ty::U64 => "unsigned long",
            Ty::F32 => "float",
            Ty::F64 => "double",
            Ty::Void => "void",
        };
        f.write_str(s)
    }
}

/// Which kind of Boolean instruction a record comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Comparison,
    Truncation,
    BoolCall,
}

/// The value attached to one Boolean-instruction evaluation.
pub fn branching_value(l: f64, r: f64, kind: BranchKind) -> f64 {
    match kind {
        BranchKind::Comparison => l - r,
        BranchKind::Truncation | BranchKind::BoolCall => 1.0,
    }
}

/// A checked program ready for execution.
#[derive(Debug, Clone)]
pub struct Program {
    pub(crate) functions: Vec<check::Function>,
    pub(crate) main: usize,
    pub(crate) recursive: bool,
    sites: Vec<SiteInfo>,
    branch_count: u32,
}

impl Program {
    /// Static Boolean instructions, ordered by uid (uids start at 1).
    pub fn boolean_instructions(&self) -> &[SiteInfo] {
        &self.sites
    }

    /// Number of `if`/loop branch points.
    pub fn branch_count(&self) -> u32 {
        self.branch_count
    }
}

pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let defs = parser::parse(text)?;
    let checked = check::check(&defs)?;
    Ok(Program {
        functions: checked.functions,
        main: checked.main,
        recursive: checked.recursive,
        sites: checked.sites,
        branch_count: checked.branch_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmLimits {
    pub max_trace_length: u32,
    pub max_stack_size: u32,
    pub max_input_bytes: u32,
    /// Statement/expression budget standing in for a wall-clock timeout.
    pub step_budget: u64,
    pub context_depth: usize,
}

pub const DEFAULT_STEP_BUDGET: u64 = 10_000_000;

impl VmLimits {
    pub fn for_config(config: &ExecutionConfig, step_budget: u64) -> Self {
        VmLimits {
            max_trace_length: config.max_trace_length,
            max_stack_size: config.max_stack_size,
            max_input_bytes: config.max_input_bytes,
            step_budget,
            context_depth: DEFAULT_CONTEXT_DEPTH,
        }
    }
}

pub fn execute(program: &Program, config: &ExecutionConfig, limits: &VmLimits) -> ExecutionResult {
    interp::run(program, config, limits, None)
}

/// Like [`execute`], also reporting every `if`/loop decision taken.
pub fn execute_with_branches(
    program: &Program,
    config: &ExecutionConfig,
    limits: &VmLimits,
) -> (ExecutionResult, Vec<BranchEvent>) {
    let mut events = Vec::new();
    let r = interp::run(program, config, limits, Some(&mut events));
    (r, events)
}

#[cfg(test)]
mod tests;
