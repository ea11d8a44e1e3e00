//! Assembly-like program representation.
//!
//! A [`Program`] is a list of functions; each function is an ordered list of
//! basic blocks that end in exactly one explicit terminator. The only implicit
//! edge is the not-taken side of `cbranch`, which continues with the next
//! block in the function.

mod cfg;
mod layout;
mod parse;
mod print;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use cfg::{build_cfg, build_program_cfg, edge_count, reverse_post_order};
pub use layout::layout_addresses;
pub use parse::parse_program;
pub use print::{format_op, print_program};

/// Size of one instruction slot in bytes.
pub const INSTRUCTION_BYTES: u64 = 4;
/// Number of architectural registers (`r0`..`r28`).
pub const NUM_REGS: usize = 29;
/// Users may touch `r0`..`r25`.
pub const FIRST_RESERVED_REG: u8 = 26;

/// Scratch register of the unkeyed XOR baseline (signature load target).
pub const SIG_REG: Reg = Reg(26);
/// Return-patch register.
pub const RETPATCH_REG: Reg = Reg(27);
/// Running CFI state.
pub const STATE_REG: Reg = Reg(28);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(pub u8);

impl Reg {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_reserved(self) -> bool {
        self.0 >= FIRST_RESERVED_REG
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Xor,
    Mul,
    Lt,
    Eq,
}

impl AluOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Xor => "xor",
            AluOp::Mul => "mul",
            AluOp::Lt => "lt",
            AluOp::Eq => "eq",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "add" => AluOp::Add,
            "sub" => AluOp::Sub,
            "xor" => AluOp::Xor,
            "mul" => AluOp::Mul,
            "lt" => AluOp::Lt,
            "eq" => AluOp::Eq,
            _ => return None,
        })
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Xor => a ^ b,
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Lt => (a < b) as u64,
            AluOp::Eq => (a == b) as u64,
        }
    }
}

/// Which entry point a direct call lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CallEntry {
    /// The function symbol, i.e. its first instruction. For dual-entry
    /// functions that is the indirect entry.
    Symbol,
    /// The direct entry point (set by post-processing).
    Direct,
}

/// What a `cfi.patch` slot justifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatchRole {
    /// Non-tree CFG edge inside a function.
    Merge,
    /// Call-site state to the callee's begin state.
    DirectCall,
    /// Call-site state to the intermediate begin state of an indirect call.
    IcallPre,
    /// Intermediate begin state to the function's begin state (indirect entry).
    IcallEntry,
}

impl PatchRole {
    pub fn name(self) -> &'static str {
        match self {
            PatchRole::Merge => "merge",
            PatchRole::DirectCall => "call",
            PatchRole::IcallPre => "icall",
            PatchRole::IcallEntry => "entry",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "merge" => PatchRole::Merge,
            "call" => PatchRole::DirectCall,
            "icall" => PatchRole::IcallPre,
            "entry" => PatchRole::IcallEntry,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    Const { dst: Reg, imm: u64 },
    Alu { op: AluOp, dst: Reg, lhs: Reg, rhs: Reg },
    Load { dst: Reg, base: Reg, offset: u64 },
    Store { base: Reg, offset: u64, src: Reg },
    Branch { target: String },
    /// Taken when `cond != 0`; otherwise continues with the next block.
    CondBranch { cond: Reg, target: String },
    Call { callee: String, entry: CallEntry },
    CallIndirect { target: Reg, candidates: Vec<String> },
    AddrOf { dst: Reg, func: String },
    Out { src: Reg },
    Return,
    Halt,

    /// `state = pacia(state, own address)`.
    CfiUpdate,
    /// `state ^= value`.
    CfiPatch { role: PatchRole, value: u64 },
    /// `r27 = value`.
    CfiLoadRetPatch { value: u64 },
    /// `state ^= r27`.
    CfiApplyRetPatch,
    /// `autiza(state ^ constant)`.
    CfiCheck { constant: u64 },
    /// Save the state on the shadow signature stack.
    CfiStatePush,
    /// `state ^= pop()`.
    CfiStateMixPop,
    /// XOR baseline: `r26 = value`.
    CfiLoadSig { value: u64 },
    /// XOR baseline: `state ^= r26`.
    CfiXorSig,
    /// XOR baseline check: trap unless `state == expected`.
    CfiAssert { expected: u64 },
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            Op::Branch { .. } | Op::CondBranch { .. } | Op::Return | Op::Halt
        )
    }

    pub fn is_cfi(&self) -> bool {
        matches!(
            self,
            Op::CfiUpdate
                | Op::CfiPatch { .. }
                | Op::CfiLoadRetPatch { .. }
                | Op::CfiApplyRetPatch
                | Op::CfiCheck { .. }
                | Op::CfiStatePush
                | Op::CfiStateMixPop
                | Op::CfiLoadSig { .. }
                | Op::CfiXorSig
                | Op::CfiAssert { .. }
        )
    }

    pub fn is_check(&self) -> bool {
        matches!(self, Op::CfiCheck { .. } | Op::CfiAssert { .. })
    }

    pub fn is_control_transfer(&self) -> bool {
        self.is_terminator() || matches!(self, Op::Call { .. } | Op::CallIndirect { .. })
    }

    /// Number of AArch64 instructions the operation stands for.
    pub fn machine_cost(&self) -> u64 {
        match self {
            Op::CfiUpdate => 2,      // adr + pacia
            Op::CfiPatch { .. } => 2, // mov + eor
            Op::CfiCheck { .. } => 3, // mov + eor + autiza
            Op::CfiAssert { .. } => 3, // mov + cmp + b.ne
            Op::CfiStateMixPop => 2, // ldr + eor
            _ => 1,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::Const { .. } => "const",
            Op::Alu { .. } => "alu",
            Op::Load { .. } => "load",
            Op::Store { .. } => "store",
            Op::Branch { .. } => "branch",
            Op::CondBranch { .. } => "cbranch",
            Op::Call { entry: CallEntry::Symbol, .. } => "call",
            Op::Call { entry: CallEntry::Direct, .. } => "call.direct",
            Op::CallIndirect { .. } => "icall",
            Op::AddrOf { .. } => "addrof",
            Op::Out { .. } => "out",
            Op::Return => "return",
            Op::Halt => "halt",
            Op::CfiUpdate => "cfi.update",
            Op::CfiPatch { .. } => "cfi.patch",
            Op::CfiLoadRetPatch { .. } => "cfi.ldret",
            Op::CfiApplyRetPatch => "cfi.applyret",
            Op::CfiCheck { .. } => "cfi.check",
            Op::CfiStatePush => "cfi.push",
            Op::CfiStateMixPop => "cfi.mixpop",
            Op::CfiLoadSig { .. } => "cfi.ldsig",
            Op::CfiXorSig => "cfi.xorsig",
            Op::CfiAssert { .. } => "cfi.assert",
        }
    }

    /// Registers the instruction reads or writes.
    pub fn registers(&self) -> Vec<Reg> {
        match self {
            Op::Const { dst, .. } | Op::AddrOf { dst, .. } => vec![*dst],
            Op::Alu { dst, lhs, rhs, .. } => vec![*dst, *lhs, *rhs],
            Op::Load { dst, base, .. } => vec![*dst, *base],
            Op::Store { base, src, .. } => vec![*base, *src],
            Op::CondBranch { cond, .. } => vec![*cond],
            Op::CallIndirect { target, .. } => vec![*target],
            Op::Out { src } => vec![*src],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Op,
    /// Code address; 0 until [`layout_addresses`] runs.
    pub address: u64,
}

impl Instruction {
    pub fn new(op: Op) -> Self {
        Self { op, address: 0 }
    }
}

impl From<Op> for Instruction {
    fn from(op: Op) -> Self {
        Instruction::new(op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// A block of the source program.
    Body,
    /// Edge block spliced in by instrumentation to carry a merge patch.
    Splice,
}

/// Labels starting with this prefix are reserved for spliced edge blocks.
pub const SPLICE_PREFIX: char = '.';

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasicBlock {
    pub label: String,
    pub kind: BlockKind,
    pub instructions: Vec<Instruction>,
    /// Derived by [`build_cfg`]; block ids are positions in `Function::blocks`.
    pub successors: Vec<usize>,
    pub predecessors: Vec<usize>,
}

impl BasicBlock {
    pub fn new(label: impl Into<String>, instructions: Vec<Instruction>) -> Self {
        let label = label.into();
        let kind = if label.starts_with(SPLICE_PREFIX) {
            BlockKind::Splice
        } else {
            BlockKind::Body
        };
        Self {
            label,
            kind,
            instructions,
            successors: Vec::new(),
            predecessors: Vec::new(),
        }
    }

    pub fn terminator(&self) -> &Op {
        &self
            .instructions
            .last()
            .expect("blocks are never empty")
            .op
    }

    pub fn entry_address(&self) -> u64 {
        self.instructions[0].address
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Function {
    pub name: String,
    /// Entry-point stub placed before the first block; empty when the
    /// program is not instrumented.
    pub prologue: Vec<Instruction>,
    pub blocks: Vec<BasicBlock>,
    /// Id of the unique block ending in `return`, if any.
    pub single_return: Option<usize>,
    pub address_taken: bool,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    /// Indirect entry, branch over, direct entry.
    pub fn is_dual_entry(&self) -> bool {
        self.prologue.len() > 1
    }

    /// Address of the function symbol (what `addrof` yields).
    pub fn address(&self) -> u64 {
        self.prologue
            .first()
            .map(|i| i.address)
            .unwrap_or_else(|| self.blocks[0].entry_address())
    }

    /// Address direct calls land on after call rewriting.
    pub fn direct_entry(&self) -> u64 {
        self.prologue
            .last()
            .map(|i| i.address)
            .unwrap_or_else(|| self.blocks[0].entry_address())
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.prologue
            .iter()
            .chain(self.blocks.iter().flat_map(|b| b.instructions.iter()))
    }

    pub fn instructions_mut(&mut self) -> impl Iterator<Item = &mut Instruction> {
        self.prologue
            .iter_mut()
            .chain(self.blocks.iter_mut().flat_map(|b| b.instructions.iter_mut()))
    }

    pub fn instruction_count(&self) -> usize {
        self.prologue.len() + self.blocks.iter().map(|b| b.instructions.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    /// Functions in emission order.
    pub functions: Vec<Function>,
    pub entry: String,
    /// Base address of the last layout; 0 before layout.
    pub base_address: u64,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn entry_function(&self) -> &Function {
        self.function(&self.entry).expect("entry function exists")
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.functions.iter().flat_map(|f| f.instructions())
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(Function::instruction_count).sum()
    }

    /// Static size in AArch64 instructions.
    pub fn machine_instruction_count(&self) -> u64 {
        self.instructions().map(|i| i.op.machine_cost()).sum()
    }

    pub fn is_instrumented(&self) -> bool {
        self.instructions().any(|i| i.op.is_cfi())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: register {reg} is reserved for the CFI runtime")]
    ReservedRegister { line: usize, col: usize, reg: String },
    #[error("function `{function}`: undefined label `{label}`")]
    UndefinedLabel { function: String, label: String },
    #[error("undefined function `{name}`")]
    UndefinedFunction { name: String },
    #[error("duplicate function `{name}`")]
    DuplicateFunction { name: String },
    #[error("function `{function}`: duplicate label `{label}`")]
    DuplicateLabel { function: String, label: String },
    #[error("function `{function}` has more than one return block")]
    MultipleReturns { function: String },
    #[error("function `{function}` never returns")]
    MissingReturn { function: String },
    #[error("function `{function}`: block `{label}` does not end in a terminator")]
    MissingTerminator { function: String, label: String },
    #[error("function `{function}`: conditional branch in `{label}` has no fallthrough block")]
    MissingFallthrough { function: String, label: String },
    #[error("function `{function}`: conditional branch in `{label}` targets its own fallthrough block")]
    DegenerateCondBranch { function: String, label: String },
    #[error("function `{function}`: block `{label}` is unreachable")]
    UnreachableBlock { function: String, label: String },
    #[error("function `{function}`: entry block has a predecessor")]
    EntryHasPredecessor { function: String },
    #[error("function `{function}`: malformed entry-point prologue")]
    BadPrologue { function: String },
    #[error("program defines no functions")]
    Empty,
    #[error("base address {base:#x} is not instruction aligned")]
    MisalignedBase { base: u64 },
    #[error("address {address:#x} exceeds the {va_bits}-bit address space")]
    AddressOverflow { address: u64, va_bits: u32 },
}

/// Structural validation shared by the parser and the passes.
pub fn verify(p: &Program) -> Result<(), IrError> {
    if p.functions.is_empty() {
        return Err(IrError::Empty);
    }
    let mut names = BTreeSet::new();
    for f in &p.functions {
        if !names.insert(f.name.as_str()) {
            return Err(IrError::DuplicateFunction { name: f.name.clone() });
        }
    }
    if p.function(&p.entry).is_none() {
        return Err(IrError::UndefinedFunction { name: p.entry.clone() });
    }
    for f in &p.functions {
        verify_function(p, f, &names)?;
    }
    Ok(())
}

fn verify_function(p: &Program, f: &Function, names: &BTreeSet<&str>) -> Result<(), IrError> {
    let fname = || f.name.clone();
    let mut labels = BTreeSet::new();
    for b in &f.blocks {
        if !labels.insert(b.label.as_str()) {
            return Err(IrError::DuplicateLabel { function: fname(), label: b.label.clone() });
        }
    }
    let check_fn = |name: &str| {
        if names.contains(name) {
            Ok(())
        } else {
            Err(IrError::UndefinedFunction { name: name.to_string() })
        }
    };
    let check_label = |label: &str| {
        if labels.contains(label) {
            Ok(())
        } else {
            Err(IrError::UndefinedLabel { function: fname(), label: label.to_string() })
        }
    };

    let mut returns = 0;
    for (bi, b) in f.blocks.iter().enumerate() {
        let Some((last, body)) = b.instructions.split_last() else {
            return Err(IrError::MissingTerminator { function: fname(), label: b.label.clone() });
        };
        if !last.op.is_terminator() || body.iter().any(|i| i.op.is_terminator()) {
            return Err(IrError::MissingTerminator { function: fname(), label: b.label.clone() });
        }
        for i in &b.instructions {
            match &i.op {
                Op::Branch { target } => check_label(target)?,
                Op::CondBranch { target, .. } => {
                    check_label(target)?;
                    let Some(next) = f.blocks.get(bi + 1) else {
                        return Err(IrError::MissingFallthrough {
                            function: fname(),
                            label: b.label.clone(),
                        });
                    };
                    if &next.label == target {
                        return Err(IrError::DegenerateCondBranch {
                            function: fname(),
                            label: b.label.clone(),
                        });
                    }
                }
                Op::Call { callee, .. } => check_fn(callee)?,
                Op::AddrOf { func, .. } => check_fn(func)?,
                Op::CallIndirect { candidates, .. } => {
                    for c in candidates {
                        check_fn(c)?;
                    }
                }
                Op::Return => returns += 1,
                _ => {}
            }
        }
    }
    if returns > 1 {
        return Err(IrError::MultipleReturns { function: fname() });
    }
    if returns == 0 && f.name != p.entry {
        return Err(IrError::MissingReturn { function: fname() });
    }
    verify_prologue(f)?;

    let g = build_cfg(f);
    if !g.blocks[0].predecessors.is_empty() {
        return Err(IrError::EntryHasPredecessor { function: fname() });
    }
    let order = reverse_post_order(&g);
    if order.len() != g.blocks.len() {
        let reached: BTreeSet<usize> = order.into_iter().collect();
        let b = (0..g.blocks.len()).find(|i| !reached.contains(i)).expect("one is missing");
        return Err(IrError::UnreachableBlock { function: fname(), label: g.blocks[b].label.clone() });
    }
    Ok(())
}

fn verify_prologue(f: &Function) -> Result<(), IrError> {
    let ops: Vec<&Op> = f.prologue.iter().map(|i| &i.op).collect();
    let ok = match ops.as_slice() {
        [] => true,
        [Op::CfiLoadRetPatch { .. }] => true,
        [Op::CfiPatch { role: PatchRole::IcallEntry, .. }, Op::CfiLoadRetPatch { .. }, Op::Branch { target }, Op::CfiLoadRetPatch { .. }] => {
            f.blocks.first().is_some_and(|b| &b.label == target)
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(IrError::BadPrologue { function: f.name.clone() })
    }
}

/// Recomputes `single_return`, `address_taken`, and CFG edges.
pub fn refresh(p: &mut Program) {
    let taken: BTreeSet<String> = p
        .instructions()
        .filter_map(|i| match &i.op {
            Op::AddrOf { func, .. } => Some(func.clone()),
            _ => None,
        })
        .collect();
    for f in &mut p.functions {
        f.address_taken = taken.contains(&f.name);
        f.single_return = f
            .blocks
            .iter()
            .position(|b| matches!(b.terminator(), Op::Return));
        *f = build_cfg(f);
    }
}
