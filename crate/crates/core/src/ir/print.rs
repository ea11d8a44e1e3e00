use std::fmt::Write;

use super::{Op, Program};

fn word(v: u64) -> String {
    format!("{v:#018x}")
}

pub fn format_op(op: &Op) -> String {
    let m = op.mnemonic();
    match op {
        Op::Const { dst, imm } => format!("{m} {dst}, {imm}"),
        Op::Alu { op, dst, lhs, rhs } => format!("{m} {} {dst}, {lhs}, {rhs}", op.mnemonic()),
        Op::Load { dst, base, offset } => format!("{m} {dst}, [{base} + {offset}]"),
        Op::Store { base, offset, src } => format!("{m} [{base} + {offset}], {src}"),
        Op::Branch { target } => format!("{m} {target}"),
        Op::CondBranch { cond, target } => format!("{m} {cond}, {target}"),
        Op::Call { callee, .. } => format!("{m} {callee}"),
        Op::CallIndirect { target, candidates } => {
            format!("{m} {target} targets({})", candidates.join(", "))
        }
        Op::AddrOf { dst, func } => format!("{m} {dst}, {func}"),
        Op::Out { src } => format!("{m} {src}"),
        Op::CfiPatch { role, value } => format!("{m} {}, {}", role.name(), word(*value)),
        Op::CfiLoadRetPatch { value } | Op::CfiLoadSig { value } => format!("{m} {}", word(*value)),
        Op::CfiCheck { constant } => format!("{m} {}", word(*constant)),
        Op::CfiAssert { expected } => format!("{m} {}", word(*expected)),
        Op::Return
        | Op::Halt
        | Op::CfiUpdate
        | Op::CfiApplyRetPatch
        | Op::CfiStatePush
        | Op::CfiStateMixPop
        | Op::CfiXorSig => m.to_string(),
    }
}

/// Canonical text form. `parse_program(print_program(p))` reproduces `p`
/// up to instruction addresses.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for (i, f) in p.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "fn {} {{", f.name).unwrap();
        for inst in &f.prologue {
            writeln!(out, "    {}", format_op(&inst.op)).unwrap();
        }
        for b in &f.blocks {
            writeln!(out, "{}:", b.label).unwrap();
            for inst in &b.instructions {
                writeln!(out, "    {}", format_op(&inst.op)).unwrap();
            }
        }
        out.push_str("}\n");
    }
    out
}
