use super::{IrError, Program, INSTRUCTION_BYTES};

/// Assigns `base + 4·k` to the k-th instruction in emission order
/// (functions in order, prologue first, then blocks).
pub fn layout_addresses(p: &Program, base: u64, va_bits: u32) -> Result<Program, IrError> {
    if !base.is_multiple_of(INSTRUCTION_BYTES) {
        return Err(IrError::MisalignedBase { base });
    }
    let limit: u128 = 1u128 << va_bits;
    let mut q = p.clone();
    q.base_address = base;
    let mut next = base as u128;
    for f in &mut q.functions {
        for inst in f.instructions_mut() {
            if next >= limit {
                return Err(IrError::AddressOverflow { address: next as u64, va_bits });
            }
            inst.address = next as u64;
            next += INSTRUCTION_BYTES as u128;
        }
    }
    Ok(q)
}
