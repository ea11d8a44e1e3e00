//! Deterministic interpreter with a fault-injection engine.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusProgram};
use crate::hexfmt::parse_word;
use crate::instrument::{CheckPolicy, Mode};
use crate::ir::{
    format_op, AluOp, CallEntry, Op, Program, Reg, INSTRUCTION_BYTES, RETPATCH_REG, SIG_REG,
    STATE_REG,
};
use crate::pac::{autiza, pacia, PacConfig, PacKey};
use crate::postprocess::{build, Build, BuildConfig, PostprocessError, StateMap};

pub const DEFAULT_FUEL: u64 = 10_000_000;
pub const DEFAULT_MEMORY_WORDS: usize = 1024;
pub const DEFAULT_MAX_CALL_DEPTH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot resolve location `{0}`")]
    BadLocation(String),
    #[error("invalid register `{0}`")]
    BadRegister(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("program is not laid out contiguously")]
    NotLaidOut,
    #[error(transparent)]
    Build(#[from] PostprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub fuel: u64,
    pub memory_words: usize,
    pub max_call_depth: usize,
    /// Record `(step, pc, state)` before every instruction.
    pub trace: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            fuel: DEFAULT_FUEL,
            memory_words: DEFAULT_MEMORY_WORDS,
            max_call_depth: DEFAULT_MAX_CALL_DEPTH,
            trace: false,
        }
    }
}

impl ExecConfig {
    pub fn traced() -> Self {
        Self { trace: true, ..Self::default() }
    }
}

/// Instruction with every symbolic operand resolved to an address.
#[derive(Debug, Clone, Copy)]
enum Insn {
    Const(Reg, u64),
    Alu(AluOp, Reg, Reg, Reg),
    Load(Reg, Reg, u64),
    Store(Reg, u64, Reg),
    Branch(u64),
    CondBranch(Reg, u64),
    Call(u64),
    CallIndirect(Reg),
    AddrOf(Reg, u64),
    Out(Reg),
    Return,
    Halt,
    Update,
    Patch(u64),
    LoadRetPatch(u64),
    ApplyRetPatch,
    Check(u64),
    Push,
    MixPop,
    LoadSig(u64),
    XorSig,
    Assert(u64),
}

impl Insn {
    fn is_call(self) -> bool {
        matches!(self, Insn::Call(_) | Insn::CallIndirect(_))
    }
}

/// A laid-out program ready to run.
#[derive(Debug, Clone)]
pub struct Image {
    base: u64,
    code: Vec<Insn>,
    costs: Vec<u8>,
    block_entry: Vec<bool>,
    entry_pc: u64,
    initial_state: u64,
    key: PacKey,
    pac: PacConfig,
}

impl Image {
    pub fn new(
        p: &Program,
        key: PacKey,
        pac: PacConfig,
        initial_state: u64,
    ) -> Result<Image, SimError> {
        let base = p.base_address;
        let symbols: BTreeMap<&str, (u64, u64)> = p
            .functions
            .iter()
            .map(|f| (f.name.as_str(), (f.address(), f.direct_entry())))
            .collect();
        let mut code = Vec::with_capacity(p.instruction_count());
        let mut costs = Vec::with_capacity(p.instruction_count());
        let mut block_entry = Vec::with_capacity(p.instruction_count());
        for f in &p.functions {
            let label = |l: &str| f.blocks[f.block_index(l).expect("verified label")].entry_address();
            let mut emit = |i: &crate::ir::Instruction, entry: bool| -> Result<(), SimError> {
                if i.address != base + INSTRUCTION_BYTES * code.len() as u64 {
                    return Err(SimError::NotLaidOut);
                }
                let insn = match &i.op {
                    Op::Const { dst, imm } => Insn::Const(*dst, *imm),
                    Op::Alu { op, dst, lhs, rhs } => Insn::Alu(*op, *dst, *lhs, *rhs),
                    Op::Load { dst, base, offset } => Insn::Load(*dst, *base, *offset),
                    Op::Store { base, offset, src } => Insn::Store(*base, *offset, *src),
                    Op::Branch { target } => Insn::Branch(label(target)),
                    Op::CondBranch { cond, target } => Insn::CondBranch(*cond, label(target)),
                    Op::Call { callee, entry } => {
                        let (sym, direct) = symbols[callee.as_str()];
                        Insn::Call(if *entry == CallEntry::Direct { direct } else { sym })
                    }
                    Op::CallIndirect { target, .. } => Insn::CallIndirect(*target),
                    Op::AddrOf { dst, func } => Insn::AddrOf(*dst, symbols[func.as_str()].0),
                    Op::Out { src } => Insn::Out(*src),
                    Op::Return => Insn::Return,
                    Op::Halt => Insn::Halt,
                    Op::CfiUpdate => Insn::Update,
                    Op::CfiPatch { value, .. } => Insn::Patch(*value),
                    Op::CfiLoadRetPatch { value } => Insn::LoadRetPatch(*value),
                    Op::CfiApplyRetPatch => Insn::ApplyRetPatch,
                    Op::CfiCheck { constant } => Insn::Check(*constant),
                    Op::CfiStatePush => Insn::Push,
                    Op::CfiStateMixPop => Insn::MixPop,
                    Op::CfiLoadSig { value } => Insn::LoadSig(*value),
                    Op::CfiXorSig => Insn::XorSig,
                    Op::CfiAssert { expected } => Insn::Assert(*expected),
                };
                code.push(insn);
                costs.push(i.op.machine_cost() as u8);
                block_entry.push(entry);
                Ok(())
            };
            for i in &f.prologue {
                emit(i, false)?;
            }
            for b in &f.blocks {
                for (k, i) in b.instructions.iter().enumerate() {
                    emit(i, k == 0)?;
                }
            }
        }
        let entry_pc = symbols[p.entry.as_str()].1;
        Ok(Image { base, code, costs, block_entry, entry_pc, initial_state, key, pac })
    }

    pub fn from_build(b: &Build) -> Image {
        Image::new(&b.program, b.config.key, b.config.pac, b.initial_state())
            .expect("builds are laid out")
    }

    fn index(&self, pc: u64) -> Option<usize> {
        let off = pc.checked_sub(self.base)?;
        if off % INSTRUCTION_BYTES != 0 {
            return None;
        }
        let k = (off / INSTRUCTION_BYTES) as usize;
        (k < self.code.len()).then_some(k)
    }

    pub fn contains(&self, pc: u64) -> bool {
        self.index(pc).is_some()
    }

    pub fn is_block_entry(&self, pc: u64) -> bool {
        self.index(pc).is_some_and(|k| self.block_entry[k])
    }

    pub fn block_entries(&self) -> Vec<u64> {
        (0..self.code.len())
            .filter(|&k| self.block_entry[k])
            .map(|k| self.base + INSTRUCTION_BYTES * k as u64)
            .collect()
    }

    pub fn entry_pc(&self) -> u64 {
        self.entry_pc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    /// Fires before the instruction with this dynamic step index (0-based).
    Step(u64),
    /// Fires on the `occurrence`-th (1-based) arrival at `address`.
    Address { address: u64, occurrence: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    /// The instruction is replaced by a jump to the target.
    RedirectBranch(u64),
    /// A call (direct or indirect) goes to the target instead; on any other
    /// instruction this behaves like [`Effect::RedirectBranch`].
    RedirectCall(u64),
    /// The instruction and the following `n - 1` are not executed.
    Skip(u64),
    /// Register write before the instruction executes; `r28` is the CFI state.
    CorruptRegister(Reg, u64),
    CorruptCfiState(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub trigger: Trigger,
    pub effect: Effect,
}

/// Fault trigger as written in fault files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TriggerSpec {
    Step { step: u64 },
    At {
        at: String,
        #[serde(default = "first_occurrence")]
        occurrence: u64,
    },
}

fn first_occurrence() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterWrite {
    pub reg: String,
    pub value: String,
}

/// Fault effect as written in fault files. Targets and values are locations:
/// a number, `fn`, `fn@direct`, `fn:label[+n]` or `fn/mnemonic[:operand][+n]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectSpec {
    RedirectBranch(String),
    RedirectCall(String),
    Skip(u64),
    CorruptRegister(RegisterWrite),
    CorruptCfiState(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub trigger: TriggerSpec,
    pub effect: EffectSpec,
}

/// Contents of a fault file: one fault or a list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaultFile {
    One(FaultSpec),
    Many(Vec<FaultSpec>),
}

impl FaultFile {
    pub fn into_specs(self) -> Vec<FaultSpec> {
        match self {
            FaultFile::One(f) => vec![f],
            FaultFile::Many(v) => v,
        }
    }
}

fn split_offset(s: &str) -> Result<(&str, u64), SimError> {
    match s.rsplit_once('+') {
        Some((head, n)) => {
            let n = parse_word(n.trim()).ok_or_else(|| SimError::BadLocation(s.to_string()))?;
            Ok((head.trim(), n))
        }
        None => Ok((s, 0)),
    }
}

/// Resolves a symbolic location against a laid-out program.
pub fn resolve_location(p: &Program, loc: &str) -> Result<u64, SimError> {
    let bad = || SimError::BadLocation(loc.to_string());
    let loc = loc.trim();
    if let Some(v) = parse_word(loc) {
        return Ok(v);
    }
    if let Some((fname, rest)) = loc.split_once('/') {
        let f = p.function(fname).ok_or_else(bad)?;
        let (sel, n) = split_offset(rest)?;
        let (mnemonic, arg) = match sel.split_once(':') {
            Some((m, a)) => (m, Some(a)),
            None => (sel, None),
        };
        let hit = f.instructions().find(|i| {
            let m = i.op.mnemonic();
            let name_ok = m == mnemonic || (mnemonic == "call" && matches!(i.op, Op::Call { .. }));
            let arg_ok = arg.is_none_or(|a| {
                format_op(&i.op)
                    .split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')')
                    .skip(1)
                    .any(|t| t == a)
            });
            name_ok && arg_ok
        });
        return hit.map(|i| i.address + INSTRUCTION_BYTES * n).ok_or_else(bad);
    }
    if let Some((fname, rest)) = loc.split_once(':') {
        let f = p.function(fname).ok_or_else(bad)?;
        let (label, n) = split_offset(rest)?;
        let b = f.block_index(label).ok_or_else(bad)?;
        return Ok(f.blocks[b].entry_address() + INSTRUCTION_BYTES * n);
    }
    if let Some(fname) = loc.strip_suffix("@direct") {
        return p.function(fname).map(|f| f.direct_entry()).ok_or_else(bad);
    }
    p.function(loc).map(|f| f.address()).ok_or_else(bad)
}

fn parse_reg(s: &str) -> Result<Reg, SimError> {
    s.strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| n <= STATE_REG.0)
        .map(Reg)
        .ok_or_else(|| SimError::BadRegister(s.to_string()))
}

impl FaultSpec {
    pub fn resolve(&self, p: &Program) -> Result<Fault, SimError> {
        let trigger = match &self.trigger {
            TriggerSpec::Step { step } => Trigger::Step(*step),
            TriggerSpec::At { at, occurrence } => {
                Trigger::Address { address: resolve_location(p, at)?, occurrence: *occurrence }
            }
        };
        let effect = match &self.effect {
            EffectSpec::RedirectBranch(t) => Effect::RedirectBranch(resolve_location(p, t)?),
            EffectSpec::RedirectCall(t) => Effect::RedirectCall(resolve_location(p, t)?),
            EffectSpec::Skip(n) => Effect::Skip(*n),
            EffectSpec::CorruptRegister(w) => {
                Effect::CorruptRegister(parse_reg(&w.reg)?, resolve_location(p, &w.value)?)
            }
            EffectSpec::CorruptCfiState(v) => Effect::CorruptCfiState(resolve_location(p, v)?),
        };
        Ok(Fault { trigger, effect })
    }
}

pub fn resolve_faults(p: &Program, specs: &[FaultSpec]) -> Result<Vec<Fault>, SimError> {
    specs.iter().map(|s| s.resolve(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CrashReason {
    /// Control reached an address that holds no instruction.
    BadPc {
        #[serde(with = "crate::hexfmt")]
        address: u64,
    },
    MemoryOutOfBounds {
        #[serde(with = "crate::hexfmt")]
        word: u64,
    },
    ShadowStackUnderflow,
    CallStackOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Completed,
    CfiTrap {
        #[serde(with = "crate::hexfmt")]
        address: u64,
        step: u64,
    },
    FuelExhausted,
    Crash { reason: CrashReason },
}

impl Verdict {
    pub fn is_trap(&self) -> bool {
        matches!(self, Verdict::CfiTrap { .. })
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, Verdict::Crash { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Completed => f.write_str("completed"),
            Verdict::CfiTrap { address, step } => {
                write!(f, "cfi trap at {address:#x} (step {step})")
            }
            Verdict::FuelExhausted => f.write_str("fuel exhausted"),
            Verdict::Crash { reason } => write!(f, "crash: {reason:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    #[serde(with = "crate::hexfmt")]
    pub pc: u64,
    #[serde(with = "crate::hexfmt")]
    pub state: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub outputs: Vec<u64>,
    /// Dispatched IR instructions.
    pub steps: u64,
    /// Executed AArch64-equivalent instructions.
    pub machine_instructions: u64,
    pub blocks_executed: u64,
    pub first_fault_step: Option<u64>,
    /// Blocks entered between the first fault and the trap.
    pub detection_latency: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<TraceEntry>,
}

struct Machine {
    regs: [u64; STATE_REG.0 as usize],
    state: u64,
    pc: u64,
    calls: Vec<u64>,
    shadow: Vec<u64>,
    memory: Vec<u64>,
    outputs: Vec<u64>,
}

impl Machine {
    fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    fn set(&mut self, r: Reg, v: u64) {
        if r == STATE_REG {
            self.state = v;
        } else {
            self.regs[r.index()] = v;
        }
    }

    fn word(&self, base: Reg, offset: u64) -> Result<usize, CrashReason> {
        let w = self.reg(base).wrapping_add(offset);
        if (w as usize) < self.memory.len() && w < self.memory.len() as u64 {
            Ok(w as usize)
        } else {
            Err(CrashReason::MemoryOutOfBounds { word: w })
        }
    }
}

/// Runs an image from its entry function with `inputs` in data words
/// `0..inputs.len()`.
pub fn execute(img: &Image, inputs: &[u64], faults: &[Fault], cfg: &ExecConfig) -> ExecutionResult {
    let mut memory = vec![0u64; cfg.memory_words.max(inputs.len())];
    memory[..inputs.len()].copy_from_slice(inputs);
    let mut m = Machine {
        regs: [0; STATE_REG.0 as usize],
        state: img.initial_state,
        pc: img.entry_pc,
        calls: Vec::new(),
        shadow: Vec::new(),
        memory,
        outputs: Vec::new(),
    };
    let mut seen = vec![0u64; faults.len()];
    let mut fired = vec![false; faults.len()];
    let mut steps = 0u64;
    let mut machine_instructions = 0u64;
    let mut blocks = 0u64;
    let mut first_fault: Option<(u64, u64)> = None;
    let mut trace = Vec::new();

    let verdict = loop {
        if steps >= cfg.fuel {
            break Verdict::FuelExhausted;
        }
        let Some(k) = img.index(m.pc) else {
            break Verdict::Crash { reason: CrashReason::BadPc { address: m.pc } };
        };
        let pc = m.pc;
        let step = steps;
        if img.block_entry[k] {
            blocks += 1;
        }
        if cfg.trace {
            trace.push(TraceEntry { step, pc, state: m.state });
        }
        steps += 1;
        let insn = img.code[k];

        let mut control = None;
        for (i, f) in faults.iter().enumerate() {
            let hit = match f.trigger {
                Trigger::Step(s) => s == step,
                Trigger::Address { address, occurrence } => {
                    address == pc && {
                        seen[i] += 1;
                        seen[i] == occurrence
                    }
                }
            };
            if !hit || fired[i] {
                continue;
            }
            fired[i] = true;
            first_fault.get_or_insert((step, blocks));
            match f.effect {
                Effect::CorruptRegister(r, v) => m.set(r, v),
                Effect::CorruptCfiState(v) => m.state = v,
                e => {
                    control.get_or_insert(e);
                }
            }
        }
        if let Some(e) = control {
            machine_instructions += 1;
            match e {
                Effect::RedirectCall(t) if insn.is_call() => {
                    if m.calls.len() >= cfg.max_call_depth {
                        break Verdict::Crash { reason: CrashReason::CallStackOverflow };
                    }
                    m.calls.push(pc + INSTRUCTION_BYTES);
                    m.pc = t;
                }
                Effect::RedirectCall(t) | Effect::RedirectBranch(t) => m.pc = t,
                Effect::Skip(n) => m.pc = pc.wrapping_add(INSTRUCTION_BYTES * n),
                _ => unreachable!("data effects are applied in place"),
            }
            continue;
        }

        machine_instructions += u64::from(img.costs[k]);
        let mut next = pc + INSTRUCTION_BYTES;
        match insn {
            Insn::Const(d, v) => m.set(d, v),
            Insn::Alu(op, d, a, b) => {
                let v = op.apply(m.reg(a), m.reg(b));
                m.set(d, v);
            }
            Insn::Load(d, b, off) => match m.word(b, off) {
                Ok(w) => {
                    let v = m.memory[w];
                    m.set(d, v);
                }
                Err(reason) => break Verdict::Crash { reason },
            },
            Insn::Store(b, off, s) => match m.word(b, off) {
                Ok(w) => m.memory[w] = m.reg(s),
                Err(reason) => break Verdict::Crash { reason },
            },
            Insn::Branch(t) => next = t,
            Insn::CondBranch(c, t) => {
                if m.reg(c) != 0 {
                    next = t;
                }
            }
            Insn::Call(_) | Insn::CallIndirect(_) => {
                if m.calls.len() >= cfg.max_call_depth {
                    break Verdict::Crash { reason: CrashReason::CallStackOverflow };
                }
                m.calls.push(next);
                next = match insn {
                    Insn::Call(t) => t,
                    Insn::CallIndirect(r) => m.reg(r),
                    _ => unreachable!(),
                };
            }
            Insn::AddrOf(d, a) => m.set(d, a),
            Insn::Out(r) => m.outputs.push(m.reg(r)),
            Insn::Return => match m.calls.pop() {
                Some(r) => next = r,
                None => break Verdict::Completed,
            },
            Insn::Halt => break Verdict::Completed,
            Insn::Update => m.state = pacia(m.state, pc, img.key, img.pac),
            Insn::Patch(v) => m.state ^= v,
            Insn::LoadRetPatch(v) => m.set(RETPATCH_REG, v),
            Insn::ApplyRetPatch => m.state ^= m.reg(RETPATCH_REG),
            Insn::Check(c) => {
                if autiza(m.state ^ c, img.key, img.pac).is_err() {
                    break Verdict::CfiTrap { address: pc, step };
                }
            }
            Insn::Push => {
                if m.shadow.len() >= cfg.max_call_depth {
                    break Verdict::Crash { reason: CrashReason::CallStackOverflow };
                }
                m.shadow.push(m.state);
            }
            Insn::MixPop => match m.shadow.pop() {
                Some(v) => m.state ^= v,
                None => break Verdict::Crash { reason: CrashReason::ShadowStackUnderflow },
            },
            Insn::LoadSig(v) => m.set(SIG_REG, v),
            Insn::XorSig => m.state ^= m.reg(SIG_REG),
            Insn::Assert(e) => {
                if m.state != e {
                    break Verdict::CfiTrap { address: pc, step };
                }
            }
        }
        m.pc = next;
    };

    let detection_latency = match (verdict, first_fault) {
        (Verdict::CfiTrap { .. }, Some((_, at))) => Some(blocks - at),
        _ => None,
    };
    ExecutionResult {
        verdict,
        outputs: m.outputs,
        steps,
        machine_instructions,
        blocks_executed: blocks,
        first_fault_step: first_fault.map(|(s, _)| s),
        detection_latency,
        trace,
    }
}

/// Runs an XOR-baseline build. Identical machine; the signatures it XORs
/// are public constants, so register faults can forge any state.
pub fn execute_baseline_xor(
    img: &Image,
    inputs: &[u64],
    faults: &[Fault],
    cfg: &ExecConfig,
) -> ExecutionResult {
    debug_assert!(!img.code.iter().any(|i| matches!(i, Insn::Update | Insn::Check(_))));
    execute(img, inputs, faults, cfg)
}

/// Builds the image for `b` and runs it.
pub fn run_build(b: &Build, inputs: &[u64], faults: &[Fault], cfg: &ExecConfig) -> ExecutionResult {
    execute(&Image::from_build(b), inputs, faults, cfg)
}

/// First traced instruction whose state differs from the expected one, as
/// `(step, pc, expected, actual)`.
pub fn first_state_mismatch(states: &StateMap, r: &ExecutionResult) -> Option<(u64, u64, u64, u64)> {
    r.trace.iter().find_map(|t| match states.get(t.pc) {
        Some(e) if e != t.state => Some((t.step, t.pc, e, t.state)),
        _ => None,
    })
}

/// Bundled attack scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// `main` calls `b`; no fault.
    Fig3Benign,
    /// The call to `b` is redirected to `c`.
    Fig3Redirect,
    /// Redirect into `c` past its signature load, with the signature
    /// register forged so `c` ends in `b`'s end state.
    Fig3Forge,
    /// The indirect-call target register is corrupted to point at a gadget.
    Nacl,
    /// A faulted load becomes a jump into an unlock routine.
    Ecu,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::Fig3Benign, Scenario::Fig3Redirect, Scenario::Fig3Forge, Scenario::Nacl, Scenario::Ecu];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig3Benign => "fig3-benign",
            Scenario::Fig3Redirect => "fig3-redirect",
            Scenario::Fig3Forge => "fig3-forge",
            Scenario::Nacl => "nacl",
            Scenario::Ecu => "ecu",
        }
    }

    pub fn program(self) -> &'static CorpusProgram {
        let name = match self {
            Scenario::Fig3Benign | Scenario::Fig3Redirect | Scenario::Fig3Forge => "fig3",
            Scenario::Nacl => "nacl",
            Scenario::Ecu => "ecu",
        };
        corpus::get(name).expect("bundled")
    }

    pub fn policy(self) -> CheckPolicy {
        match self {
            Scenario::Nacl | Scenario::Ecu => CheckPolicy::EndOfFunction,
            _ => CheckPolicy::EndOfProgram,
        }
    }

    pub fn inputs(self) -> &'static [u64] {
        self.program().inputs[0]
    }

    /// Faults for a build of [`Scenario::program`].
    pub fn faults(self, b: &Build) -> Vec<FaultSpec> {
        let at = |loc: &str| TriggerSpec::At { at: loc.to_string(), occurrence: 1 };
        match self {
            Scenario::Fig3Benign => Vec::new(),
            Scenario::Fig3Redirect => vec![FaultSpec {
                trigger: at("main/call:b"),
                effect: EffectSpec::RedirectCall("c".into()),
            }],
            Scenario::Fig3Forge => {
                // S_B_end ⊕ S_B_begin: what the skipped signature load of `b` would give
                let forged = match (&b.signatures, b.states.function_end.get("b")) {
                    (Some(s), Some(end)) => s.begin("b") ^ end,
                    _ => 0,
                };
                let landing = match b.config.mode {
                    Mode::Fipac => "c/cfi.update",
                    Mode::XorBaseline => "c/cfi.xorsig",
                    Mode::None => "c:entry",
                };
                vec![
                    FaultSpec {
                        trigger: at("main/call:b"),
                        effect: EffectSpec::CorruptRegister(RegisterWrite {
                            reg: format!("r{}", SIG_REG.0),
                            value: format!("{forged:#x}"),
                        }),
                    },
                    FaultSpec {
                        trigger: at("main/call:b"),
                        effect: EffectSpec::RedirectCall(landing.into()),
                    },
                ]
            }
            Scenario::Nacl => vec![FaultSpec {
                trigger: at("main/icall"),
                effect: EffectSpec::CorruptRegister(RegisterWrite {
                    reg: "r5".into(),
                    value: "escape".into(),
                }),
            }],
            Scenario::Ecu => vec![FaultSpec {
                trigger: at("process/load"),
                effect: EffectSpec::RedirectBranch("unlock:grant".into()),
            }],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

/// Runs a scenario on an existing build of its program.
pub fn run_scenario_on(s: Scenario, b: &Build, cfg: &ExecConfig) -> Result<ExecutionResult, SimError> {
    let faults = resolve_faults(&b.program, &s.faults(b))?;
    Ok(run_build(b, s.inputs(), &faults, cfg))
}

/// Builds the scenario program in `mode` under the scenario's policy and runs it.
pub fn run_scenario(
    name: &str,
    mode: Mode,
    key: PacKey,
    seed: u64,
) -> Result<(Build, ExecutionResult), SimError> {
    let s: Scenario = name.parse()?;
    let cfg = BuildConfig::new(mode, s.policy(), key).with_seed(seed);
    let b = build(&s.program().program(), cfg)?;
    let r = run_scenario_on(s, &b, &ExecConfig::default())?;
    Ok((b, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ATTACKER_MARKER;

    const KEY: PacKey = PacKey::new(0x0123_4567_89AB_CDEF, 0x89AB_CDEF_0123_4567);

    fn fipac(name: &str, policy: CheckPolicy) -> Build {
        let p = corpus::get(name).unwrap().program();
        build(&p, BuildConfig::new(Mode::Fipac, policy, KEY).with_seed(3)).unwrap()
    }

    #[test]
    fn locations() {
        let b = fipac("fig3", CheckPolicy::EndOfProgram);
        let p = &b.program;
        let main = p.function("main").unwrap();
        assert_eq!(resolve_location(p, "main").unwrap(), main.address());
        assert_eq!(resolve_location(p, "0x400000").unwrap(), 0x40_0000);
        assert_eq!(resolve_location(p, "b:entry").unwrap(), p.function("b").unwrap().blocks[0].entry_address());
        assert_eq!(
            resolve_location(p, "b:entry+1").unwrap(),
            p.function("b").unwrap().blocks[0].entry_address() + 4
        );
        let call = resolve_location(p, "main/call:b").unwrap();
        assert!(main.instructions().any(|i| i.address == call && matches!(i.op, Op::Call { .. })));
        assert!(resolve_location(p, "nope").is_err());
        assert!(resolve_location(p, "main/call:zz").is_err());
    }

    #[test]
    fn fault_file_json() {
        let json = r#"[{"trigger": {"at": "main/call:b"}, "effect": {"redirect-call": "c"}},
                       {"trigger": {"step": 3}, "effect": {"corrupt-register": {"reg": "r5", "value": "0x10"}}},
                       {"trigger": {"step": 4}, "effect": {"skip": 1}}]"#;
        let f: FaultFile = serde_json::from_str(json).unwrap();
        let specs = f.into_specs();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].trigger, TriggerSpec::At { at: "main/call:b".into(), occurrence: 1 });
        let b = fipac("fig3", CheckPolicy::EndOfProgram);
        let faults = resolve_faults(&b.program, &specs).unwrap();
        assert_eq!(faults[1].effect, Effect::CorruptRegister(Reg(5), 0x10));
        let round: FaultFile = serde_json::from_str(&serde_json::to_string(&specs).unwrap()).unwrap();
        assert_eq!(round.into_specs(), specs);
    }

    #[test]
    fn benign_fig3_outputs() {
        let (_, r) = run_scenario("fig3-benign", Mode::Fipac, KEY, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Completed);
        assert_eq!(r.outputs, vec![42]);
    }

    #[test]
    fn fig3_redirect_is_detected_everywhere_it_is_protected() {
        for mode in [Mode::Fipac, Mode::XorBaseline] {
            let (_, r) = run_scenario("fig3-redirect", mode, KEY, 1).unwrap();
            assert!(r.verdict.is_trap(), "{mode}: {:?}", r.verdict);
            assert!(r.outputs.contains(&ATTACKER_MARKER));
        }
        let (_, r) = run_scenario("fig3-redirect", Mode::None, KEY, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Completed);
    }

    #[test]
    fn fig3_forge_beats_only_the_baseline() {
        let (_, r) = run_scenario("fig3-forge", Mode::XorBaseline, KEY, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Completed);
        assert_eq!(r.outputs, vec![ATTACKER_MARKER, ATTACKER_MARKER]);
        let (_, r) = run_scenario("fig3-forge", Mode::Fipac, KEY, 1).unwrap();
        assert!(r.verdict.is_trap());
    }

    #[test]
    fn exploit_scenarios() {
        for name in ["nacl", "ecu"] {
            let (_, r) = run_scenario(name, Mode::Fipac, KEY, 1).unwrap();
            assert!(r.verdict.is_trap(), "{name}: {:?}", r.verdict);
            assert!(r.detection_latency.unwrap() >= 1);
            let (_, r) = run_scenario(name, Mode::None, KEY, 1).unwrap();
            assert_eq!(r.verdict, Verdict::Completed, "{name}");
            assert!(r.outputs.contains(&ATTACKER_MARKER), "{name}");
        }
        assert!(matches!(run_scenario("x", Mode::None, KEY, 1), Err(SimError::UnknownScenario(_))));
    }

    #[test]
    fn traced_states_match_the_state_map() {
        for c in corpus::PROGRAMS {
            for policy in CheckPolicy::ALL {
                for mode in [Mode::Fipac, Mode::XorBaseline] {
                    let b = build(&c.program(), BuildConfig::new(mode, policy, KEY).with_seed(9)).unwrap();
                    for input in c.inputs {
                        let r = run_build(&b, input, &[], &ExecConfig::traced());
                        assert_eq!(r.verdict, Verdict::Completed, "{} {mode} {policy}", c.name);
                        assert_eq!(first_state_mismatch(&b.states, &r), None, "{}", c.name);
                    }
                }
            }
        }
    }

    #[test]
    fn state_corruption_before_a_check_traps() {
        let b = fipac("diamond", CheckPolicy::EveryBasicBlock);
        let check = resolve_location(&b.program, "main/cfi.check").unwrap();
        let expected = b.states.get(check).unwrap();
        let fault = |delta| Fault {
            trigger: Trigger::Address { address: check, occurrence: 1 },
            effect: Effect::CorruptCfiState(expected ^ delta),
        };
        let r = run_build(&b, &[3], &[fault(1 << 60)], &ExecConfig::default());
        assert_eq!(r.verdict, Verdict::CfiTrap { address: check, step: r.steps - 1 });
        assert_eq!(r.detection_latency, Some(0));
        let r = run_build(&b, &[3], &[fault(0)], &ExecConfig::default());
        assert_eq!(r.verdict, Verdict::Completed);
    }

    #[test]
    fn skipped_check_is_caught_by_the_next_one() {
        for policy in [CheckPolicy::EveryBasicBlock, CheckPolicy::EndOfFunction] {
            let b = fipac("fig3", policy);
            let faults = resolve_faults(&b.program, &Scenario::Fig3Redirect.faults(&b)).unwrap();
            let first = run_build(&b, &[21], &faults, &ExecConfig::default());
            let Verdict::CfiTrap { step, address } = first.verdict else { panic!() };
            let mut more = faults.clone();
            more.push(Fault { trigger: Trigger::Step(step), effect: Effect::Skip(1) });
            let second = run_build(&b, &[21], &more, &ExecConfig::default());
            let Verdict::CfiTrap { address: later, .. } = second.verdict else {
                panic!("{policy}: {:?}", second.verdict)
            };
            assert_ne!(later, address);
        }
    }

    #[test]
    fn crashes_and_fuel() {
        let b = fipac("loop", CheckPolicy::EndOfProgram);
        let cfg = ExecConfig { fuel: 5, ..ExecConfig::default() };
        assert_eq!(run_build(&b, &[30], &[], &cfg).verdict, Verdict::FuelExhausted);
        let wild = Fault { trigger: Trigger::Step(2), effect: Effect::RedirectBranch(0x10) };
        assert_eq!(
            run_build(&b, &[3], &[wild], &ExecConfig::default()).verdict,
            Verdict::Crash { reason: CrashReason::BadPc { address: 0x10 } }
        );
        let oob = corpus::get("straight").unwrap().program();
        let none = build(&oob, BuildConfig::new(Mode::None, CheckPolicy::EndOfProgram, KEY)).unwrap();
        let cfg = ExecConfig { memory_words: 1, ..ExecConfig::default() };
        assert_eq!(
            run_build(&none, &[1], &[], &cfg).verdict,
            Verdict::Crash { reason: CrashReason::MemoryOutOfBounds { word: 1 } }
        );
    }

    #[test]
    fn verdict_json() {
        let v = Verdict::CfiTrap { address: 0x400010, step: 7 };
        let j = serde_json::to_value(v).unwrap();
        assert_eq!(j["verdict"], "cfi-trap");
        assert_eq!(j["address"], "0x0000000000400010");
    }
}
