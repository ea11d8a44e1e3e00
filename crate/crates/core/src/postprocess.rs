//! Post-processing tool: start signatures, state propagation over the laid-out
//! program, and resolution of every patch, return-patch and check constant.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::instrument::{self, icall_classes, CheckPolicy, IcallClasses, InstrumentError, Manifest, Mode};
use crate::ir::{
    build_cfg, layout_addresses, print_program, CallEntry, Function, IrError, Op, PatchRole, Program,
    INSTRUCTION_BYTES,
};
use crate::pac::{mix64, pacia, sign_zero, PacConfig, PacKey};

pub const DEFAULT_BASE_ADDRESS: u64 = 0x40_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PostprocessError {
    #[error("function `{function}`: block `{label}` has no unpatched incoming edge")]
    NoTreeEdge { function: String, label: String },
    #[error("function `{function}`: block `{label}` is entered with two different states")]
    Inconsistent { function: String, label: String },
    #[error("function `{function}`: states depend on its own end state (no call-free path to return)")]
    Unresolved { function: String },
    #[error("function `{function}` calls `{callee}`, which never returns")]
    NonReturningCallee { function: String, callee: String },
    #[error("no expected state for slot at {address:#x}")]
    UnresolvedSlot { address: u64 },
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn name_hash(domain: &str, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

fn derive(seed: u64, domain: &str, id: &str) -> u64 {
    let h = name_hash(domain, id);
    mix64(mix64(seed ^ h) ^ h.rotate_left(32))
}

/// Start signatures and intermediate states, all derived from the build seed.
///
/// They occupy only the PAC field, so every state in a benign run has a zero
/// payload and differs from its neighbours by exactly one truncated MAC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signatures {
    pub seed: u64,
    pub function_begin: BTreeMap<String, u64>,
    pub classes: IcallClasses,
    pub class_begin: Vec<u64>,
    pub class_end: Vec<u64>,
}

impl Signatures {
    /// Public per-block signature used by the XOR baseline.
    pub fn block_signature(&self, address: u64) -> u64 {
        mix64(derive(self.seed, "block", "") ^ address)
    }

    pub fn begin(&self, function: &str) -> u64 {
        self.function_begin[function]
    }
}

pub fn assign_start_signatures(
    p: &Program,
    seed: u64,
    cfg: PacConfig,
) -> Result<Signatures, PostprocessError> {
    let classes = icall_classes(p)?;
    let function_begin = p
        .functions
        .iter()
        .map(|f| (f.name.clone(), cfg.pac_field(derive(seed, "function", &f.name))))
        .collect();
    let ids: Vec<String> = (0..classes.classes.len()).map(|c| classes.class_id(c)).collect();
    let class_begin = ids.iter().map(|id| cfg.pac_field(derive(seed, "icall-begin", id))).collect();
    let class_end = ids.iter().map(|id| cfg.pac_field(derive(seed, "icall-end", id))).collect();
    Ok(Signatures { seed, function_begin, classes, class_begin, class_end })
}

/// Expected CFI state before every instruction of a laid-out program.
///
/// `return` instructions are absent: the state there depends on which entry
/// point was used.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateMap {
    pub states: BTreeMap<u64, u64>,
    /// State just before the return-patch application of each returning function.
    pub function_end: BTreeMap<String, u64>,
}

impl StateMap {
    pub fn get(&self, address: u64) -> Option<u64> {
        self.states.get(&address).copied()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (a, s) in &self.states {
            h.update(a.to_le_bytes());
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Points every direct call at the callee's direct entry.
pub fn rewrite_direct_calls(p: &Program) -> Program {
    let mut q = p.clone();
    for f in &mut q.functions {
        for i in f.instructions_mut() {
            if let Op::Call { entry, .. } = &mut i.op {
                *entry = CallEntry::Direct;
            }
        }
    }
    q
}

struct Ctx<'a> {
    sigs: &'a Signatures,
    key: PacKey,
    cfg: PacConfig,
    returns: BTreeMap<&'a str, bool>,
}

struct FunctionStates {
    before: BTreeMap<u64, Option<u64>>,
    end: Option<u64>,
}

fn has_merge_patch(f: &Function, b: usize) -> bool {
    matches!(f.blocks[b].terminator(), Op::Branch { .. })
        && f.blocks[b]
            .instructions
            .iter()
            .any(|i| matches!(i.op, Op::CfiPatch { role: PatchRole::Merge, .. }))
}

fn analyze(
    ctx: &Ctx<'_>,
    f: &Function,
    ends: &BTreeMap<String, u64>,
) -> Result<FunctionStates, PostprocessError> {
    let g = build_cfg(f);
    let n = g.blocks.len();
    let err_label = |b: usize| g.blocks[b].label.clone();
    let begin = ctx.sigs.begin(&f.name);
    let mut before: BTreeMap<u64, Option<u64>> = BTreeMap::new();

    let class = ctx.sigs.classes.class_of(&f.name);
    if f.is_dual_entry() {
        let c = class.expect("dual-entry function belongs to a class");
        before.insert(f.prologue[0].address, Some(ctx.sigs.class_begin[c]));
        for i in &f.prologue[1..] {
            before.insert(i.address, Some(begin));
        }
    } else {
        for i in &f.prologue {
            before.insert(i.address, Some(begin));
        }
    }

    // Unpatched edges form the spanning tree; each non-entry block has
    // exactly one tree parent, the lowest-id unpatched predecessor.
    let patched: Vec<bool> = (0..n).map(|b| has_merge_patch(&g, b)).collect();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut parent = vec![None; n];
    for v in 1..n {
        let u = g.blocks[v]
            .predecessors
            .iter()
            .copied()
            .find(|&u| !patched[u])
            .ok_or_else(|| PostprocessError::NoTreeEdge {
                function: f.name.clone(),
                label: err_label(v),
            })?;
        parent[v] = Some(u);
        children[u].push(v);
    }

    let mut entry: Vec<Option<u64>> = vec![None; n];
    let mut exit: Vec<Option<u64>> = vec![None; n];
    let mut reached = vec![false; n];
    let mut end = None;
    entry[0] = Some(begin);
    reached[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(b) = queue.pop_front() {
        let insts = &g.blocks[b].instructions;
        let mut s = entry[b];
        let mut pushed: Vec<Option<u64>> = Vec::new();
        for (k, inst) in insts.iter().enumerate() {
            let a = inst.address;
            if !matches!(inst.op, Op::Return) {
                before.insert(a, s);
            }
            match &inst.op {
                Op::CfiUpdate => s = s.map(|v| pacia(v, a, ctx.key, ctx.cfg)),
                Op::CfiXorSig => {
                    let sig_at = insts[k - 1].address;
                    s = s.map(|v| v ^ ctx.sigs.block_signature(sig_at));
                }
                Op::CfiPatch { role: PatchRole::Merge, .. } => s = None, // fixed up below
                Op::CfiPatch { role: PatchRole::DirectCall, .. } => {
                    let Op::Call { callee, .. } = &insts[k + 1].op else {
                        unreachable!("call patch precedes its call")
                    };
                    s = Some(ctx.sigs.begin(callee));
                }
                Op::CfiPatch { role: PatchRole::IcallPre, .. } => {
                    let Op::CallIndirect { candidates, .. } = &insts[k + 1].op else {
                        unreachable!("icall patch precedes its icall")
                    };
                    let c = ctx.sigs.classes.class_of(&candidates[0]).expect("classified");
                    s = Some(ctx.sigs.class_begin[c]);
                }
                Op::Call { callee, .. } => {
                    if !ctx.returns[callee.as_str()] {
                        return Err(PostprocessError::NonReturningCallee {
                            function: f.name.clone(),
                            callee: callee.clone(),
                        });
                    }
                    s = ends.get(callee).copied();
                }
                Op::CallIndirect { candidates, .. } => {
                    let c = ctx.sigs.classes.class_of(&candidates[0]).expect("classified");
                    s = Some(ctx.sigs.class_end[c]);
                }
                Op::CfiStatePush => pushed.push(s),
                Op::CfiStateMixPop => {
                    let saved = pushed.pop().expect("push precedes mix-pop");
                    s = s.zip(saved).map(|(x, y)| x ^ y);
                }
                Op::CfiApplyRetPatch => end = s,
                _ => {}
            }
        }
        exit[b] = before.get(&insts.last().expect("non-empty").address).copied().flatten();
        if matches!(insts.last().map(|i| &i.op), Some(Op::Return)) {
            exit[b] = s;
        }
        for &c in &children[b] {
            entry[c] = exit[b];
            reached[c] = true;
            queue.push_back(c);
        }
    }
    if let Some(v) = reached.iter().position(|r| !r) {
        return Err(PostprocessError::NoTreeEdge { function: f.name.clone(), label: err_label(v) });
    }

    for b in 0..n {
        if patched[b] {
            let target = g.blocks[b].successors[0];
            let branch = g.blocks[b].instructions.last().expect("non-empty").address;
            before.insert(branch, entry[target]);
        }
    }
    for v in 1..n {
        for &u in &g.blocks[v].predecessors {
            if patched[u] || Some(u) == parent[v] {
                continue;
            }
            if let (Some(x), Some(y)) = (exit[u], entry[v]) {
                if x != y {
                    return Err(PostprocessError::Inconsistent {
                        function: f.name.clone(),
                        label: err_label(v),
                    });
                }
            }
        }
    }
    Ok(FunctionStates { before, end })
}

/// Forward propagation of expected states.
///
/// Block entry states flow along unpatched (spanning-tree) edges; patched
/// edges take the destination's entry state. Calls substitute the callee's
/// begin/end pair, indirect calls the class's intermediate pair mixed with
/// the saved pre-call state. End states of recursive functions are found by
/// iterating until no more become known.
pub fn propagate_states(
    p: &Program,
    sigs: &Signatures,
    key: PacKey,
    cfg: PacConfig,
) -> Result<StateMap, PostprocessError> {
    let ctx = Ctx {
        sigs,
        key,
        cfg,
        returns: p.functions.iter().map(|f| (f.name.as_str(), f.single_return.is_some())).collect(),
    };
    let mut ends: BTreeMap<String, u64> = BTreeMap::new();
    loop {
        let mut changed = false;
        for f in &p.functions {
            if f.single_return.is_none() || ends.contains_key(&f.name) {
                continue;
            }
            if let Some(e) = analyze(&ctx, f, &ends)?.end {
                ends.insert(f.name.clone(), e);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if let Some(f) = p.functions.iter().find(|f| f.single_return.is_some() && !ends.contains_key(&f.name)) {
        return Err(PostprocessError::Unresolved { function: f.name.clone() });
    }
    let mut map = StateMap { states: BTreeMap::new(), function_end: ends.clone() };
    for f in &p.functions {
        let r = analyze(&ctx, f, &ends)?;
        for (a, s) in r.before {
            let s = s.ok_or_else(|| PostprocessError::Unresolved { function: f.name.clone() })?;
            map.states.insert(a, s);
        }
    }
    Ok(map)
}

/// Fills merge, call, icall and entry patches, return patches and baseline
/// signature loads.
pub fn resolve_patches(
    p: &Program,
    states: &StateMap,
    sigs: &Signatures,
) -> Result<Program, PostprocessError> {
    let lookup = |a: u64| states.get(a).ok_or(PostprocessError::UnresolvedSlot { address: a });
    let mut q = p.clone();
    for f in &mut q.functions {
        let dual = f.is_dual_entry();
        let ret_patch = match (dual, states.function_end.get(&f.name)) {
            (true, Some(end)) => {
                let c = sigs.classes.class_of(&f.name).expect("dual-entry function is classified");
                end ^ sigs.class_end[c]
            }
            _ => 0,
        };
        for (k, inst) in f.instructions_mut().enumerate() {
            let a = inst.address;
            match &mut inst.op {
                Op::CfiPatch { value, .. } => *value = lookup(a)? ^ lookup(a + INSTRUCTION_BYTES)?,
                Op::CfiLoadRetPatch { value } if dual && k == 1 => *value = ret_patch,
                Op::CfiLoadSig { value } => *value = sigs.block_signature(a),
                _ => {}
            }
        }
    }
    Ok(q)
}

/// Fills check constants: `S* ⊕ sign_zero(address)` for keyed checks, the
/// expected state itself for baseline assertions.
pub fn resolve_checks(
    p: &Program,
    states: &StateMap,
    key: PacKey,
    cfg: PacConfig,
) -> Result<Program, PostprocessError> {
    let mut q = p.clone();
    for f in &mut q.functions {
        for inst in f.instructions_mut() {
            let a = inst.address;
            match &mut inst.op {
                Op::CfiCheck { constant } => {
                    let s = states.get(a).ok_or(PostprocessError::UnresolvedSlot { address: a })?;
                    *constant = s ^ sign_zero(a, key, cfg);
                }
                Op::CfiAssert { expected } => {
                    *expected =
                        states.get(a).ok_or(PostprocessError::UnresolvedSlot { address: a })?;
                }
                _ => {}
            }
        }
    }
    Ok(q)
}

/// Result of post-processing an instrumented program.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub program: Program,
    pub states: StateMap,
    pub signatures: Signatures,
}

/// Runs the post-processing steps on an instrumented, unresolved program.
pub fn postprocess(
    instrumented: &Program,
    base: u64,
    key: PacKey,
    seed: u64,
    cfg: PacConfig,
) -> Result<Resolved, PostprocessError> {
    let rewritten = rewrite_direct_calls(instrumented);
    let laid = layout_addresses(&rewritten, base, cfg.va_bits())?;
    let signatures = assign_start_signatures(&laid, seed, cfg)?;
    let states = propagate_states(&laid, &signatures, key, cfg)?;
    let patched = resolve_patches(&laid, &states, &signatures)?;
    let program = resolve_checks(&patched, &states, key, cfg)?;
    Ok(Resolved { program, states, signatures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub mode: Mode,
    pub policy: CheckPolicy,
    #[serde(skip)]
    pub key: PacKey,
    #[serde(with = "crate::hexfmt")]
    pub seed: u64,
    #[serde(with = "crate::hexfmt")]
    pub base_address: u64,
    pub pac: PacConfig,
}

impl BuildConfig {
    pub fn new(mode: Mode, policy: CheckPolicy, key: PacKey) -> Self {
        Self { mode, policy, key, seed: 0, base_address: DEFAULT_BASE_ADDRESS, pac: PacConfig::default() }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_pac(self, pac: PacConfig) -> Self {
        Self { pac, ..self }
    }

    pub fn with_base(self, base_address: u64) -> Self {
        Self { base_address, ..self }
    }
}

/// A complete build: instrumented, laid out and resolved.
#[derive(Debug, Clone)]
pub struct Build {
    pub config: BuildConfig,
    pub source: Program,
    /// Instrumented program with unresolved (zero) constants.
    pub instrumented: Program,
    pub program: Program,
    pub states: StateMap,
    /// `None` for uninstrumented builds.
    pub signatures: Option<Signatures>,
    pub manifest: Manifest,
}

impl Build {
    /// CFI state the entry function starts with.
    pub fn initial_state(&self) -> u64 {
        self.signatures.as_ref().map_or(0, |s| s.begin(&self.program.entry))
    }

    /// Resolves the same instrumented program under another key and seed.
    /// Addresses do not change.
    pub fn rekey(&self, key: PacKey, seed: u64) -> Result<Build, PostprocessError> {
        let config = BuildConfig { key, seed, ..self.config };
        if config.mode == Mode::None {
            return Ok(Build { config, ..self.clone() });
        }
        let r = postprocess(&self.instrumented, config.base_address, key, config.seed, config.pac)?;
        Ok(Build {
            config,
            source: self.source.clone(),
            instrumented: self.instrumented.clone(),
            program: r.program,
            states: r.states,
            signatures: Some(r.signatures),
            manifest: self.manifest.clone(),
        })
    }

    /// Canonical text of the resolved program.
    pub fn text(&self) -> String {
        print_program(&self.program)
    }
}

/// Compiler passes followed by post-processing.
pub fn build(source: &Program, config: BuildConfig) -> Result<Build, PostprocessError> {
    let instrumented = instrument::instrument(source, config.mode, config.policy)?;
    let manifest = Manifest::new(source, &instrumented, config.mode, config.policy)?;
    if config.mode == Mode::None {
        let program = layout_addresses(source, config.base_address, config.pac.va_bits())?;
        return Ok(Build {
            config,
            source: source.clone(),
            instrumented,
            program,
            states: StateMap::default(),
            signatures: None,
            manifest,
        });
    }
    let r = postprocess(&instrumented, config.base_address, config.key, config.seed, config.pac)?;
    Ok(Build {
        config,
        source: source.clone(),
        instrumented,
        program: r.program,
        states: r.states,
        signatures: Some(r.signatures),
        manifest,
    })
}
