//! Compiler-pass analogue: inserts state updates, patch slots, dual entry
//! points and checks. Every inserted constant is zero; [`crate::postprocess`]
//! fills them in once the program is laid out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    self, build_cfg, reverse_post_order, BasicBlock, BlockKind, Function, Instruction, IrError, Op,
    PatchRole, Program, SPLICE_PREFIX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckPolicy {
    #[serde(rename = "program-end", alias = "end")]
    EndOfProgram,
    #[serde(rename = "func-end", alias = "fend")]
    EndOfFunction,
    #[serde(rename = "every-bb", alias = "bb")]
    EveryBasicBlock,
}

impl CheckPolicy {
    pub const ALL: [CheckPolicy; 3] =
        [CheckPolicy::EndOfProgram, CheckPolicy::EndOfFunction, CheckPolicy::EveryBasicBlock];

    pub fn name(self) -> &'static str {
        match self {
            CheckPolicy::EndOfProgram => "program-end",
            CheckPolicy::EndOfFunction => "func-end",
            CheckPolicy::EveryBasicBlock => "every-bb",
        }
    }
}

impl fmt::Display for CheckPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "program-end" | "end" => Ok(CheckPolicy::EndOfProgram),
            "func-end" | "fend" => Ok(CheckPolicy::EndOfFunction),
            "every-bb" | "bb" => Ok(CheckPolicy::EveryBasicBlock),
            _ => Err(format!("unknown check policy `{s}`")),
        }
    }
}

/// Which state-update function the build uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Keyed PACIA updates and AUTIZA checks.
    #[serde(rename = "fipac")]
    Fipac,
    /// Public signatures XORed into the state (CFCSS-style).
    #[serde(rename = "xor-baseline")]
    XorBaseline,
    /// No protection.
    #[serde(rename = "none")]
    None,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fipac => "fipac",
            Mode::XorBaseline => "xor-baseline",
            Mode::None => "none",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fipac" => Ok(Mode::Fipac),
            "xor-baseline" | "xor" => Ok(Mode::XorBaseline),
            "none" => Ok(Mode::None),
            _ => Err(format!("unknown build mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error("program is already instrumented")]
    AlreadyInstrumented,
    #[error("function `{function}`: indirect call with an empty target set")]
    EmptyTargets { function: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn insert_updates(p: &Program, update: &[Op]) -> Result<Program, InstrumentError> {
    if p.is_instrumented() {
        return Err(InstrumentError::AlreadyInstrumented);
    }
    let mut q = p.clone();
    for f in &mut q.functions {
        for b in &mut f.blocks {
            let head = update.iter().cloned().map(Instruction::new);
            b.instructions.splice(0..0, head);
        }
    }
    Ok(q)
}

/// Prefixes every block with `cfi.update`.
pub fn insert_state_updates(p: &Program) -> Result<Program, InstrumentError> {
    insert_updates(p, &[Op::CfiUpdate])
}

/// Prefixes every block with the unkeyed `r26 ← sig; S ← S ⊕ r26` pair.
pub fn insert_xor_state_updates(p: &Program) -> Result<Program, InstrumentError> {
    insert_updates(p, &[Op::CfiLoadSig { value: 0 }, Op::CfiXorSig])
}

/// For each function, the directly-called functions in its own call-graph
/// strongly connected component. The state after such a call depends on the
/// caller's own end state.
pub fn recursive_callees(p: &Program) -> BTreeMap<String, BTreeSet<String>> {
    let mut g = DiGraph::<usize, ()>::new();
    let nodes: Vec<_> = (0..p.functions.len()).map(|i| g.add_node(i)).collect();
    for (i, f) in p.functions.iter().enumerate() {
        for inst in f.instructions() {
            if let Op::Call { callee, .. } = &inst.op {
                let j = p.function_index(callee).expect("verified program");
                g.update_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut component = vec![0; p.functions.len()];
    for (c, scc) in tarjan_scc(&g).into_iter().enumerate() {
        for n in scc {
            component[g[n]] = c;
        }
    }
    p.functions
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let set = g
                .neighbors(nodes[i])
                .map(|n| g[n])
                .filter(|&j| component[j] == component[i])
                .map(|j| p.functions[j].name.clone())
                .collect();
            (f.name.clone(), set)
        })
        .collect()
}

/// Spanning arborescence of a function's CFG, rooted at the entry block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    /// Tree parent of every block; `None` for the entry.
    pub parent: Vec<Option<usize>>,
}

impl SpanningTree {
    pub fn is_tree_edge(&self, src: usize, dst: usize) -> bool {
        self.parent[dst] == Some(src)
    }

    pub fn edge_count(&self) -> usize {
        self.parent.iter().flatten().count()
    }
}

/// Maximum spanning tree over the CFG edges; every other edge needs a patch.
///
/// Edge weights are 1, except that edges leaving a block whose state depends
/// on a call back into the function's own recursion cycle weigh 0, so the
/// path to the return block avoids such calls whenever the CFG allows it.
/// Only edges from earlier to later blocks in reverse post-order are
/// eligible, so back edges are always patched. Ties go to the lowest
/// source block id.
pub fn spanning_tree(f: &Function, recursive: &BTreeSet<String>) -> SpanningTree {
    let g = build_cfg(f);
    let n = g.blocks.len();
    let rpo = reverse_post_order(&g);
    let mut rank = vec![usize::MAX; n];
    for (i, &b) in rpo.iter().enumerate() {
        rank[b] = i;
    }
    let calls_back = |b: usize| {
        g.blocks[b].instructions.iter().any(
            |i| matches!(&i.op, Op::Call { callee, .. } if recursive.contains(callee)),
        )
    };
    let mut clean_exit = vec![false; n];
    let mut parent = vec![None; n];
    for &v in &rpo {
        let clean_entry = if v == 0 {
            true
        } else {
            let best = g.blocks[v]
                .predecessors
                .iter()
                .copied()
                .filter(|&u| rank[u] < rank[v])
                .max_by_key(|&u| (clean_exit[u], std::cmp::Reverse(u)))
                .expect("reachable block has a forward predecessor");
            parent[v] = Some(best);
            clean_exit[best]
        };
        clean_exit[v] = clean_entry && !calls_back(v);
    }
    SpanningTree { parent }
}

fn unique_label(f: &Function, taken: &BTreeSet<String>, src: &str, dst: &str) -> String {
    let base = format!("{SPLICE_PREFIX}{src}__{dst}");
    let mut label = base.clone();
    let mut k = 1;
    while f.block_index(&label).is_some() || taken.contains(&label) {
        label = format!("{base}_{k}");
        k += 1;
    }
    label
}

/// Places a zero merge-patch slot on every non-tree edge.
///
/// Unconditional branches get the slot right before the branch. Edges out of
/// a conditional branch get a spliced edge block `[cfi.patch; branch dst]`;
/// for the not-taken edge it is placed directly after the source block.
pub fn insert_merge_patches(f: &Function, tree: &SpanningTree) -> Function {
    let g = build_cfg(f);
    let mut taken_splices: Vec<BasicBlock> = Vec::new();
    let mut fall_splice: BTreeMap<usize, BasicBlock> = BTreeMap::new();
    let mut labels = BTreeSet::new();
    let mut out = g.clone();

    for (u, b) in g.blocks.iter().enumerate() {
        for (k, &v) in b.successors.iter().enumerate() {
            if tree.is_tree_edge(u, v) {
                continue;
            }
            let patch = Instruction::new(Op::CfiPatch { role: PatchRole::Merge, value: 0 });
            match b.terminator() {
                Op::Branch { .. } => {
                    let insts = &mut out.blocks[u].instructions;
                    let at = insts.len() - 1;
                    insts.insert(at, patch);
                }
                Op::CondBranch { .. } => {
                    let dst = g.blocks[v].label.clone();
                    let label = unique_label(&g, &labels, &b.label, &dst);
                    labels.insert(label.clone());
                    let splice = BasicBlock::new(
                        label.clone(),
                        vec![patch, Instruction::new(Op::Branch { target: dst })],
                    );
                    if k == 0 {
                        // taken edge: retarget the branch
                        if let Some(Instruction { op: Op::CondBranch { target, .. }, .. }) =
                            out.blocks[u].instructions.last_mut()
                        {
                            *target = label;
                        }
                        taken_splices.push(splice);
                    } else {
                        fall_splice.insert(u, splice);
                    }
                }
                _ => unreachable!("only branches have successors"),
            }
        }
    }

    let mut blocks = Vec::with_capacity(out.blocks.len() + taken_splices.len() + fall_splice.len());
    for (u, b) in out.blocks.into_iter().enumerate() {
        blocks.push(b);
        if let Some(s) = fall_splice.remove(&u) {
            blocks.push(s);
        }
    }
    blocks.extend(taken_splices);
    out.blocks = blocks;
    build_cfg(&out)
}

/// Runs [`insert_merge_patches`] on every function.
pub fn insert_all_merge_patches(p: &Program) -> Program {
    let rec = recursive_callees(p);
    let mut q = p.clone();
    for f in &mut q.functions {
        let tree = spanning_tree(f, &rec[&f.name]);
        *f = insert_merge_patches(f, &tree);
    }
    ir::refresh(&mut q);
    q
}

/// Puts a zero patch slot in front of every direct call.
pub fn instrument_direct_calls(p: &Program) -> Program {
    let mut q = p.clone();
    for f in &mut q.functions {
        for b in &mut f.blocks {
            let mut insts = Vec::with_capacity(b.instructions.len());
            for i in b.instructions.drain(..) {
                if matches!(i.op, Op::Call { .. }) {
                    insts.push(Op::CfiPatch { role: PatchRole::DirectCall, value: 0 }.into());
                }
                insts.push(i);
            }
            b.instructions = insts;
        }
    }
    q
}

/// Indirect-call target classes: declared target sets that share a function
/// are merged, and address-taken functions join as singletons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcallClasses {
    /// Sorted members; classes are ordered by their first member.
    pub classes: Vec<Vec<String>>,
}

impl IcallClasses {
    pub fn class_of(&self, function: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.iter().any(|m| m == function))
    }

    /// Stable identity used to derive the class's intermediate states.
    pub fn class_id(&self, class: usize) -> String {
        self.classes[class].join(",")
    }
}

pub fn icall_classes(p: &Program) -> Result<IcallClasses, InstrumentError> {
    let index: BTreeMap<&str, usize> =
        p.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
    let mut uf = UnionFind::<usize>::new(p.functions.len());
    let mut member = vec![false; p.functions.len()];
    for f in &p.functions {
        if f.address_taken {
            member[index[f.name.as_str()]] = true;
        }
        for i in f.instructions() {
            if let Op::CallIndirect { candidates, .. } = &i.op {
                let Some(first) = candidates.first() else {
                    return Err(InstrumentError::EmptyTargets { function: f.name.clone() });
                };
                let a = index[first.as_str()];
                for c in candidates {
                    let j = index[c.as_str()];
                    member[j] = true;
                    uf.union(a, j);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, f) in p.functions.iter().enumerate() {
        if member[i] {
            groups.entry(uf.find(i)).or_default().push(f.name.clone());
        }
    }
    let mut classes: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut v| {
            v.sort();
            v
        })
        .collect();
    classes.sort();
    Ok(IcallClasses { classes })
}

/// Wraps every indirect call as `push; patch; icall; mixpop`.
pub fn instrument_indirect_calls(p: &Program) -> Result<Program, InstrumentError> {
    icall_classes(p)?;
    let mut q = p.clone();
    for f in &mut q.functions {
        for b in &mut f.blocks {
            let mut insts = Vec::with_capacity(b.instructions.len());
            for i in b.instructions.drain(..) {
                if matches!(i.op, Op::CallIndirect { .. }) {
                    insts.push(Op::CfiStatePush.into());
                    insts.push(Op::CfiPatch { role: PatchRole::IcallPre, value: 0 }.into());
                    insts.push(i);
                    insts.push(Op::CfiStateMixPop.into());
                } else {
                    insts.push(i);
                }
            }
            b.instructions = insts;
        }
    }
    Ok(q)
}

/// Installs the entry-point prologue and the return-patch application.
///
/// Indirectly callable functions get `[patch entry; ldret slot; branch body;
/// ldret 0]`, where the last instruction is the direct entry. All other
/// functions get the direct entry `[ldret 0]` only.
pub fn add_function_entry_points(p: &Program) -> Result<Program, InstrumentError> {
    let classes = icall_classes(p)?;
    let mut q = p.clone();
    for f in &mut q.functions {
        let dual = f.address_taken || classes.class_of(&f.name).is_some();
        let direct = Instruction::new(Op::CfiLoadRetPatch { value: 0 });
        f.prologue = if dual {
            vec![
                Op::CfiPatch { role: PatchRole::IcallEntry, value: 0 }.into(),
                Op::CfiLoadRetPatch { value: 0 }.into(),
                Op::Branch { target: f.blocks[0].label.clone() }.into(),
                direct,
            ]
        } else {
            vec![direct]
        };
        if let Some(r) = f.single_return {
            let insts = &mut f.blocks[r].instructions;
            let at = insts.len() - 1;
            insts.insert(at, Op::CfiApplyRetPatch.into());
        }
    }
    Ok(q)
}

/// Inserts zero-constant checks according to `policy`.
///
/// A check goes before the block's trailing merge patch / return-patch
/// application, so it always verifies the block's own end state.
pub fn insert_checks(p: &Program, policy: CheckPolicy) -> Program {
    let keyed = !p.instructions().any(|i| matches!(i.op, Op::CfiXorSig));
    let check = if keyed { Op::CfiCheck { constant: 0 } } else { Op::CfiAssert { expected: 0 } };
    let entry = p.entry.clone();
    let mut q = p.clone();
    for f in &mut q.functions {
        let is_entry = f.name == entry;
        for b in &mut f.blocks {
            if b.kind == BlockKind::Splice {
                continue;
            }
            let wanted = match (policy, b.terminator()) {
                (CheckPolicy::EveryBasicBlock, _) => true,
                (CheckPolicy::EndOfFunction, Op::Return | Op::Halt) => true,
                (CheckPolicy::EndOfProgram, Op::Halt) => true,
                (CheckPolicy::EndOfProgram, Op::Return) => is_entry,
                _ => false,
            };
            if !wanted {
                continue;
            }
            let mut at = b.instructions.len() - 1;
            while at > 0
                && matches!(
                    b.instructions[at - 1].op,
                    Op::CfiPatch { role: PatchRole::Merge, .. } | Op::CfiApplyRetPatch
                )
            {
                at -= 1;
            }
            b.instructions.insert(at, check.clone().into());
        }
    }
    q
}

/// The whole compiler-side pipeline. `Mode::None` returns the input as is.
pub fn instrument(p: &Program, mode: Mode, policy: CheckPolicy) -> Result<Program, InstrumentError> {
    let updated = match mode {
        Mode::None => return Ok(p.clone()),
        Mode::Fipac => insert_state_updates(p)?,
        Mode::XorBaseline => insert_xor_state_updates(p)?,
    };
    let merged = insert_all_merge_patches(&updated);
    let direct = instrument_direct_calls(&merged);
    let indirect = instrument_indirect_calls(&direct)?;
    let entries = add_function_entry_points(&indirect)?;
    let mut checked = insert_checks(&entries, policy);
    ir::refresh(&mut checked);
    ir::verify(&checked)?;
    Ok(checked)
}

/// Per-function instrumentation counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCounts {
    pub name: String,
    pub body_blocks: usize,
    pub splice_blocks: usize,
    pub merge_patches: usize,
    pub direct_call_patches: usize,
    pub icall_sites: usize,
    pub checks: usize,
    pub dual_entry: bool,
    pub returns: bool,
}

impl FunctionCounts {
    /// Patch slots: merges, direct calls, two per indirect call (pre-call
    /// patch and post-call mix), two per indirect entry (entry patch and
    /// return patch).
    pub fn patch_slots(&self) -> usize {
        self.merge_patches
            + self.direct_call_patches
            + 2 * self.icall_sites
            + if self.dual_entry { 2 } else { 0 }
    }
}

/// Build manifest emitted next to an instrumented program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub policy: CheckPolicy,
    pub functions: Vec<FunctionCounts>,
    pub icall_classes: Vec<Vec<String>>,
    pub original_machine_instructions: u64,
    pub instrumented_machine_instructions: u64,
}

impl Manifest {
    pub fn new(
        original: &Program,
        instrumented: &Program,
        mode: Mode,
        policy: CheckPolicy,
    ) -> Result<Self, InstrumentError> {
        let functions = instrumented
            .functions
            .iter()
            .map(|f| {
                let ops = || f.instructions().map(|i| &i.op);
                let count = |pred: &dyn Fn(&Op) -> bool| ops().filter(|o| pred(o)).count();
                FunctionCounts {
                    name: f.name.clone(),
                    body_blocks: f.blocks.iter().filter(|b| b.kind == BlockKind::Body).count(),
                    splice_blocks: f.blocks.iter().filter(|b| b.kind == BlockKind::Splice).count(),
                    merge_patches: count(&|o| {
                        matches!(o, Op::CfiPatch { role: PatchRole::Merge, .. })
                    }),
                    direct_call_patches: count(&|o| {
                        matches!(o, Op::CfiPatch { role: PatchRole::DirectCall, .. })
                    }),
                    icall_sites: count(&|o| matches!(o, Op::CallIndirect { .. })),
                    checks: count(&|o| o.is_check()),
                    dual_entry: f.is_dual_entry(),
                    returns: f.single_return.is_some(),
                }
            })
            .collect();
        Ok(Self {
            mode,
            policy,
            functions,
            icall_classes: icall_classes(original)?.classes,
            original_machine_instructions: original.machine_instruction_count(),
            instrumented_machine_instructions: instrumented.machine_instruction_count(),
        })
    }

    pub fn total<F: Fn(&FunctionCounts) -> usize>(&self, f: F) -> usize {
        self.functions.iter().map(f).sum()
    }

    /// Static size predicted from the counts: 2 per block update, 2 per patch,
    /// 3 per check, plus fixed entry-point and call-site sequences.
    pub fn predicted_machine_instructions(&self) -> u64 {
        if self.mode == Mode::None {
            return self.original_machine_instructions;
        }
        let mut total = self.original_machine_instructions;
        for c in &self.functions {
            let patches = c.merge_patches
                + c.direct_call_patches
                + c.icall_sites
                + usize::from(c.dual_entry);
            total += 2 * c.body_blocks as u64
                + 2 * patches as u64
                + 3 * c.checks as u64
                + c.splice_blocks as u64 // branch to the real target
                + 3 * c.icall_sites as u64 // push + ldr/eor mix
                + 1 // direct entry: load zero return patch
                + u64::from(c.returns) // apply return patch
                + if c.dual_entry { 2 } else { 0 }; // load return patch + branch over
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn prog(src: &str) -> Program {
        parse_program(src).unwrap()
    }

    fn count(p: &Program, pred: impl Fn(&Op) -> bool) -> usize {
        p.instructions().filter(|i| pred(&i.op)).count()
    }

    const DIAMOND: &str = "fn main {
        a: load r1, [r0 + 0]
           cbranch r1, c
        b: branch e
        c: branch e
        e: out r1
           halt
    }";

    const LINEAR: &str = "fn main { a: branch b\n b: branch c\n c: halt }";

    const FIG4: &str = "fn main {
        entry: const r1, 4
               branch a
        a:     cbranch r1, d
        c:     branch e
        d:     branch e
        e:     const r2, 1
               alu sub r1, r1, r2
               cbranch r1, a
        exit:  halt
    }";

    #[test]
    fn one_update_per_block() {
        let p = insert_state_updates(&prog("fn main { entry: halt }")).unwrap();
        assert_eq!(p.functions[0].blocks[0].instructions[0].op, Op::CfiUpdate);
        assert_eq!(count(&p, |o| *o == Op::CfiUpdate), 1);
        let d = insert_state_updates(&prog(DIAMOND)).unwrap();
        assert_eq!(count(&d, |o| *o == Op::CfiUpdate), 4);
    }

    #[test]
    fn double_instrumentation_rejected() {
        let p = insert_state_updates(&prog(DIAMOND)).unwrap();
        assert_eq!(insert_state_updates(&p), Err(InstrumentError::AlreadyInstrumented));
        let full = instrument(&prog(DIAMOND), Mode::Fipac, CheckPolicy::EveryBasicBlock).unwrap();
        assert_eq!(
            instrument(&full, Mode::Fipac, CheckPolicy::EveryBasicBlock),
            Err(InstrumentError::AlreadyInstrumented)
        );
    }

    fn merges(src: &str) -> usize {
        let p = insert_all_merge_patches(&insert_state_updates(&prog(src)).unwrap());
        count(&p, |o| matches!(o, Op::CfiPatch { role: PatchRole::Merge, .. }))
    }

    #[test]
    fn linear_needs_no_patch() {
        assert_eq!(merges(LINEAR), 0);
    }

    #[test]
    fn diamond_needs_one_patch_at_the_later_arm() {
        assert_eq!(merges(DIAMOND), 1);
        let p = insert_all_merge_patches(&insert_state_updates(&prog(DIAMOND)).unwrap());
        // tie-break keeps b->e (lower source id) in the tree, so c gets the patch
        let c = &p.functions[0].blocks[p.functions[0].block_index("c").unwrap()];
        assert!(matches!(c.instructions[1].op, Op::CfiPatch { role: PatchRole::Merge, .. }));
    }

    #[test]
    fn loop_back_edge_is_patched_on_a_splice() {
        let p = insert_all_merge_patches(&insert_state_updates(&prog(FIG4)).unwrap());
        let f = &p.functions[0];
        // diamond merge (d->e) plus the latch e->a
        assert_eq!(count(&p, |o| matches!(o, Op::CfiPatch { role: PatchRole::Merge, .. })), 2);
        let splice = f.blocks.iter().find(|b| b.kind == BlockKind::Splice).unwrap();
        assert_eq!(splice.label, ".e__a");
        assert_eq!(splice.terminator(), &Op::Branch { target: "a".into() });
        let e = &f.blocks[f.block_index("e").unwrap()];
        assert_eq!(e.terminator(), &Op::CondBranch { cond: ir::Reg(1), target: ".e__a".into() });
    }

    #[test]
    fn spanning_tree_size() {
        let p = insert_state_updates(&prog(FIG4)).unwrap();
        let f = build_cfg(&p.functions[0]);
        let t = spanning_tree(&f, &BTreeSet::new());
        assert_eq!(t.edge_count(), f.blocks.len() - 1);
        assert_eq!(ir::edge_count(&f) - t.edge_count(), 2);
        // the back edge e->a is never a tree edge
        let (a, e) = (f.block_index("a").unwrap(), f.block_index("e").unwrap());
        assert!(!t.is_tree_edge(e, a));
    }

    #[test]
    fn fallthrough_splice_is_placed_after_source() {
        // x's not-taken edge into z is not a tree edge (z's parent is y)
        let src = "fn main {
            a: load r1, [r0 + 0]
               cbranch r1, x
            y: branch z
            x: cbranch r1, w
            z: halt
            w: branch z
        }";
        let p = insert_all_merge_patches(&insert_state_updates(&prog(src)).unwrap());
        let labels: Vec<&str> = p.functions[0].blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, vec!["a", "y", "x", ".x__z", "z", "w"]);
        assert_eq!(merges(src), 2);

        let src2 = "fn main {
            a: load r1, [r0 + 0]
               cbranch r1, x
            y: branch j
            x: cbranch r1, j
            z: branch j
            j: halt
        }";
        let p = insert_all_merge_patches(&insert_state_updates(&prog(src2)).unwrap());
        let labels: Vec<&str> = p.functions[0].blocks.iter().map(|b| b.label.as_str()).collect();
        // j keeps y as tree parent (lowest id); x's taken edge to j is spliced at the end
        assert_eq!(labels, vec!["a", "y", "x", "z", "j", ".x__j"]);
    }

    #[test]
    fn recursion_prefers_call_free_path_to_return() {
        let src = "fn main { e: call f\n halt }
        fn f {
            entry: load r1, [r0 + 0]
                   cbranch r1, base
            rec:   call f
                   branch ret
            base:  branch ret
            ret:   return
        }";
        let p = insert_state_updates(&prog(src)).unwrap();
        let rec = recursive_callees(&p);
        assert_eq!(rec["f"], BTreeSet::from(["f".to_string()]));
        assert!(rec["main"].is_empty());
        let f = build_cfg(p.function("f").unwrap());
        let t = spanning_tree(&f, &rec["f"]);
        let (r, base, ret) = (
            f.block_index("rec").unwrap(),
            f.block_index("base").unwrap(),
            f.block_index("ret").unwrap(),
        );
        assert!(t.is_tree_edge(base, ret));
        assert!(!t.is_tree_edge(r, ret));
        // unit weights alone would have chosen the lower id
        let plain = spanning_tree(&f, &BTreeSet::new());
        assert!(plain.is_tree_edge(r, ret));
    }

    const CALLS: &str = "fn main {
        e: call f
           call f
           addrof r1, g
           icall r1 targets(g)
           halt
    }
    fn f { e: return }
    fn g { e: return }";

    #[test]
    fn direct_call_slots() {
        let p = instrument_direct_calls(&prog(CALLS));
        assert_eq!(count(&p, |o| matches!(o, Op::CfiPatch { role: PatchRole::DirectCall, .. })), 2);
        let ops: Vec<&Op> = p.functions[0].blocks[0].instructions.iter().map(|i| &i.op).collect();
        assert!(matches!(ops[0], Op::CfiPatch { role: PatchRole::DirectCall, .. }));
        assert!(matches!(ops[1], Op::Call { .. }));
    }

    #[test]
    fn icall_protocol() {
        let p = instrument_indirect_calls(&prog(CALLS)).unwrap();
        let ops: Vec<&Op> = p.functions[0].blocks[0].instructions.iter().map(|i| &i.op).collect();
        let at = ops.iter().position(|o| matches!(o, Op::CallIndirect { .. })).unwrap();
        assert_eq!(ops[at - 2], &Op::CfiStatePush);
        assert!(matches!(ops[at - 1], Op::CfiPatch { role: PatchRole::IcallPre, .. }));
        assert_eq!(ops[at + 1], &Op::CfiStateMixPop);
    }

    #[test]
    fn class_merging() {
        let src = "fn main {
            e: addrof r1, f
               icall r1 targets(f, g)
               icall r1 targets(g, h)
               icall r1 targets(k)
               halt
        }
        fn f { e: return }
        fn g { e: return }
        fn h { e: return }
        fn k { e: return }
        fn m { e: return }";
        let c = icall_classes(&prog(src)).unwrap();
        assert_eq!(c.classes, vec![vec!["f", "g", "h"], vec!["k"]]);
        assert_eq!(c.class_of("h"), Some(0));
        assert_eq!(c.class_of("m"), None);
        let single = icall_classes(&prog(CALLS)).unwrap();
        assert_eq!(single.classes, vec![vec!["g"]]);
    }

    #[test]
    fn empty_target_set_is_a_build_error() {
        let mut p = prog(CALLS);
        for b in &mut p.functions[0].blocks {
            for i in &mut b.instructions {
                if let Op::CallIndirect { candidates, .. } = &mut i.op {
                    candidates.clear();
                }
            }
        }
        assert_eq!(
            instrument_indirect_calls(&p),
            Err(InstrumentError::EmptyTargets { function: "main".into() })
        );
    }

    #[test]
    fn entry_points() {
        let p = add_function_entry_points(&prog(CALLS)).unwrap();
        let f = p.function("f").unwrap();
        assert_eq!(f.prologue.len(), 1);
        assert_eq!(f.prologue[0].op, Op::CfiLoadRetPatch { value: 0 });
        let g = p.function("g").unwrap();
        assert!(g.is_dual_entry());
        assert!(matches!(g.prologue[0].op, Op::CfiPatch { role: PatchRole::IcallEntry, .. }));
        assert_eq!(g.prologue[2].op, Op::Branch { target: "e".into() });
        let ops: Vec<&Op> = g.blocks[0].instructions.iter().map(|i| &i.op).collect();
        assert_eq!(ops, vec![&Op::CfiApplyRetPatch, &Op::Return]);
    }

    #[test]
    fn check_counts_per_policy() {
        let three = "fn main { e: call f\n call g\n halt }
                     fn f { e: return }
                     fn g { a: load r1, [r0 + 0]\n cbranch r1, c\n b: branch d\n c: branch d\n d: return }";
        let checks = |src: &str, pol| {
            let p = instrument(&prog(src), Mode::Fipac, pol).unwrap();
            count(&p, Op::is_check)
        };
        assert_eq!(checks(three, CheckPolicy::EndOfProgram), 1);
        assert_eq!(checks(three, CheckPolicy::EndOfFunction), 3);
        assert_eq!(checks(three, CheckPolicy::EveryBasicBlock), 6);
        assert_eq!(checks(DIAMOND, CheckPolicy::EveryBasicBlock), 4);
        let p = instrument(&prog(DIAMOND), Mode::Fipac, CheckPolicy::EveryBasicBlock).unwrap();
        let check_cost: u64 = p
            .instructions()
            .filter(|i| i.op.is_check())
            .map(|i| i.op.machine_cost())
            .sum();
        assert_eq!(check_cost, 12);
    }

    #[test]
    fn check_goes_before_patch_and_return_patch() {
        let p = instrument(&prog(FIG4), Mode::Fipac, CheckPolicy::EveryBasicBlock).unwrap();
        let f = &p.functions[0];
        let d = &f.blocks[f.block_index("d").unwrap()];
        let ops: Vec<&str> = d.instructions.iter().map(|i| i.op.mnemonic()).collect();
        assert_eq!(ops, vec!["cfi.update", "cfi.check", "cfi.patch", "branch"]);
        let q = instrument(&prog(CALLS), Mode::Fipac, CheckPolicy::EndOfFunction).unwrap();
        let f = q.function("f").unwrap();
        let ops: Vec<&str> = f.blocks[0].instructions.iter().map(|i| i.op.mnemonic()).collect();
        assert_eq!(ops, vec!["cfi.update", "cfi.check", "cfi.applyret", "return"]);
    }

    #[test]
    fn original_instructions_keep_their_order() {
        for src in [DIAMOND, FIG4, CALLS, LINEAR] {
            let p = prog(src);
            let q = instrument(&p, Mode::Fipac, CheckPolicy::EveryBasicBlock).unwrap();
            let strip = |p: &Program| -> Vec<String> {
                p.functions
                    .iter()
                    .flat_map(|f| f.blocks.iter().filter(|b| b.kind == BlockKind::Body))
                    .flat_map(|b| b.instructions.iter())
                    .filter(|i| !i.op.is_cfi())
                    .map(|i| match &i.op {
                        // splicing retargets branches
                        Op::CondBranch { .. } => "cbranch".to_string(),
                        op => crate::ir::format_op(op),
                    })
                    .collect()
            };
            assert_eq!(strip(&p), strip(&q));
        }
    }

    #[test]
    fn manifest_matches_formula() {
        for src in [DIAMOND, FIG4, CALLS, LINEAR] {
            for mode in [Mode::Fipac, Mode::XorBaseline] {
                for pol in CheckPolicy::ALL {
                    let p = prog(src);
                    let q = instrument(&p, mode, pol).unwrap();
                    let m = Manifest::new(&p, &q, mode, pol).unwrap();
                    assert_eq!(m.predicted_machine_instructions(), m.instrumented_machine_instructions);
                }
            }
        }
    }

    #[test]
    fn xor_baseline_uses_signature_register() {
        let p = instrument(&prog(DIAMOND), Mode::XorBaseline, CheckPolicy::EndOfProgram).unwrap();
        assert_eq!(count(&p, |o| matches!(o, Op::CfiLoadSig { .. })), 4);
        assert_eq!(count(&p, |o| *o == Op::CfiXorSig), 4);
        assert_eq!(count(&p, |o| matches!(o, Op::CfiAssert { .. })), 1);
        assert_eq!(count(&p, |o| matches!(o, Op::CfiCheck { .. })), 0);
    }
}
