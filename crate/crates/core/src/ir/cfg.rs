use super::{Function, Op, Program};

/// Successor block ids implied by a block's terminator.
fn terminator_successors(f: &Function, block: usize) -> Vec<usize> {
    let lookup = |label: &str| {
        f.block_index(label)
            .unwrap_or_else(|| panic!("unresolved label `{label}` in `{}`", f.name))
    };
    match f.blocks[block].terminator() {
        Op::Branch { target } => vec![lookup(target)],
        Op::CondBranch { target, .. } => vec![lookup(target), block + 1],
        _ => Vec::new(),
    }
}

/// Returns a copy of `f` with successor and predecessor sets filled in.
pub fn build_cfg(f: &Function) -> Function {
    let mut g = f.clone();
    let succs: Vec<Vec<usize>> = (0..g.blocks.len())
        .map(|b| terminator_successors(f, b))
        .collect();
    for b in &mut g.blocks {
        b.predecessors.clear();
    }
    for (b, s) in succs.iter().enumerate() {
        for &t in s {
            g.blocks[t].predecessors.push(b);
        }
    }
    for (b, s) in succs.into_iter().enumerate() {
        g.blocks[b].successors = s;
        g.blocks[b].predecessors.sort_unstable();
        g.blocks[b].predecessors.dedup();
    }
    g
}

pub fn build_program_cfg(p: &Program) -> Program {
    let mut q = p.clone();
    for f in &mut q.functions {
        *f = build_cfg(f);
    }
    q
}

pub fn edge_count(f: &Function) -> usize {
    f.blocks.iter().map(|b| b.successors.len()).sum()
}

/// Reverse post-order of the blocks reachable from the entry block.
///
/// Successors are visited in ascending block id so the order is a pure
/// function of the CFG.
pub fn reverse_post_order(f: &Function) -> Vec<usize> {
    let n = f.blocks.len();
    if n == 0 {
        return Vec::new();
    }
    let mut visited = vec![false; n];
    let mut post = Vec::with_capacity(n);
    // explicit stack of (block, next successor position)
    let mut stack = vec![(0usize, 0usize)];
    visited[0] = true;
    let sorted: Vec<Vec<usize>> = f
        .blocks
        .iter()
        .map(|b| {
            let mut s = b.successors.clone();
            s.sort_unstable();
            s
        })
        .collect();
    while let Some((b, pos)) = stack.last_mut() {
        if let Some(&next) = sorted[*b].get(*pos) {
            *pos += 1;
            if !visited[next] {
                visited[next] = true;
                stack.push((next, 0));
            }
        } else {
            post.push(*b);
            stack.pop();
        }
    }
    post.reverse();
    post
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn func(src: &str) -> Function {
        build_cfg(&parse_program(src).unwrap().functions[0])
    }

    #[test]
    fn single_block_has_no_edges() {
        let f = func("fn main { entry: halt }");
        assert!(f.blocks[0].successors.is_empty());
        assert!(f.blocks[0].predecessors.is_empty());
        assert_eq!(edge_count(&f), 0);
    }

    #[test]
    fn diamond_edges() {
        let f = func(
            "fn main {
               a: const r1, 1
                  cbranch r1, c
               b: branch e
               c: branch e
               e: halt
             }",
        );
        // hand enumeration: a->c, a->b, b->e, c->e
        assert_eq!(f.blocks[0].successors, vec![2, 1]);
        assert_eq!(f.blocks[1].successors, vec![3]);
        assert_eq!(f.blocks[2].successors, vec![3]);
        assert_eq!(f.blocks[3].predecessors, vec![1, 2]);
        assert_eq!(edge_count(&f), 4);
        assert_eq!(reverse_post_order(&f), vec![0, 2, 1, 3]);
    }

    #[test]
    fn self_loop_is_its_own_predecessor() {
        let f = func(
            "fn main {
               a: const r1, 3
                  branch b
               b: cbranch r1, b
               c: halt
             }",
        );
        assert!(f.blocks[1].predecessors.contains(&1));
        assert_eq!(f.blocks[1].predecessors, vec![0, 1]);
        assert_eq!(f.blocks[1].successors, vec![1, 2]);
        assert_eq!(edge_count(&f), 3);
    }
}
