//! Block-sparse assembly of `J'WJ` and `-J'Wr`.

use rayon::prelude::*;

use super::{Problem, ResidualBlock};
use crate::linalg::{minimum_degree_order, CscUpper};

const CHUNK: usize = 2048;

pub(crate) struct Assembler {
    group_size: usize,
    /// Permuted index of each group, `usize::MAX` for fixed groups.
    slot: Vec<usize>,
    /// Original group of each permuted index.
    groups_in_order: Vec<usize>,
    /// For every permuted column group, the sorted permuted row groups above
    /// the diagonal.
    row_groups: Vec<Vec<usize>>,
    pattern: CscUpper,
    diag: Vec<usize>,
}

impl Assembler {
    pub(crate) fn new(problem: &Problem, reorder: bool) -> Self {
        let s = problem.group_size;
        let free: Vec<usize> = (0..problem.group_count).filter(|&g| !problem.fixed[g]).collect();
        let mut local = vec![usize::MAX; problem.group_count];
        for (i, &g) in free.iter().enumerate() {
            local[g] = i;
        }
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); free.len()];
        for b in &problem.blocks {
            let ids: Vec<usize> = b.groups().iter().map(|&g| local[g]).filter(|&i| i != usize::MAX).collect();
            for &a in &ids {
                for &c in &ids {
                    if a != c {
                        adjacency[a].push(c);
                    }
                }
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let order: Vec<usize> = if reorder { minimum_degree_order(&adjacency) } else { (0..free.len()).collect() };
        let mut rank = vec![0usize; free.len()];
        for (p, &i) in order.iter().enumerate() {
            rank[i] = p;
        }
        let mut slot = vec![usize::MAX; problem.group_count];
        for (i, &g) in free.iter().enumerate() {
            slot[g] = rank[i];
        }
        let groups_in_order: Vec<usize> = order.iter().map(|&i| free[i]).collect();
        let mut row_groups: Vec<Vec<usize>> = vec![Vec::new(); free.len()];
        for (i, list) in adjacency.iter().enumerate() {
            let pc = rank[i];
            for &j in list {
                let pr = rank[j];
                if pr < pc {
                    row_groups[pc].push(pr);
                }
            }
        }
        for list in &mut row_groups {
            list.sort_unstable();
            list.dedup();
        }
        let n = free.len() * s;
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for (pc, rows) in row_groups.iter().enumerate() {
            for j in 0..s {
                for &pr in rows {
                    row_idx.extend(pr * s..pr * s + s);
                }
                row_idx.extend(pc * s..pc * s + j + 1);
                col_ptr.push(row_idx.len());
            }
        }
        let nnz = row_idx.len();
        let pattern = CscUpper { n, col_ptr, row_idx, values: vec![0.0; nnz] };
        let diag = pattern.diagonal_positions();
        Self { group_size: s, slot, groups_in_order, row_groups, pattern, diag }
    }

    pub(crate) fn pattern(&self) -> &CscUpper {
        &self.pattern
    }

    pub(crate) fn diagonal_positions(&self) -> &[usize] {
        &self.diag
    }

    fn position(&self, pr: usize, pc: usize, i: usize, j: usize) -> usize {
        let s = self.group_size;
        let base = self.pattern.col_ptr[pc * s + j];
        if pr == pc {
            base + self.row_groups[pc].len() * s + i
        } else {
            let k = self.row_groups[pc].binary_search(&pr).expect("pair in pattern");
            base + k * s + i
        }
    }

    /// Writes `J'WJ` into `system.values` and `-J'Wr` into `rhs`, both in the
    /// permuted order.
    pub(crate) fn assemble(&self, problem: &Problem, x: &[f64], system: &mut CscUpper, rhs: &mut [f64]) {
        let s = self.group_size;
        system.values.iter_mut().for_each(|v| *v = 0.0);
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for chunk in problem.blocks.chunks(CHUNK) {
            let locals: Vec<Option<LocalSystem>> =
                chunk.par_iter().map(|b| self.local_system(problem, b.as_ref(), x)).collect();
            for local in locals.into_iter().flatten() {
                let u = local.slots.len();
                let w = u * s;
                for (a, &pa) in local.slots.iter().enumerate() {
                    for i in 0..s {
                        rhs[pa * s + i] -= local.g[a * s + i];
                    }
                    for (b, &pb) in local.slots.iter().enumerate() {
                        if pa > pb {
                            continue;
                        }
                        for j in 0..s {
                            let imax = if pa == pb { j + 1 } else { s };
                            for i in 0..imax {
                                let pos = self.position(pa, pb, i, j);
                                system.values[pos] += local.h[(a * s + i) * w + b * s + j];
                            }
                        }
                    }
                }
            }
        }
    }

    fn local_system(&self, problem: &Problem, block: &dyn ResidualBlock, x: &[f64]) -> Option<LocalSystem> {
        let s = self.group_size;
        let groups = block.groups();
        let mut slots: Vec<usize> = groups.iter().map(|&g| self.slot[g]).filter(|&p| p != usize::MAX).collect();
        if slots.is_empty() {
            return None;
        }
        slots.sort_unstable();
        slots.dedup();
        let dim = block.residual_dim();
        let cols = groups.len() * s;
        let params = problem.group_slices(block, x);
        let mut r = vec![0.0; dim];
        let mut jac = vec![0.0; dim * cols];
        block.evaluate(&params, &mut r, Some(&mut jac));
        // fold the block's columns onto the unique free groups
        let u = slots.len();
        let w = u * s;
        let mut jm = vec![0.0; dim * w];
        for (k, &g) in groups.iter().enumerate() {
            let p = self.slot[g];
            if p == usize::MAX {
                continue;
            }
            let a = slots.binary_search(&p).expect("slot present");
            for row in 0..dim {
                for c in 0..s {
                    jm[row * w + a * s + c] += jac[row * cols + k * s + c];
                }
            }
        }
        let weight = block.weight();
        let mut h = vec![0.0; w * w];
        let mut g = vec![0.0; w];
        for row in 0..dim {
            let jr = &jm[row * w..(row + 1) * w];
            let rv = r[row];
            for a in 0..w {
                let ja = jr[a];
                if ja == 0.0 {
                    continue;
                }
                g[a] += weight * ja * rv;
                let hrow = &mut h[a * w..(a + 1) * w];
                for (b, &jb) in jr.iter().enumerate() {
                    hrow[b] += weight * ja * jb;
                }
            }
        }
        Some(LocalSystem { slots, h, g })
    }

    /// Expands a permuted step over free groups into the full parameter
    /// layout (zeros for fixed groups).
    pub(crate) fn scatter_step(&self, step: &[f64], problem: &Problem) -> Vec<f64> {
        let s = self.group_size;
        let mut full = vec![0.0; problem.group_count * s];
        for (p, &g) in self.groups_in_order.iter().enumerate() {
            full[g * s..(g + 1) * s].copy_from_slice(&step[p * s..(p + 1) * s]);
        }
        full
    }

    pub(crate) fn groups_in_order(&self) -> &[usize] {
        &self.groups_in_order
    }
}

struct LocalSystem {
    slots: Vec<usize>,
    h: Vec<f64>,
    g: Vec<f64>,
}

/// Damped normal equations over the free groups in their natural order.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    /// Upper triangle of `J'WJ + damping I`.
    pub matrix: CscUpper,
    /// `-J'Wr`.
    pub rhs: Vec<f64>,
    /// Group behind each block of rows.
    pub free_groups: Vec<usize>,
}

pub fn assemble_normal_equations(problem: &Problem, params: &[f64], damping: f64) -> NormalEquations {
    let assembler = Assembler::new(problem, false);
    let mut matrix = assembler.pattern().clone();
    let mut rhs = vec![0.0; matrix.n];
    assembler.assemble(problem, params, &mut matrix, &mut rhs);
    for &p in assembler.diagonal_positions() {
        matrix.values[p] += damping;
    }
    NormalEquations { matrix, rhs, free_groups: assembler.groups_in_order().to_vec() }
}
