//! Assembly and factorization of the regularized Newton system
//!
//! ```text
//! [ -W - eps I   A^T   ] [dx]   [r1]
//! [  A           eps I ] [dy] = [r2]
//! ```
//!
//! where `W` is block diagonal: zero on free variables, a diagonal on
//! nonnegative coordinates, and a dense 3x3 block per exponential cone.
//! The sparsity pattern is fixed per program, so the ordering and the
//! symbolic factorization are computed once.

use crate::cone::{ConeBlock, PlacedBlock};
use crate::ldl::{minimum_degree, LdlFactor, ZeroPivot};
use crate::sparse::CscMatrix;

/// Scaling matrix `W`, stored per cone block.
#[derive(Clone, Debug)]
pub(crate) struct Scaling {
    /// Diagonal entry for every variable (0 on free variables); for exp
    /// blocks the diagonal of the 3x3 block.
    pub diag: Vec<f64>,
    /// Upper off-diagonals `(0,1), (0,2), (1,2)` of each exp block.
    pub exp_off: Vec<[f64; 3]>,
}

impl Scaling {
    pub fn new(n: usize, num_exp: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            exp_off: vec![[0.0; 3]; num_exp],
        }
    }
}

pub(crate) struct KktSystem {
    n: usize,
    m: usize,
    /// `iperm[old] = new`
    iperm: Vec<usize>,
    colptr: Vec<usize>,
    rowval: Vec<usize>,
    nzval: Vec<f64>,
    diag_pos: Vec<usize>,
    exp_pos: Vec<[usize; 3]>,
    exp_starts: Vec<usize>,
    signs: Vec<f64>,
    factor: LdlFactor,
    work: Vec<f64>,
}

impl KktSystem {
    pub fn new(a: &CscMatrix, blocks: &[PlacedBlock]) -> Self {
        let n = a.ncols();
        let m = a.nrows();
        let dim = n + m;
        let exp_starts: Vec<usize> = blocks
            .iter()
            .filter(|b| b.kind == ConeBlock::Exp)
            .map(|b| b.start)
            .collect();

        // Off-diagonal entries in original numbering: exp blocks first, then A.
        let mut entries: Vec<(usize, usize)> = Vec::with_capacity(3 * exp_starts.len() + a.nnz());
        for &s in &exp_starts {
            entries.push((s, s + 1));
            entries.push((s, s + 2));
            entries.push((s + 1, s + 2));
        }
        for j in 0..n {
            for (i, _) in a.col(j) {
                entries.push((j, n + i));
            }
        }

        let mut adj = vec![Vec::new(); dim];
        for &(r, c) in &entries {
            adj[r].push(c);
            adj[c].push(r);
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        let perm = minimum_degree(&adj);
        drop(adj);
        let mut iperm = vec![0usize; dim];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // (permuted column, permuted row, logical id); ids < dim are diagonals.
        let mut upper: Vec<(usize, usize, usize)> = Vec::with_capacity(dim + entries.len());
        for k in 0..dim {
            upper.push((iperm[k], iperm[k], k));
        }
        for (e, &(r, c)) in entries.iter().enumerate() {
            let (pr, pc) = (iperm[r], iperm[c]);
            upper.push((pr.max(pc), pr.min(pc), dim + e));
        }
        upper.sort_unstable();

        let mut colptr = vec![0usize; dim + 1];
        let mut rowval = Vec::with_capacity(upper.len());
        let mut pos_of = vec![0usize; upper.len()];
        for (p, &(col, row, id)) in upper.iter().enumerate() {
            colptr[col + 1] += 1;
            rowval.push(row);
            pos_of[id] = p;
        }
        for c in 0..dim {
            colptr[c + 1] += colptr[c];
        }
        let mut nzval = vec![0.0; upper.len()];
        let nexp = exp_starts.len();
        let exp_pos: Vec<[usize; 3]> = (0..nexp)
            .map(|b| {
                let base = dim + 3 * b;
                [pos_of[base], pos_of[base + 1], pos_of[base + 2]]
            })
            .collect();
        let mut e = dim + 3 * nexp;
        for j in 0..n {
            for (_, v) in a.col(j) {
                nzval[pos_of[e]] = v;
                e += 1;
            }
        }
        let diag_pos = pos_of[..dim].to_vec();

        let mut signs = vec![0.0; dim];
        for k in 0..dim {
            signs[iperm[k]] = if k < n { -1.0 } else { 1.0 };
        }
        let factor = LdlFactor::analyze(dim, &colptr, &rowval);
        Self {
            n,
            m,
            iperm,
            colptr,
            rowval,
            nzval,
            diag_pos,
            exp_pos,
            exp_starts,
            signs,
            factor,
            work: vec![0.0; dim],
        }
    }

    pub fn nnz_factor(&self) -> usize {
        self.factor.nnz_l()
    }

    /// Loads `W` with static regularization `reg` and factors. Returns the
    /// number of pivots that needed dynamic regularization.
    pub fn factor(&mut self, w: &Scaling, reg: f64) -> Result<usize, ZeroPivot> {
        for j in 0..self.n {
            self.nzval[self.diag_pos[j]] = -w.diag[j] - reg;
        }
        for i in 0..self.m {
            self.nzval[self.diag_pos[self.n + i]] = reg;
        }
        for (b, pos) in self.exp_pos.iter().enumerate() {
            for t in 0..3 {
                self.nzval[pos[t]] = -w.exp_off[b][t];
            }
        }
        self.factor
            .factor(&self.colptr, &self.rowval, &self.nzval, &self.signs, 1e-13, 2e-7)?;
        Ok(self.factor.dynamic_regs)
    }

    /// Solves with the factored regularized matrix, then refines against
    /// the unregularized operator. `rhs` is `[r1; r2]`, overwritten by the
    /// solution.
    pub fn solve(&mut self, a: &CscMatrix, w: &Scaling, rhs: &mut [f64], refine: usize) {
        let dim = self.n + self.m;
        let b = rhs.to_vec();
        let bnorm = inf_norm(&b);
        self.solve_once(rhs);
        let mut resid = vec![0.0; dim];
        let mut prev = f64::INFINITY;
        for _ in 0..refine {
            self.apply(a, w, rhs, &mut resid);
            for k in 0..dim {
                resid[k] = b[k] - resid[k];
            }
            let rn = inf_norm(&resid);
            if rn <= 1e-14 * (1.0 + bnorm) || rn >= prev {
                break;
            }
            prev = rn;
            self.solve_once(&mut resid);
            for k in 0..dim {
                rhs[k] += resid[k];
            }
        }
    }

    fn solve_once(&mut self, v: &mut [f64]) {
        for (k, &p) in self.iperm.iter().enumerate() {
            self.work[p] = v[k];
        }
        self.factor.solve(&mut self.work);
        for (k, &p) in self.iperm.iter().enumerate() {
            v[k] = self.work[p];
        }
    }

    /// `out = [-W, A^T; A, 0] v`
    fn apply(&self, a: &CscMatrix, w: &Scaling, v: &[f64], out: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let (vx, vy) = v.split_at(n);
        let (ox, oy) = out.split_at_mut(n);
        a.mul_t_vec(vy, ox);
        for j in 0..n {
            ox[j] -= w.diag[j] * vx[j];
        }
        for (b, &s) in self.exp_starts.iter().enumerate() {
            let [h01, h02, h12] = w.exp_off[b];
            ox[s] -= h01 * vx[s + 1] + h02 * vx[s + 2];
            ox[s + 1] -= h01 * vx[s] + h12 * vx[s + 2];
            ox[s + 2] -= h02 * vx[s] + h12 * vx[s + 1];
        }
        debug_assert_eq!(oy.len(), m);
        a.mul_vec(vx, oy);
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::place;

    #[test]
    fn refined_solution_satisfies_unregularized_system() {
        // vars: free(1) | nonneg(1) | exp(3); two rows
        let a = CscMatrix::from_triplets(
            2,
            5,
            &[(0, 0, 1.0), (0, 2, 1.0), (1, 1, 1.0), (1, 3, 2.0), (0, 4, -1.0)],
        )
        .unwrap();
        let blocks = place(&[ConeBlock::Free(1), ConeBlock::NonNeg(1), ConeBlock::Exp]);
        let mut kkt = KktSystem::new(&a, &blocks);
        let mut w = Scaling::new(5, 1);
        w.diag = vec![0.0, 2.0, 3.0, 4.0, 5.0];
        w.exp_off = vec![[0.5, -0.2, 1.0]];
        kkt.factor(&w, 1e-8).unwrap();
        let rhs0 = vec![1.0, -1.0, 0.5, 2.0, 0.0, 3.0, -2.0];
        let mut sol = rhs0.clone();
        kkt.solve(&a, &w, &mut sol, 10);
        let mut back = vec![0.0; 7];
        kkt.apply(&a, &w, &sol, &mut back);
        for k in 0..7 {
            assert!((back[k] - rhs0[k]).abs() < 1e-10, "{k}: {} vs {}", back[k], rhs0[k]);
        }
    }
}
