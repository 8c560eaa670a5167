//! Up-looking LDL^T factorization for symmetric quasi-definite matrices,
//! with a minimum-degree fill-reducing ordering.
//!
//! The matrix is supplied as the upper triangle (diagonal included) of the
//! already-permuted matrix in CSC form. Pivots whose sign disagrees with the
//! expected inertia are replaced by a small value of the correct sign.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

const NONE: usize = usize::MAX;

/// Minimum-degree ordering of the graph with adjacency lists `adj`
/// (symmetric, no self loops). Nodes with degree far above the mean are
/// held back and ordered last, as in AMD's dense-row handling.
///
/// Returns `perm` with `perm[new] = old`.
pub(crate) fn minimum_degree(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let dense_cut = 16usize.max((10.0 * (n as f64).sqrt()) as usize);
    let dense: Vec<bool> = adj.iter().map(|a| a.len() > dense_cut).collect();

    let mut graph: Vec<Vec<usize>> = adj
        .iter()
        .map(|a| a.iter().copied().filter(|&u| !dense[u]).collect())
        .collect();
    let mut alive: Vec<bool> = dense.iter().map(|d| !d).collect();
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n)
        .filter(|&v| alive[v])
        .map(|v| Reverse((graph[v].len(), v)))
        .collect();
    let mut stamp = vec![0usize; n];
    let mut clock = 0usize;
    let mut perm = Vec::with_capacity(n);

    while let Some(Reverse((deg, v))) = heap.pop() {
        if !alive[v] || deg != graph[v].len() {
            continue;
        }
        alive[v] = false;
        perm.push(v);
        let nbrs = std::mem::take(&mut graph[v]);
        for &u in &nbrs {
            clock += 1;
            let list = &mut graph[u];
            list.retain(|&w| w != v);
            for &w in list.iter() {
                stamp[w] = clock;
            }
            stamp[u] = clock;
            for &w in &nbrs {
                if stamp[w] != clock {
                    list.push(w);
                    stamp[w] = clock;
                }
            }
            heap.push(Reverse((list.len(), u)));
        }
    }

    let mut held: Vec<usize> = (0..n).filter(|&v| dense[v]).collect();
    held.sort_by_key(|&v| (adj[v].len(), v));
    perm.extend(held);
    perm
}

/// Symbolic analysis: elimination tree and column counts of `L`.
#[derive(Clone, Debug)]
pub(crate) struct LdlFactor {
    n: usize,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // workspace
    y_vals: Vec<f64>,
    y_idx: Vec<usize>,
    marked: Vec<bool>,
    elim: Vec<usize>,
    next_in_col: Vec<usize>,
    pub dynamic_regs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ZeroPivot(pub usize);

impl LdlFactor {
    /// `colptr`/`rowval` describe the upper triangle of the permuted matrix;
    /// every column must contain its diagonal.
    pub fn analyze(n: usize, colptr: &[usize], rowval: &[usize]) -> Self {
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &rowval[colptr[j]..colptr[j + 1]] {
                let mut i = row;
                debug_assert!(i <= j, "entry below the diagonal");
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        Self {
            n,
            etree,
            li: vec![0; total],
            lx: vec![0.0; total],
            lp,
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            y_vals: vec![0.0; n],
            y_idx: vec![0; n],
            marked: vec![false; n],
            elim: vec![0; n],
            next_in_col: vec![0; n],
            dynamic_regs: 0,
        }
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization. `signs[k]` is the expected sign of pivot `k`;
    /// a pivot with `signs[k] * d <= eps` is replaced by `signs[k] * delta`.
    pub fn factor(
        &mut self,
        colptr: &[usize],
        rowval: &[usize],
        nzval: &[f64],
        signs: &[f64],
        eps: f64,
        delta: f64,
    ) -> Result<(), ZeroPivot> {
        let n = self.n;
        self.dynamic_regs = 0;
        for i in 0..n {
            self.next_in_col[i] = self.lp[i];
        }
        for k in 0..n {
            let mut nnz_y = 0usize;
            let mut diag = 0.0;
            for p in colptr[k]..colptr[k + 1] {
                let b = rowval[p];
                if b == k {
                    diag = nzval[p];
                    continue;
                }
                self.y_vals[b] = nzval[p];
                if !self.marked[b] {
                    self.marked[b] = true;
                    self.elim[0] = b;
                    let mut n_elim = 1usize;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if self.marked[next] {
                            break;
                        }
                        self.marked[next] = true;
                        self.elim[n_elim] = next;
                        n_elim += 1;
                        next = self.etree[next];
                    }
                    while n_elim > 0 {
                        n_elim -= 1;
                        self.y_idx[nnz_y] = self.elim[n_elim];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = self.y_idx[i];
                let end = self.next_in_col[c];
                let yc = self.y_vals[c];
                for j in self.lp[c]..end {
                    self.y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                let l = yc * self.dinv[c];
                self.li[end] = k;
                self.lx[end] = l;
                diag -= yc * l;
                self.next_in_col[c] += 1;
                self.y_vals[c] = 0.0;
                self.marked[c] = false;
            }
            if signs[k] * diag <= eps {
                diag = signs[k] * delta;
                self.dynamic_regs += 1;
            }
            if diag == 0.0 || !diag.is_finite() {
                return Err(ZeroPivot(k));
            }
            self.d[k] = diag;
            self.dinv[k] = 1.0 / diag;
        }
        Ok(())
    }

    /// Solves `L D L^T x = b` in place.
    pub fn solve(&self, x: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense symmetric matrix to upper CSC.
    fn upper_csc(m: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let n = m.len();
        let mut cp = vec![0];
        let mut ri = vec![];
        let mut v = vec![];
        for j in 0..n {
            for i in 0..=j {
                if m[i][j] != 0.0 || i == j {
                    ri.push(i);
                    v.push(m[i][j]);
                }
            }
            cp.push(ri.len());
        }
        (cp, ri, v)
    }

    #[test]
    fn solves_quasi_definite_system() {
        // [-H A^T; A δ] with H PD
        let m = vec![
            vec![-4.0, -1.0, 0.0, 1.0, 0.0],
            vec![-1.0, -3.0, 0.0, 1.0, 2.0],
            vec![0.0, 0.0, -2.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0, 1e-8, 0.0],
            vec![0.0, 2.0, 1.0, 0.0, 1e-8],
        ];
        let (cp, ri, v) = upper_csc(&m);
        let mut f = LdlFactor::analyze(5, &cp, &ri);
        let signs = [-1.0, -1.0, -1.0, 1.0, 1.0];
        f.factor(&cp, &ri, &v, &signs, 1e-13, 1e-7).unwrap();
        let b = [1.0, -2.0, 0.5, 3.0, 1.0];
        let mut x = b;
        f.solve(&mut x);
        for i in 0..5 {
            let r: f64 = (0..5).map(|j| m[i][j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-9, "row {i}: {r} vs {}", b[i]);
        }
    }

    #[test]
    fn minimum_degree_is_a_permutation_and_delays_hubs() {
        // star graph: the hub exceeds the dense-node cutoff
        let n = 301;
        let mut adj = vec![vec![]; n];
        for leaf in 1..n {
            adj[0].push(leaf);
            adj[leaf].push(0);
        }
        let perm = minimum_degree(&adj);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        assert_eq!(*perm.last().unwrap(), 0);
    }
}
