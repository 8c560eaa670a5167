use crate::program::ConicProgram;
use crate::solver::{ConicSolution, Residuals};

/// Recomputes relative residuals of a solution from the program data alone,
/// in the maximization convention (`s = A^T y - c`).
pub fn residuals(program: &ConicProgram, solution: &ConicSolution) -> Residuals {
    let a = program.eq_matrix();
    let b = program.eq_rhs();
    let c = program.objective();
    let norm = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let mut ax = vec![0.0; a.nrows()];
    for (i, j, v) in a.triplets() {
        ax[i] += v * solution.x[j];
    }
    let primal_abs = ax.iter().zip(b).map(|(l, r)| (l - r).abs()).fold(0.0, f64::max);
    let primal = primal_abs / (1.0 + norm(b));

    let mut aty = vec![0.0; a.ncols()];
    for (i, j, v) in a.triplets() {
        aty[j] += v * solution.y[i];
    }
    let dual_abs = (0..a.ncols())
        .map(|j| (aty[j] - c[j] - solution.s[j]).abs())
        .fold(0.0, f64::max);
    let dual = dual_abs / (1.0 + norm(c));

    let cx: f64 = c.iter().zip(&solution.x).map(|(c, x)| c * x).sum();
    let by: f64 = b.iter().zip(&solution.y).map(|(b, y)| b * y).sum();
    Residuals {
        primal,
        dual,
        gap: (cx - by).abs() / (1.0 + cx.abs()),
    }
}
