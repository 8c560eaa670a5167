//! Logarithmic barrier for the exponential cone
//!
//! ```text
//! K_exp = cl { (x1, x2, x3) : x2 > 0, x1 >= x2 exp(x3 / x2) }
//! F(x)  = -log(x2 log(x1 / x2) - x3) - log(x1) - log(x2)
//! ```
//!
//! `F` is a 3-self-concordant barrier, so `<grad F(x), x> = -3` at every
//! interior point. The dual cone is
//! `K_exp* = cl { (s1, s2, s3) : s3 < 0, s1 >= -s3 exp(s2 / s3 - 1) }`.

use thiserror::Error;

/// Barrier parameter of a single exponential cone.
pub const EXP_CONE_DEGREE: f64 = 3.0;

/// Interior point with `-grad F(x) = x`; used to seed both the primal and
/// the dual iterate.
pub const EXP_CENTRAL_POINT: [f64; 3] = [1.290_927_709_856_958, 0.805_102_001_584_795, -0.827_838_399_065_679];

#[derive(Debug, Error, Clone, PartialEq)]
#[error("point ({0}, {1}, {2}) is not in the interior of the exponential cone")]
pub struct DomainError(pub f64, pub f64, pub f64);

#[derive(Clone, Debug, PartialEq)]
pub struct ExpBarrier {
    pub value: f64,
    pub gradient: [f64; 3],
    /// Row-major, symmetric.
    pub hessian: [[f64; 3]; 3],
}

/// `x2 log(x1/x2) - x3`, the quantity that must stay positive inside the cone.
#[inline]
fn psi(x: &[f64; 3]) -> f64 {
    x[1] * (x[0] / x[1]).ln() - x[2]
}

pub fn in_exp_interior(x: &[f64; 3]) -> bool {
    x[0] > 0.0 && x[1] > 0.0 && psi(x) > 0.0 && x.iter().all(|v| v.is_finite())
}

pub fn in_exp_dual_interior(s: &[f64; 3]) -> bool {
    s[0] > 0.0
        && s[2] < 0.0
        && s.iter().all(|v| v.is_finite())
        && s[0].ln() > (-s[2]).ln() + s[1] / s[2] - 1.0
}

/// Membership in the closed cone, within an absolute slack `tol`.
pub fn in_exp_cone(x: &[f64; 3], tol: f64) -> bool {
    if x[1] > 0.0 {
        x[0] >= -tol && x[0] + tol >= x[1] * (x[2] / x[1]).exp()
    } else {
        x[1] >= -tol && x[0] >= -tol && x[2] <= tol
    }
}

/// Membership in the closed dual cone, within an absolute slack `tol`.
pub fn in_exp_dual_cone(s: &[f64; 3], tol: f64) -> bool {
    if s[2] < 0.0 {
        s[0] >= -tol && s[0] + tol >= -s[2] * (s[1] / s[2] - 1.0).exp()
    } else {
        s[2] <= tol && s[0] >= -tol && s[1] >= -tol
    }
}

pub fn exp_cone_barrier(x: [f64; 3]) -> Result<ExpBarrier, DomainError> {
    if !in_exp_interior(&x) {
        return Err(DomainError(x[0], x[1], x[2]));
    }
    let [x1, x2, _] = x;
    let lr = (x1 / x2).ln();
    let p = psi(&x);
    let dp = [x2 / x1, lr - 1.0, -1.0];
    let gradient = [-dp[0] / p - 1.0 / x1, -dp[1] / p - 1.0 / x2, -dp[2] / p];

    // Hessian of psi is nonzero only in the (x1, x2) corner.
    let d2p = [[-x2 / (x1 * x1), 1.0 / x1, 0.0], [1.0 / x1, -1.0 / x2, 0.0], [0.0; 3]];
    let mut hessian = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            hessian[i][j] = dp[i] * dp[j] / (p * p) - d2p[i][j] / p;
        }
    }
    hessian[0][0] += 1.0 / (x1 * x1);
    hessian[1][1] += 1.0 / (x2 * x2);

    Ok(ExpBarrier {
        value: -p.ln() - x1.ln() - x2.ln(),
        gradient,
        hessian,
    })
}

/// Gradient and Hessian only; skips the value. Caller guarantees interiority.
#[inline]
pub(crate) fn exp_grad_hess(x: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let [x1, x2, _] = *x;
    let lr = (x1 / x2).ln();
    let p = x2 * lr - x[2];
    let dp = [x2 / x1, lr - 1.0, -1.0];
    let ip = 1.0 / p;
    let ip2 = ip * ip;
    let g = [-dp[0] * ip - 1.0 / x1, -dp[1] * ip - 1.0 / x2, ip];
    let mut h = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            h[i][j] = dp[i] * dp[j] * ip2;
        }
    }
    h[0][0] += x2 / (x1 * x1) * ip + 1.0 / (x1 * x1);
    h[0][1] -= ip / x1;
    h[1][1] += ip / x2 + 1.0 / (x2 * x2);
    h[1][0] = h[0][1];
    h[2][0] = h[0][2];
    h[2][1] = h[1][2];
    (g, h)
}

/// The primal point `x` with `-grad F(x) = s`, for `s` in the interior of
/// the dual cone (the negated gradient of the conjugate barrier at `s`).
///
/// With `a = -s3`, the conditions reduce to `d + log(1 + d) = m` for
/// `m = 1 + s2 / a + log(s1 / a) > 0`, the dual interiority margin; then
/// `x2 = 1 / (a d)`, `x1 = (1 + d) / (d s1)`, `x3 = x2 log(x1 / x2) - 1 / a`.
pub(crate) fn exp_dual_shadow(s: &[f64; 3]) -> [f64; 3] {
    let a = -s[2];
    let d = shadow_root(s);
    let x2 = 1.0 / (a * d);
    let x1 = (1.0 + d) / (d * s[0]);
    [x1, x2, x2 * (a * (1.0 + d) / s[0]).ln() - 1.0 / a]
}

/// Conjugate barrier `F*(s) = sup_x { -<s, x> - F(x) }` at a dual interior
/// point, in closed form through the same root `d`.
pub(crate) fn exp_dual_barrier(s: &[f64; 3]) -> f64 {
    let a = -s[2];
    let d = shadow_root(s);
    -3.0 - 2.0 * a.ln() - s[0].ln() + d.ln_1p() - 2.0 * d.ln()
}

/// Root `d > 0` of `d + log(1 + d) = m`.
fn shadow_root(s: &[f64; 3]) -> f64 {
    let a = -s[2];
    let m = 1.0 + s[1] / a + (s[0] / a).ln();
    let mut d = if m < 1.0 { 0.5 * m } else { m - m.ln_1p() + 0.5 };
    d = d.max(f64::MIN_POSITIVE);
    for _ in 0..60 {
        let f = d + d.ln_1p() - m;
        let step = f / (1.0 + 1.0 / (1.0 + d));
        let next = if d - step <= 0.0 { 0.1 * d } else { d - step };
        if (next - d).abs() <= 1e-15 * d {
            return next;
        }
        d = next;
    }
    d
}

/// Primal-dual scaling for one exponential block: a symmetric positive
/// definite `W` with `W x = s` and `W x~ = s~`, where `x~` is the dual shadow
/// of `s` and `s~ = -grad F(x)`. Built as the two-secant BFGS update of
/// `mu H(x)`, `mu = x^T s / 3`:
///
/// ```text
/// W = S (X^T S)^-1 S^T + H0 - H0 X (X^T H0 X)^-1 X^T H0,  X = [x x~], S = [s s~]
/// ```
///
/// Falls back to `mu H(x)` when the pair is too close to the central path
/// for the update to be well conditioned.
pub(crate) fn exp_pd_scaling(x: &[f64; 3], s: &[f64; 3]) -> [[f64; 3]; 3] {
    let mu = (x[0] * s[0] + x[1] * s[1] + x[2] * s[2]) / EXP_CONE_DEGREE;
    let (g, h) = exp_grad_hess(x);
    let mut h0 = h;
    h0.iter_mut().flatten().for_each(|v| *v *= mu);
    let xt = exp_dual_shadow(s);
    let st = [-g[0], -g[1], -g[2]];
    let d = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mu_t = d(&xt, &st) / EXP_CONE_DEGREE;
    if !(mu * mu_t - 1.0 > 1e-6) || !xt.iter().all(|v| v.is_finite()) {
        return h0;
    }
    let mv = |m: &[[f64; 3]; 3], v: &[f64; 3]| {
        [d(&m[0], v), d(&m[1], v), d(&m[2], v)]
    };
    // M = X^T S, exact off-diagonals equal the degree
    let m = [[d(x, s), d(x, &st)], [d(&xt, s), d(&xt, &st)]];
    let h0x = mv(&h0, x);
    let h0xt = mv(&h0, &xt);
    let q = [[d(x, &h0x), d(x, &h0xt)], [d(&xt, &h0x), d(&xt, &h0xt)]];
    let (Some(mi), Some(qi)) = (inv2(&m), inv2(&q)) else {
        return h0;
    };
    let cols_s = [*s, st];
    let cols_h = [h0x, h0xt];
    let mut w = h0;
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += cols_s[a][i] * mi[a][b] * cols_s[b][j];
                    acc -= cols_h[a][i] * qi[a][b] * cols_h[b][j];
                }
            }
            w[i][j] += acc;
        }
    }
    // symmetrize against rounding
    for i in 0..3 {
        for j in 0..i {
            let avg = 0.5 * (w[i][j] + w[j][i]);
            w[i][j] = avg;
            w[j][i] = avg;
        }
    }
    if chol3(&w).is_none() {
        return h0;
    }
    w
}

fn inv2(m: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = m[0][0].abs().max(m[1][1].abs()).max(m[0][1].abs());
    if !(det.abs() > 1e-14 * scale * scale) {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Third directional derivative `D^3 F(x)[u, v]` of the barrier.
pub(crate) fn exp_third_order(x: &[f64; 3], u: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
    let [x1, x2, _] = *x;
    let lr = (x1 / x2).ln();
    let psi = x2 * lr - x[2];
    let p = [x2 / x1, lr - 1.0, -1.0];
    let qm = |w: &[f64; 3]| [-x2 / (x1 * x1) * w[0] + w[1] / x1, w[0] / x1 - w[1] / x2, 0.0];
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (qu, qv) = (qm(u), qm(v));
    let (pu, pv) = (dot(&p, u), dot(&p, v));
    let uqv = dot(u, &qv);
    let t = [
        2.0 * x2 / (x1 * x1 * x1) * u[0] * v[0] - (u[0] * v[1] + u[1] * v[0]) / (x1 * x1),
        -u[0] * v[0] / (x1 * x1) + u[1] * v[1] / (x2 * x2),
        0.0,
    ];
    let (i1, i2, i3) = (1.0 / psi, 1.0 / (psi * psi), 1.0 / (psi * psi * psi));
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (qu[k] * pv + qv[k] * pu + p[k] * uqv) * i2 - 2.0 * p[k] * pu * pv * i3 - t[k] * i1;
    }
    out[0] -= 2.0 * u[0] * v[0] / (x1 * x1 * x1);
    out[1] -= 2.0 * u[1] * v[1] / (x2 * x2 * x2);
    out
}

/// Solves `H z = v` given the Cholesky factor of `H`.
pub(crate) fn chol3_solve(l: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    let y0 = v[0] / l[0][0];
    let y1 = (v[1] - l[1][0] * y0) / l[1][1];
    let y2 = (v[2] - l[2][0] * y0 - l[2][1] * y1) / l[2][2];
    let z2 = y2 / l[2][2];
    let z1 = (y1 - l[2][1] * z2) / l[1][1];
    let z0 = (y0 - l[1][0] * z1 - l[2][0] * z2) / l[0][0];
    [z0, z1, z2]
}

/// Cholesky of a symmetric 3x3 matrix; `None` if not positive definite.
pub(crate) fn chol3(h: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = h[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// Largest `a` in `[0, a_hi]` with `x + a dx` strictly inside the set,
/// found by bisection. `x` must be strictly inside.
pub(crate) fn max_step_in(
    x: &[f64; 3],
    dx: &[f64; 3],
    a_hi: f64,
    inside: impl Fn(&[f64; 3]) -> bool,
) -> f64 {
    let at = |a: f64| [x[0] + a * dx[0], x[1] + a * dx[1], x[2] + a * dx[2]];
    if inside(&at(a_hi)) {
        return a_hi;
    }
    let (mut lo, mut hi) = (0.0, a_hi);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if inside(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-6 * hi {
            break;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(x: [f64; 3], h: f64) -> [f64; 3] {
        let mut g = [0.0; 3];
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            g[i] = (exp_cone_barrier(xp).unwrap().value - exp_cone_barrier(xm).unwrap().value)
                / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = [2.0, 1.0, 0.0];
        let b = exp_cone_barrier(x).unwrap();
        let fd = fd_gradient(x, 1e-5);
        for i in 0..3 {
            let rel = (b.gradient[i] - fd[i]).abs() / b.gradient[i].abs().max(1e-12);
            assert!(rel < 1e-6, "component {i}: {} vs {}", b.gradient[i], fd[i]);
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let x = [2.0, 1.0, 0.0];
        let b = exp_cone_barrier(x).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let gp = exp_cone_barrier(xp).unwrap().gradient;
            let gm = exp_cone_barrier(xm).unwrap().gradient;
            for i in 0..3 {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!((fd - b.hessian[i][j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
        let (g, hh) = exp_grad_hess(&x);
        assert_eq!(g, b.gradient);
        for i in 0..3 {
            for j in 0..3 {
                assert!((hh[i][j] - b.hessian[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn logarithmic_homogeneity() {
        let x = [2.0, 1.0, 0.0];
        for t in [0.5, 2.0] {
            let tx = [t * x[0], t * x[1], t * x[2]];
            let g = exp_cone_barrier(tx).unwrap().gradient;
            let dot: f64 = g.iter().zip(tx.iter()).map(|(a, b)| a * b).sum();
            assert!((dot + EXP_CONE_DEGREE).abs() < 1e-12, "t = {t}: {dot}");
        }
    }

    #[test]
    fn central_point_is_self_dual() {
        let g = exp_cone_barrier(EXP_CENTRAL_POINT).unwrap().gradient;
        for i in 0..3 {
            assert!((g[i] + EXP_CENTRAL_POINT[i]).abs() < 1e-9, "{g:?}");
        }
        assert!(in_exp_dual_interior(&EXP_CENTRAL_POINT));
    }

    #[test]
    fn boundary_and_exterior_are_domain_errors() {
        assert!(exp_cone_barrier([1.0, 1.0, 0.0]).is_err());
        assert!(exp_cone_barrier([1.0, 0.0, -1.0]).is_err());
        assert!(exp_cone_barrier([-1.0, 1.0, -5.0]).is_err());
    }

    #[test]
    fn negative_gradient_lies_in_dual_interior() {
        for x in [[2.0, 1.0, 0.0], [5.0, 0.1, 0.2], [1.0, 3.0, -4.0]] {
            let g = exp_cone_barrier(x).unwrap().gradient;
            assert!(in_exp_dual_interior(&[-g[0], -g[1], -g[2]]));
        }
    }

    #[test]
    fn dual_shadow_inverts_the_gradient_map() {
        for x in [[2.0, 1.0, 0.0], [5.0, 0.1, 0.2], [1.0, 3.0, -4.0], [1.0 + 1e-9, 1.0, 0.0]] {
            let g = exp_cone_barrier(x).unwrap().gradient;
            let back = exp_dual_shadow(&[-g[0], -g[1], -g[2]]);
            for i in 0..3 {
                assert!((back[i] - x[i]).abs() < 1e-7 * (1.0 + x[i].abs()), "{x:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn conjugate_barrier_is_consistent_with_shadow() {
        for x in [[2.0, 1.0, 0.0], [5.0, 0.1, 0.2], [1.0, 3.0, -4.0]] {
            let b = exp_cone_barrier(x).unwrap();
            let s = [-b.gradient[0], -b.gradient[1], -b.gradient[2]];
            // F(x) + F*(-grad F(x)) = -nu
            assert!((b.value + exp_dual_barrier(&s) + 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn primal_dual_scaling_satisfies_both_secant_equations() {
        let x = [2.0, 1.0, 0.0];
        let s = [1.0, 0.3, -0.5];
        assert!(in_exp_dual_interior(&s));
        let w = exp_pd_scaling(&x, &s);
        let g = exp_cone_barrier(x).unwrap().gradient;
        let xt = exp_dual_shadow(&s);
        for i in 0..3 {
            let wx: f64 = (0..3).map(|j| w[i][j] * x[j]).sum();
            let wxt: f64 = (0..3).map(|j| w[i][j] * xt[j]).sum();
            assert!((wx - s[i]).abs() < 1e-9, "W x != s: {wx} vs {}", s[i]);
            assert!((wxt + g[i]).abs() < 1e-9, "W x~ != s~");
        }
        assert!(chol3(&w).is_some());
    }

    #[test]
    fn chol_solve_inverts_hessian() {
        let (_, h) = exp_grad_hess(&[2.0, 1.0, 0.0]);
        let l = chol3(&h).unwrap();
        let v = [1.0, -2.0, 0.5];
        let z = chol3_solve(&l, &v);
        for i in 0..3 {
            let hz: f64 = (0..3).map(|j| h[i][j] * z[j]).sum();
            assert!((hz - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn third_derivative_matches_hessian_differences() {
        let x = [2.0, 1.0, 0.3];
        let u = [0.3, -0.2, 0.5];
        let v = [-0.1, 0.4, 0.2];
        let t = exp_third_order(&x, &u, &v);
        let eps = 1e-6;
        let xp = [x[0] + eps * u[0], x[1] + eps * u[1], x[2] + eps * u[2]];
        let xm = [x[0] - eps * u[0], x[1] - eps * u[1], x[2] - eps * u[2]];
        let (_, hp) = exp_grad_hess(&xp);
        let (_, hm) = exp_grad_hess(&xm);
        for i in 0..3 {
            let fd: f64 = (0..3).map(|j| (hp[i][j] - hm[i][j]) / (2.0 * eps) * v[j]).sum();
            assert!((fd - t[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", t[i]);
        }
    }

    mod prop {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hessian_is_positive_definite(x2 in 0.01f64..10.0, ratio in -20.0f64..20.0, gap in 1e-6f64..10.0) {
                // x1 strictly above the boundary x2 exp(x3/x2)
                let x3 = ratio * x2;
                let x1 = x2 * ratio.exp() * (1.0 + gap);
                let b = exp_cone_barrier([x1, x2, x3]).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((b.hessian[i][j] - b.hessian[j][i]).abs() <= 1e-12 * b.hessian[i][j].abs().max(1.0));
                    }
                }
                prop_assert!(chol3(&b.hessian).is_some());
            }
        }
    }
}
