#![allow(dead_code)]

use expcone::{ConeBlock, ConicProgram, CscMatrix};

/// Multinomial-logit likelihood as an exponential-cone program.
/// `attrs[n][j]` is the attribute vector of alternative `j` for observation
/// `n`; alternative 0 is the chosen one.
/// Variables: beta (free) | t (free, one per observation) | slack (>= 0) |
/// one (z, u, w) exp block per alternative.
pub fn logit_program(attrs: &[Vec<Vec<f64>>]) -> ConicProgram {
    let p = attrs[0][0].len();
    let nobs = attrs.len();
    let nalt: usize = attrs.iter().map(Vec::len).sum();
    let t0 = p;
    let slack0 = p + nobs;
    let cone0 = p + 2 * nobs;
    let nvars = cone0 + 3 * nalt;
    let mut trip = Vec::new();
    let mut rhs = Vec::new();
    let mut c = vec![0.0; nvars];
    let mut row = 0;
    let mut k = 0;
    for (n, alts) in attrs.iter().enumerate() {
        let sum_row = row;
        row += 1;
        rhs.push(1.0);
        trip.push((sum_row, slack0 + n, 1.0));
        for a in alts {
            let z = cone0 + 3 * k;
            trip.push((sum_row, z, 1.0));
            trip.push((row, z + 1, 1.0));
            rhs.push(1.0);
            row += 1;
            trip.push((row, z + 2, 1.0));
            trip.push((row, t0 + n, 1.0));
            for (d, v) in a.iter().enumerate() {
                trip.push((row, d, -v));
            }
            rhs.push(0.0);
            row += 1;
            k += 1;
        }
        for (d, v) in alts[0].iter().enumerate() {
            c[d] += v;
        }
        c[t0 + n] = -1.0;
    }
    let a = CscMatrix::from_triplets(row, nvars, &trip).unwrap();
    let mut cones = vec![ConeBlock::Free(p + nobs), ConeBlock::NonNeg(nobs)];
    cones.extend(std::iter::repeat_n(ConeBlock::Exp, nalt));
    ConicProgram::new(nvars, c, a, rhs, cones)
}

pub fn loglik(attrs: &[Vec<Vec<f64>>], beta: &[f64]) -> f64 {
    attrs
        .iter()
        .map(|alts| {
            let v: Vec<f64> = alts
                .iter()
                .map(|a| a.iter().zip(beta).map(|(x, b)| x * b).sum())
                .collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v[0] - m - v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        })
        .sum()
}

/// Attributes drawn from a 64-bit LCG, uniform on `[0, 3)`.
/// [`random_attrs`] with every observation repeated once per alternative,
/// each copy choosing a different one. Along any direction of `beta` that
/// changes relative utilities the likelihood then falls without bound, so
/// its maximum is attained.
pub fn overlapping_attrs(seed: u64, nobs: usize, nalt: usize, p: usize) -> Vec<Vec<Vec<f64>>> {
    random_attrs(seed, nobs, nalt, p)
        .into_iter()
        .flat_map(|alts| {
            (0..alts.len()).map(move |j| {
                let mut copy = alts.clone();
                copy.swap(0, j);
                copy
            })
        })
        .collect()
}

pub fn random_attrs(seed: u64, nobs: usize, nalt: usize, p: usize) -> Vec<Vec<Vec<f64>>> {
    let mut state = seed;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..nobs)
        .map(|_| (0..nalt).map(|_| (0..p).map(|_| 3.0 * next()).collect()).collect())
        .collect()
}
