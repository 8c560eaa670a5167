mod common;

use std::collections::BTreeSet;

use common::{random_dataset, random_nests, random_tree, Lcg};
use conelogit::model::mnl_log_likelihood;
use conelogit::reformulate::{ConeOrigin, Ecp};
use conelogit::{extract_solution, mnl_to_ecp, nl_to_ecp, tnl_to_ecp, ChoiceDataset, Observation, TaxonomyTree};
use expcone::{residuals, solve, ConeBlock, SolveStatus, SolverConfig};
use proptest::prelude::*;

fn solve_and_audit(ecp: &Ecp, data: &ChoiceDataset) -> (f64, Vec<f64>) {
    solve_and_audit_at(ecp, data, 1e-8)
}

fn solve_and_audit_at(ecp: &Ecp, data: &ChoiceDataset, tol: f64) -> (f64, Vec<f64>) {
    let cfg = SolverConfig {
        tol,
        ..SolverConfig::default()
    };
    let sol = solve(&ecp.program, &cfg).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(residuals(&ecp.program, &sol).within(1e-8));
    let ex = extract_solution(&sol, &ecp.vmap, data).unwrap();
    assert!(ex.audit.max_slack <= 1e-6, "slack {}", ex.audit.max_slack);
    assert!(ex.audit.relative_gap <= 1e-6, "gap {}", ex.audit.relative_gap);
    (sol.primal_objective, ex.beta)
}

/// Every variable slot is claimed by exactly one role, and every
/// exponential block has exactly one registry entry.
fn check_layout(ecp: &Ecp) {
    let v = &ecp.vmap;
    let mut seen = vec![0u8; ecp.program.num_vars()];
    let mut claim = |i: usize| seen[i] += 1;
    v.beta.clone().for_each(&mut claim);
    v.obs_slots.iter().copied().for_each(&mut claim);
    v.group_slots.iter().for_each(|g| claim(g.slot));
    v.slacks.clone().for_each(&mut claim);
    (v.cone_start..ecp.program.num_vars()).for_each(&mut claim);
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(v.cone_registry.len(), ecp.program.num_exp_blocks());
    let nonneg: usize = ecp
        .program
        .cones()
        .iter()
        .map(|c| if let ConeBlock::NonNeg(d) = c { *d } else { 0 })
        .sum();
    assert_eq!(nonneg, v.slacks.len());
    assert!(ecp.program.validate().is_ok());
}

/// Active internal nodes of one observation, counted by walking every
/// offered leaf up to the root.
fn ancestors(tree: &TaxonomyTree, offered: &[usize]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &alt in offered {
        let mut k = tree.leaf_of(alt);
        while let Some(pk) = tree.parent(k) {
            out.insert(pk);
            k = pk;
        }
    }
    out
}

fn full_availability(g: &mut Lcg, n: usize, m: usize, p: usize) -> ChoiceDataset {
    let obs = (0..n)
        .map(|_| Observation {
            chosen: g.below(m),
            offered: (0..m).collect(),
        })
        .collect();
    let attrs = (0..n).map(|_| (0..m * p).map(|_| g.uniform(0.0, 3.0)).collect()).collect();
    ChoiceDataset::new(m, p, obs, attrs).unwrap()
}

#[test]
fn full_availability_sizes_match_closed_forms() {
    let mut g = Lcg::new(3);
    let (n, m, p, l) = (7, 12, 2, 3);
    let d = full_availability(&mut g, n, m, p);
    let mnl = mnl_to_ecp(&d);
    assert_eq!(mnl.sizing.z, n * m);
    assert_eq!(mnl.sizing.exp_blocks, n * m);

    let nests = random_nests(&mut g, m, l, 0.2, 0.9);
    let nl = nl_to_ecp(&d, &nests, nests.lambdas()).unwrap();
    assert_eq!(nl.sizing.lambda, Some(n * l));
    assert_eq!(nl.sizing.exp_blocks, n * m + n * l);

    for (b1, b2) in [(2, 2), (3, 3), (2, 3)] {
        let tree = random_tree(&mut g, m, b1, b2, 0.2, 0.9);
        let q = 1 + b1 + b1 * b2;
        let tnl = tnl_to_ecp(&d, &tree, &tree.free_lambdas()).unwrap();
        assert_eq!(tnl.sizing.gamma, Some(n * q));
        assert_eq!(tnl.sizing.edges, Some(n * (q + m - 1)));
        assert_eq!(tnl.sizing.exp_blocks, n * (q + m - 1));
    }
}

#[test]
fn five_thousand_appearances_give_five_thousand_blocks() {
    let mut g = Lcg::new(9);
    let obs: Vec<Observation> = (0..500)
        .map(|_| {
            let offered = g.subset(50, 10);
            Observation {
                chosen: offered[0],
                offered,
            }
        })
        .collect();
    let attrs = vec![vec![0.5; 10]; 500];
    let d = ChoiceDataset::new(50, 1, obs, attrs).unwrap();
    assert_eq!(mnl_to_ecp(&d).sizing.exp_blocks, 5000);
}

#[test]
fn grid_oracle_matches_two_observation_program() {
    // attributes 0 and 1, one choice of each: concave in beta, optimum at 0
    let d = ChoiceDataset::new(
        2,
        1,
        vec![
            Observation {
                chosen: 0,
                offered: vec![0, 1],
            },
            Observation {
                chosen: 1,
                offered: vec![0, 1],
            },
        ],
        vec![vec![0.0, 1.0], vec![0.0, 1.0]],
    )
    .unwrap();
    let (value, beta) = solve_and_audit(&mnl_to_ecp(&d), &d);
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for i in 0..=10_000 {
        let b = -5.0 + 1e-3 * i as f64;
        let f = mnl_log_likelihood(&[b], &d).unwrap().value;
        if f > best {
            best = f;
            arg = b;
        }
    }
    assert!((value - best).abs() < 1e-3);
    assert!((beta[0] - arg).abs() < 2e-3);
    assert!((value + 2.0 * 2f64.ln()).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sizing_matches_direct_recount(seed in any::<u64>(), n in 1usize..30, p in 0usize..4) {
        let mut g = Lcg::new(seed);
        let m = 9;
        let d = random_dataset(&mut g, n, m, p, m);
        let z: usize = d.observations().iter().map(|o| o.offered.len()).sum();

        let mnl = mnl_to_ecp(&d);
        prop_assert_eq!(mnl.sizing.z, z);
        prop_assert_eq!(mnl.sizing.exp_blocks, z);
        prop_assert_eq!(mnl.sizing.vars, p + 2 * n + 3 * z);
        prop_assert_eq!(mnl.sizing.eq_rows, n + 2 * z);
        check_layout(&mnl);

        let nests = random_nests(&mut g, m, 3, 0.2, 0.9);
        let big_lambda: usize = d
            .observations()
            .iter()
            .map(|o| o.offered.iter().map(|&a| nests.nest_of(a)).collect::<BTreeSet<_>>().len())
            .sum();
        let nl = nl_to_ecp(&d, &nests, nests.lambdas()).unwrap();
        prop_assert_eq!(nl.sizing.lambda, Some(big_lambda));
        prop_assert_eq!(nl.sizing.exp_blocks, z + big_lambda);
        prop_assert_eq!(nl.sizing.vars, p + n + big_lambda + (big_lambda + n) + 3 * (z + big_lambda));
        check_layout(&nl);
        for origin in &nl.vmap.cone_registry {
            match *origin {
                ConeOrigin::NestMember { n, alt, nest } => {
                    prop_assert!(d.observation(n).offered.contains(&alt));
                    prop_assert_eq!(nests.nest_of(alt), nest);
                }
                ConeOrigin::Nest { n, nest } => {
                    prop_assert!(d.observation(n).offered.iter().any(|&a| nests.nest_of(a) == nest));
                }
                _ => prop_assert!(false, "unexpected origin {:?}", origin),
            }
        }

        let tree = random_tree(&mut g, m, 2, 3, 0.2, 0.9);
        let active: Vec<BTreeSet<usize>> = d.observations().iter().map(|o| ancestors(&tree, &o.offered)).collect();
        let gamma: usize = active.iter().map(BTreeSet::len).sum();
        let tnl = tnl_to_ecp(&d, &tree, &tree.free_lambdas()).unwrap();
        prop_assert_eq!(tnl.sizing.gamma, Some(gamma));
        prop_assert_eq!(tnl.sizing.edges, Some(gamma + z - n));
        prop_assert_eq!(tnl.sizing.exp_blocks, gamma + z - n);
        check_layout(&tnl);
        for origin in &tnl.vmap.cone_registry {
            let ConeOrigin::Edge { n, parent, child } = *origin else {
                prop_assert!(false, "unexpected origin {:?}", origin);
                unreachable!()
            };
            prop_assert_eq!(tree.parent(child), Some(parent));
            prop_assert!(active[n].contains(&parent));
            match tree.alternative_of(child) {
                Some(alt) => prop_assert!(d.observation(n).offered.contains(&alt)),
                None => prop_assert!(active[n].contains(&child)),
            }
        }
        for gs in &tnl.vmap.group_slots {
            prop_assert!(active[gs.n].contains(&gs.group));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conic_value_equals_likelihood_at_extracted_beta(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let m = 8;
        let d = random_dataset(&mut g, 40, m, 3, m);
        solve_and_audit(&mnl_to_ecp(&d), &d);
        let nests = random_nests(&mut g, m, 3, 0.2, 0.9);
        solve_and_audit(&nl_to_ecp(&d, &nests, nests.lambdas()).unwrap(), &d);
        let tree = random_tree(&mut g, m, 2, 2, 0.2, 0.9);
        solve_and_audit(&tnl_to_ecp(&d, &tree, &tree.free_lambdas()).unwrap(), &d);
    }

    #[test]
    fn unit_scales_reproduce_the_multinomial_optimum(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let m = 9;
        let d = random_dataset(&mut g, 30, m, 2, m);
        // coefficients sit in a flat likelihood, so compare them at a
        // tighter tolerance than the objective needs
        let (base, beta) = solve_and_audit_at(&mnl_to_ecp(&d), &d, 1e-11);
        let nests = random_nests(&mut g, m, 3, 0.2, 0.9);
        let (nl, nl_beta) = solve_and_audit_at(&nl_to_ecp(&d, &nests, &[1.0; 3]).unwrap(), &d, 1e-11);
        prop_assert!((nl - base).abs() <= 1e-6 * base.abs().max(1.0));
        for (a, b) in beta.iter().zip(&nl_beta) {
            prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
        let tree = random_tree(&mut g, m, 3, 3, 0.2, 0.9);
        let ones = vec![1.0; tree.free_nodes().len()];
        let (tnl, _) = solve_and_audit(&tnl_to_ecp(&d, &tree, &ones).unwrap(), &d);
        prop_assert!((tnl - base).abs() <= 1e-6 * base.abs().max(1.0));
    }
}
