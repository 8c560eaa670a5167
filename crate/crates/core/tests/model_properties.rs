mod common;

use common::{random_dataset, random_nests, random_tree, Lcg};
use conelogit::model::{
    finite_difference_gradient, mnl_choice_probs, mnl_log_likelihood, nl_choice_probs, nl_log_likelihood,
    tnl_choice_probs, tnl_log_likelihood,
};
use conelogit::{ChoiceDataset, TaxonomyTree};
use proptest::prelude::*;

fn random_beta(g: &mut Lcg, p: usize) -> Vec<f64> {
    (0..p).map(|_| g.uniform(-1.0, 1.0)).collect()
}

/// `|fd - an|_inf <= tol * max(|an|_inf, 1)`
fn assert_gradient_close(an: &[f64], fd: &[f64], tol: f64, what: &str) {
    let scale = an.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (i, (a, f)) in an.iter().zip(fd).enumerate() {
        assert!((a - f).abs() <= tol * scale, "{what}[{i}]: analytic {a} vs differences {f}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 4, 9, 3, 9);
        let beta = random_beta(&mut g, 3);
        let nests = random_nests(&mut g, 9, 3, 0.2, 0.9);
        let tree = random_tree(&mut g, 9, 2, 2, 0.2, 0.9);
        for n in 0..d.num_observations() {
            for probs in [
                mnl_choice_probs(&beta, &d, n).unwrap(),
                nl_choice_probs(&beta, &nests, &d, n).unwrap(),
                tnl_choice_probs(&beta, &tree, &d, n).unwrap(),
            ] {
                let total: f64 = probs.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(probs.iter().all(|&p| p > 0.0 && p <= 1.0));
            }
        }
    }

    #[test]
    fn unit_scales_reduce_to_multinomial(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 6, 8, 2, 8);
        let beta = random_beta(&mut g, 2);
        let nests = random_nests(&mut g, 8, 3, 0.2, 0.9);
        let unit = nests.with_lambdas(&vec![1.0; nests.num_nests()]).unwrap();
        let mnl = mnl_log_likelihood(&beta, &d).unwrap().value;
        let nl = nl_log_likelihood(&beta, &unit, &d).unwrap().value;
        prop_assert!((nl - mnl).abs() < 1e-10);
        let tree = random_tree(&mut g, 8, 2, 2, 0.2, 0.9);
        let flat = tree.with_free_lambdas(&vec![1.0; tree.free_nodes().len()]).unwrap();
        let tnl = tnl_log_likelihood(&beta, &flat, &d).unwrap().value;
        prop_assert!((tnl - mnl).abs() < 1e-10);
        for n in 0..d.num_observations() {
            let a = mnl_choice_probs(&beta, &d, n).unwrap();
            let b = nl_choice_probs(&beta, &unit, &d, n).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tree_of_nests_matches_nested(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 6, 7, 2, 7);
        let beta = random_beta(&mut g, 2);
        let nests = random_nests(&mut g, 7, 3, 0.2, 0.9);
        let tree = TaxonomyTree::from_nests(&nests);
        let nl = nl_log_likelihood(&beta, &nests, &d).unwrap();
        let tnl = tnl_log_likelihood(&beta, &tree, &d).unwrap();
        prop_assert!((nl.value - tnl.value).abs() < 1e-10);
        let (gn, gt) = (nl.gradient_lambda.unwrap(), tnl.gradient_lambda.unwrap());
        for (a, b) in gn.iter().zip(&gt) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_central_differences(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 5, 10, 3, 10);
        let beta = random_beta(&mut g, 3);
        let h = 1e-5;

        let r = mnl_log_likelihood(&beta, &d).unwrap();
        let fd = finite_difference_gradient(|b| mnl_log_likelihood(b, &d).unwrap().value, &beta, h);
        assert_gradient_close(&r.gradient_beta.unwrap(), &fd, 1e-6, "mnl beta");

        let nests = random_nests(&mut g, 10, 3, 0.2, 0.9);
        let r = nl_log_likelihood(&beta, &nests, &d).unwrap();
        let fd = finite_difference_gradient(|b| nl_log_likelihood(b, &nests, &d).unwrap().value, &beta, h);
        assert_gradient_close(&r.gradient_beta.unwrap(), &fd, 1e-6, "nl beta");
        let fd = finite_difference_gradient(
            |l| nl_log_likelihood(&beta, &nests.with_lambdas(l).unwrap(), &d).unwrap().value,
            nests.lambdas(),
            h,
        );
        assert_gradient_close(&r.gradient_lambda.unwrap(), &fd, 1e-6, "nl lambda");

        // strict ordering keeps every probe admissible
        let tree = random_tree(&mut g, 10, 2, 3, 0.2, 0.9);
        let mut lam = tree.free_lambdas();
        for (i, &k) in tree.free_nodes().iter().enumerate() {
            if let Some(pk) = tree.parent(k).filter(|&pk| pk != tree.root()) {
                let pi = tree.free_nodes().iter().position(|&x| x == pk).unwrap();
                lam[i] = lam[i].min(lam[pi] - 1e-3);
            }
        }
        let tree = tree.with_free_lambdas(&lam).unwrap();
        let r = tnl_log_likelihood(&beta, &tree, &d).unwrap();
        let fd = finite_difference_gradient(|b| tnl_log_likelihood(b, &tree, &d).unwrap().value, &beta, h);
        assert_gradient_close(&r.gradient_beta.unwrap(), &fd, 1e-6, "tnl beta");
        let fd = finite_difference_gradient(
            |l| tnl_log_likelihood(&beta, &tree.with_free_lambdas(l).unwrap(), &d).unwrap().value,
            &lam,
            h,
        );
        assert_gradient_close(&r.gradient_lambda.unwrap(), &fd, 1e-6, "tnl lambda");
    }

    #[test]
    fn shifting_all_attributes_leaves_probabilities_unchanged(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 4, 6, 2, 6);
        let beta = random_beta(&mut g, 2);
        let shift = [g.uniform(-2.0, 2.0), g.uniform(-2.0, 2.0)];
        let attrs: Vec<Vec<f64>> = (0..d.num_observations())
            .map(|n| d.attributes(n).iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect())
            .collect();
        let shifted = ChoiceDataset::new(6, 2, d.observations().to_vec(), attrs).unwrap();
        let nests = random_nests(&mut g, 6, 2, 0.2, 0.9);
        let tree = random_tree(&mut g, 6, 2, 2, 0.2, 0.9);
        for n in 0..d.num_observations() {
            let pairs = [
                (mnl_choice_probs(&beta, &d, n).unwrap(), mnl_choice_probs(&beta, &shifted, n).unwrap()),
                (nl_choice_probs(&beta, &nests, &d, n).unwrap(), nl_choice_probs(&beta, &nests, &shifted, n).unwrap()),
                (tnl_choice_probs(&beta, &tree, &d, n).unwrap(), tnl_choice_probs(&beta, &tree, &shifted, n).unwrap()),
            ];
            for (a, b) in pairs {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn multinomial_loglik_is_concave(seed in any::<u64>(), theta in 0.01f64..0.99) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 8, 6, 3, 6);
        let b1 = random_beta(&mut g, 3);
        let b2: Vec<f64> = (0..3).map(|_| g.uniform(-3.0, 3.0)).collect();
        let mid: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| theta * x + (1.0 - theta) * y).collect();
        let f = |b: &[f64]| mnl_log_likelihood(b, &d).unwrap().value;
        prop_assert!(f(&mid) >= theta * f(&b1) + (1.0 - theta) * f(&b2) - 1e-10);
    }

    #[test]
    fn per_observation_terms_add_up(seed in any::<u64>()) {
        let mut g = Lcg::new(seed);
        let d = random_dataset(&mut g, 7, 6, 2, 6);
        let beta = random_beta(&mut g, 2);
        let tree = random_tree(&mut g, 6, 2, 2, 0.2, 0.9);
        let r = tnl_log_likelihood(&beta, &tree, &d).unwrap();
        let total: f64 = r.per_observation.iter().sum();
        prop_assert!((total - r.value).abs() <= 1e-12 * r.value.abs().max(1.0));
    }
}
