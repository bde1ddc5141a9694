use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use logistic_vb::bound::TruncationOrder;
use logistic_vb::dataset::LabeledDataset;
use logistic_vb::datagen::{gen_gp_toy, GpToySpec};
use logistic_vb::metrics::{auc, kl_mc_gaussians};
use logistic_vb::seeding;
use logistic_vb::specfun::sigmoid;
use logistic_vb::vbgp::{fit_viper_gp, predict_proba_gp, GpOptions};
use logistic_vb::vblogit::{
    elbo_bound, fit_viper, gaussian_kl, Family, FitConfig, GaussianPrior, VariationalGaussian,
};

fn data(n: usize, p: usize, seed: u64) -> LabeledDataset {
    let mut rng = seeding::rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let beta = DVector::from_fn(p, |j, _| 1.2 - 0.6 * j as f64);
    let f: DVector<f64> = &x * beta;
    let y = f.map(|f| if rng.random::<f64>() < sigmoid(f) { 1.0 } else { 0.0 });
    LabeledDataset::new(x, y, None).unwrap()
}

fn gaussian(p: usize, seed: u64, family: Family) -> VariationalGaussian {
    let mut rng = seeding::rng(seed);
    let mu = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
    let l = DMatrix::from_fn(p, p, |i, j| match (i.cmp(&j), family) {
        (std::cmp::Ordering::Equal, _) => rng.random_range(0.3..1.2),
        (std::cmp::Ordering::Greater, Family::Full) => rng.random_range(-0.4..0.4),
        _ => 0.0,
    });
    VariationalGaussian::new(mu, l, family).unwrap()
}

fn prior_from(q: &VariationalGaussian) -> GaussianPrior {
    GaussianPrior::new(q.mu().clone(), q.covariance()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_kl_nonnegative_and_zero_on_self(p in 1usize..6, s1 in any::<u64>(), s2 in any::<u64>()) {
        let q = gaussian(p, s1, Family::Full);
        let r = gaussian(p, s2, Family::Full);
        prop_assert!(gaussian_kl(&q, &prior_from(&r)).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&q, &prior_from(&q)).unwrap().abs() < 1e-10);
        let (fwd, rev) = kl_mc_gaussians(&q, &q).unwrap();
        prop_assert!(fwd.abs() < 1e-12 && rev.abs() < 1e-12);
    }

    #[test]
    fn elbo_bound_ignores_row_order(n in 1usize..40, p in 1usize..5, seed in any::<u64>()) {
        let d = data(n, p, seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(n / 3);
        let shuffled = d.select_rows(&order);
        let q = gaussian(p, seed ^ 1, Family::Full);
        let prior = GaussianPrior::standard(p);
        let a = elbo_bound(&d, &q, &prior, TruncationOrder::DEFAULT).unwrap();
        let b = elbo_bound(&shuffled, &q, &prior, TruncationOrder::DEFAULT).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn elbo_bound_monotone_in_order(n in 1usize..30, p in 1usize..5, seed in any::<u64>(), l in 1u32..20) {
        let d = data(n, p, seed);
        let q = gaussian(p, seed ^ 2, Family::Full);
        let prior = GaussianPrior::standard(p);
        let lo = elbo_bound(&d, &q, &prior, TruncationOrder::new(l).unwrap()).unwrap();
        let hi = elbo_bound(&d, &q, &prior, TruncationOrder::new(l + 1).unwrap()).unwrap();
        prop_assert!(hi >= lo - 1e-12 * lo.abs().max(1.0));
    }

    #[test]
    fn likelihood_part_is_additive(n in 1usize..30, p in 1usize..5, seed in any::<u64>()) {
        let d = data(n, p, seed);
        let doubled = d.select_rows(&(0..2 * n).map(|i| i % n).collect::<Vec<_>>());
        let q = gaussian(p, seed ^ 3, Family::Full);
        let prior = GaussianPrior::standard(p);
        let kl = gaussian_kl(&q, &prior).unwrap();
        let one = elbo_bound(&d, &q, &prior, TruncationOrder::DEFAULT).unwrap() + kl;
        let two = elbo_bound(&doubled, &q, &prior, TruncationOrder::DEFAULT).unwrap() + kl;
        prop_assert!((two - 2.0 * one).abs() <= 1e-10 * one.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mean_field_fit_stays_diagonal(n in 5usize..60, p in 1usize..5, seed in any::<u64>()) {
        let d = data(n, p, seed);
        let config = FitConfig { family: Family::MeanField, max_iters: 200, seed, ..FitConfig::default() };
        let fit = fit_viper(&d, &GaussianPrior::standard(p), &config).unwrap();
        let l = fit.posterior.scale();
        prop_assert!((0..p).all(|i| (0..p).all(|j| i == j || l[(i, j)] == 0.0)));
        prop_assert_eq!(fit.iterations, fit.elbo_trace.len());
    }
}

#[test]
fn full_gp_toy_ranks_training_points() {
    let aucs: Vec<f64> = (1..=20)
        .map(|seed| {
            let (train, _) = gen_gp_toy(&GpToySpec { seed, ..GpToySpec::default() }).unwrap();
            let options = GpOptions { inducing: train.n(), ..GpOptions::default() };
            let config = FitConfig { rel_tol: 1e-6, seed, ..FitConfig::default() };
            let (state, _) = fit_viper_gp(&train, &options, &config).unwrap();
            let scores = predict_proba_gp(&state, train.x()).unwrap();
            auc(train.y().as_slice(), scores.as_slice()).unwrap()
        })
        .collect();
    let mut sorted = aucs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[9] + sorted[10]);
    assert!(median >= 0.85, "median train AUC {median}: {aucs:?}");
}
