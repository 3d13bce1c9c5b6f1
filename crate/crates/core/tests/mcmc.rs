#![allow(clippy::needless_range_loop)]

use landuse_core::covariance::{observation_corr_matrix, Decay};
use landuse_core::dataset::Rating;
use landuse_core::linalg::Cholesky;
use landuse_core::mcmc::*;
use landuse_core::ordinal::bin_latent;
use landuse_core::simulation::{gen_filtered_data, unit_grid};
use landuse_core::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset_with_covariates(n: usize, q: usize, p: usize, seed: u64) -> RatingsDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<Site> = (0..n)
        .map(|i| Site::new(Location::new(i as u64, rng.random(), rng.random()), i % q))
        .collect();
    let ratings = (0..n)
        .map(|i| Rating {
            site: i,
            level: 1 + i % 5,
            covariates: (0..p).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    RatingsDataset::new(sites, ratings, 5, q).unwrap()
}

fn small_filter() -> FilterCovParams {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
    FilterCovParams::with_unit_nugget(a, vec![Decay::Finite(3.0), Decay::Finite(7.0)]).unwrap()
}

#[test]
fn regression_posterior_matches_conjugate_formula() {
    let ds = dataset_with_covariates(4, 2, 2, 1);
    let r = observation_corr_matrix(&ds, &small_filter());
    let factor = Cholesky::new(&r).unwrap();
    let w = regression_design(&ds);
    let priors = Priors {
        beta_sd: 1.3,
        delta_sd: 0.8,
        ..Priors::default()
    };
    let z = DVector::from_vec(vec![0.4, -1.1, 0.9, 0.2]);
    let (mean, cov) = regression_posterior(&z, &factor, &w, 2, &priors).unwrap();

    let rinv = r.clone().try_inverse().unwrap();
    let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / 1.69, 1.0 / 1.69, 1.0 / 0.64]));
    let v = (w.transpose() * &rinv * &w + p).try_inverse().unwrap();
    let m = &v * w.transpose() * &rinv * &z;
    assert!((mean - &m).amax() < 1e-12);
    assert!((cov - &v).amax() < 1e-12);

    // Monte Carlo mean of the Gibbs draws sits within 4 standard errors.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let mut sum = DVector::zeros(3);
    for _ in 0..n {
        let (b, d) = gibbs_regression(&z, &factor, ds.design(), &ds.m_star(), &priors, &mut rng).unwrap();
        assert_eq!(d[0], 0.0);
        sum += DVector::from_vec(vec![b[0], b[1], d[1]]);
    }
    let avg = sum / n as f64;
    for j in 0..3 {
        let se = (v[(j, j)] / n as f64).sqrt();
        assert!((avg[j] - m[j]).abs() < 4.0 * se, "coefficient {j}: {} vs {}", avg[j], m[j]);
    }
}

#[test]
fn category_shift_is_a_weighted_mean_without_covariates() {
    let sites: Vec<Site> = (0..6).map(|i| Site::new(Location::new(i, i as f64, 0.0), (i % 2) as usize)).collect();
    let ds = RatingsDataset::single_ratings(sites, &[1, 2, 3, 4, 5, 1], 5, 2).unwrap();
    let factor = Cholesky::new(&DMatrix::identity(6, 6)).unwrap();
    let priors = Priors {
        delta_sd: 2.0,
        ..Priors::default()
    };
    let z = DVector::from_vec(vec![0.1, 0.5, -0.3, 1.5, 0.7, -0.4]);
    let (mean, cov) = regression_posterior(&z, &factor, &regression_design(&ds), 0, &priors).unwrap();
    // Category 2 holds ratings 1, 3, 5 (zero-based).
    let want = (0.5 + 1.5 - 0.4) / (3.0 + 0.25);
    assert!((mean[0] - want).abs() < 1e-14);
    assert!((cov[(0, 0)] - 1.0 / 3.25).abs() < 1e-14);
}

#[test]
fn dominating_prior_pins_coefficients_at_zero() {
    let ds = dataset_with_covariates(8, 3, 2, 4);
    let factor = Cholesky::new(&observation_corr_matrix(&ds, &FilterCovParams::simulation_default())).unwrap();
    let priors = Priors {
        beta_sd: 1e-9,
        delta_sd: 1e-9,
        ..Priors::default()
    };
    let z = DVector::from_fn(8, |i, _| i as f64 - 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, d) = gibbs_regression(&z, &factor, ds.design(), &ds.m_star(), &priors, &mut rng).unwrap();
    assert!(b.amax() < 1e-7 && d.amax() < 1e-7, "{b} {d}");
}

fn stationary_target_setup() -> (RatingsDataset, Priors) {
    (dataset_with_covariates(12, 1, 0, 8), Priors::default())
}

#[test]
fn zero_proposal_always_accepts() {
    let (ds, priors) = stationary_target_setup();
    let template = CovParams::Stationary(StationaryCovParams::new(4.0, 1.5).unwrap());
    let target = ThetaTarget::new(&ds, template.clone(), &priors);
    let current = target.evaluate(&target.layout.pack(&template)).unwrap();
    let resid = DVector::from_fn(12, |i, _| (i as f64).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zero = DMatrix::zeros(2, 2);
    for _ in 0..200 {
        let step = mh_theta(&target, &current, &resid, &zero, &mut rng);
        assert!(step.accepted);
        assert_eq!(step.log_alpha, 0.0);
    }
}

#[test]
fn two_state_kernel_satisfies_detailed_balance() {
    let (ds, priors) = stationary_target_setup();
    let template = CovParams::Stationary(StationaryCovParams::new(4.0, 1.5).unwrap());
    let target = ThetaTarget::new(&ds, template.clone(), &priors);
    let resid = DVector::from_fn(12, |i, _| (0.7 * i as f64).cos());
    let u1 = target.evaluate(&target.layout.pack(&template)).unwrap();
    let lower = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.1, 0.3]);
    for seed in 0..20 {
        let fwd = mh_theta(&target, &u1, &resid, &lower, &mut ChaCha8Rng::seed_from_u64(seed));
        let u2 = fwd.proposal.expect("valid proposal");
        // The same normal draws with the negated factor step straight back.
        let back = mh_theta(&target, &u2, &resid, &(-&lower), &mut ChaCha8Rng::seed_from_u64(seed));
        let back_u = back.proposal.expect("valid proposal").u;
        for (a, b) in back_u.iter().zip(&u1.u) {
            assert!((a - b).abs() < 1e-12);
        }
        let (p1, p2) = (u1.log_target(&resid), u2.log_target(&resid));
        let flow12 = p1 + fwd.log_alpha.min(0.0);
        let flow21 = p2 + back.log_alpha.min(0.0);
        assert!((flow12 - flow21).abs() < 1e-9, "seed {seed}: {flow12} vs {flow21}");
        // Same seed, same decision.
        let again = mh_theta(&target, &u1, &resid, &lower, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!((again.accepted, again.log_alpha.to_bits()), (fwd.accepted, fwd.log_alpha.to_bits()));
    }
}

#[test]
fn proposal_tuning_cases() {
    let constant = vec![vec![1.0, 2.0]; 50];
    let c = tune_proposal(&constant, 0.25).unwrap();
    assert!((c - DMatrix::identity(2, 2) * 1e-8).amax() < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pilot: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            vec![2.0 * a, 0.5 * a + b]
        })
        .collect();
    let n = pilot.len() as f64;
    let mean = [pilot.iter().map(|v| v[0]).sum::<f64>() / n, pilot.iter().map(|v| v[1]).sum::<f64>() / n];
    let mut s = DMatrix::zeros(2, 2);
    for v in &pilot {
        for i in 0..2 {
            for j in 0..2 {
                s[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    let tuned = tune_proposal(&pilot, 0.25).unwrap();
    let want = s * 0.25 + DMatrix::identity(2, 2) * 1e-8;
    assert!((tuned - want).amax() < 1e-12);

    // Independent coordinates with variances 4 and 9.
    let diag: Vec<Vec<f64>> = (0..4).map(|i| vec![if i % 2 == 0 { 2.0 } else { -2.0 }, if i < 2 { 3.0 } else { -3.0 }]).collect();
    let d = tune_proposal(&diag, 0.25).unwrap();
    assert!((d[(0, 0)] - (0.25 * 16.0 / 3.0 + 1e-8)).abs() < 1e-12);
    assert!(d[(0, 1)].abs() < 1e-15);
    assert!(tune_proposal(&constant[..1], 0.25).is_err());
}

#[test]
fn zero_iteration_chain_is_empty() {
    let ds = dataset_with_covariates(10, 2, 1, 6);
    let cfg = ChainConfig {
        n_iter: 0,
        burn_in: 0,
        pilot_iter: 0,
        ..ChainConfig::default()
    };
    let draws = run_chain(&ds, &cfg, &Priors::default(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(draws.is_empty());
}

#[test]
fn chains_are_reproducible_and_stay_in_support() {
    let ds = dataset_with_covariates(25, 3, 1, 7);
    let cfg = ChainConfig {
        n_iter: 300,
        burn_in: 100,
        thin: 10,
        pilot_iter: 100,
        ..ChainConfig::default()
    };
    let run = |seed| run_chain(&ds, &cfg, &Priors::default(), None, &mut rng::stream(seed, "t")).unwrap();
    let a = run(11);
    let b = run(11);
    assert_eq!(a.draws, b.draws);
    assert_eq!(a.len(), cfg.stored_draws());
    assert_ne!(a.draws, run(12).draws);
    for d in &a.draws {
        let CovParams::Filter(p) = &d.theta else { panic!("filter chain") };
        p.validate().unwrap();
        let gamma = CutPoints::new(d.gamma.clone()).unwrap();
        let z = d.z.as_ref().unwrap();
        for r in 0..ds.n() {
            assert_eq!(bin_latent(z[r], &gamma), ds.level(r));
        }
    }
}

/// The sampled model integrates out the spatial effects: check the marginal
/// density against a Monte Carlo average of the hierarchical one.
#[test]
fn marginal_matches_hierarchical_density() {
    let sites = vec![
        Site::new(Location::new(1, 0.1, 0.2), 0),
        Site::new(Location::new(2, 0.4, 0.3), 1),
        Site::new(Location::new(3, 0.3, 0.8), 1),
    ];
    let ratings = [(0, 2), (0, 3), (1, 4), (2, 1), (2, 5)]
        .iter()
        .map(|&(site, level)| Rating {
            site,
            level,
            covariates: vec![],
        })
        .collect();
    let ds = RatingsDataset::new(sites.clone(), ratings, 5, 2).unwrap();
    let theta = small_filter();
    let mu = DVector::from_vec(vec![0.2, 0.2, -0.3, -0.3, -0.3]);
    let z = DVector::from_vec(vec![0.5, -0.1, 0.4, -0.8, 0.9]);
    let marginal = Cholesky::new(&observation_corr_matrix(&ds, &theta)).unwrap().mvn_log_density(&(&z - &mu)).exp();

    let kernel = CovParams::Filter(theta.clone());
    let kernel = kernel.constrained();
    let sigma = kernel.site_matrix(&sites);
    let root = Cholesky::new(&sigma).unwrap();
    let nug: Vec<f64> = (0..5).map(|r| kernel.nugget(ds.rating_category(r))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 400_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let zt = root.lower_mul(&DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let mut logp = 0.0;
        for r in 0..5 {
            let m = mu[r] + zt[ds.rating_site(r)];
            logp += -0.5 * (2.0 * std::f64::consts::PI * nug[r]).ln() - 0.5 * (z[r] - m).powi(2) / nug[r];
        }
        acc += logp.exp();
    }
    let hierarchical = acc / draws as f64;
    assert!((hierarchical / marginal - 1.0).abs() < 0.02, "{hierarchical} vs {marginal}");
}

/// Reduced-scale calibration: 95% intervals for a regression coefficient
/// cover the truth in at least 18 of 20 simulated data sets.
#[test]
fn coefficient_intervals_cover_truth() {
    let beta = 0.7;
    let theta = FilterCovParams::simulation_default();
    let gamma = CutPoints::simulation_default();
    let cfg = ChainConfig {
        n_iter: 2000,
        burn_in: 500,
        thin: 5,
        pilot_iter: 500,
        ..ChainConfig::default()
    };
    let mut covered = 0;
    for seed in 0..20 {
        let mut rng = rng::stream(seed, "calibration");
        let locs: Vec<Location> = (0..200).map(|i| Location::new(i, rng.random(), rng.random())).collect();
        let sites: Vec<Site> = locs.iter().enumerate().map(|(i, l)| Site::new(*l, i % 3)).collect();
        let draw = gen_filtered_data(&sites, &theta, &gamma, false, &mut rng).unwrap();
        let ratings = (0..200)
            .map(|r| {
                let x: f64 = rng.sample(StandardNormal);
                Rating {
                    site: r,
                    level: bin_latent(draw.z_star[r] + beta * x, &gamma),
                    covariates: vec![x],
                }
            })
            .collect();
        let ds = RatingsDataset::new(sites, ratings, 5, 3).unwrap();
        let post = run_chain(&ds, &ChainConfig { seed, ..cfg.clone() }, &Priors::default(), None, &mut rng::stream(seed, "chain")).unwrap();
        let mut b: Vec<f64> = post.draws.iter().map(|d| d.beta[0]).collect();
        b.sort_by(f64::total_cmp);
        let lo = b[(0.025 * b.len() as f64) as usize];
        let hi = b[(0.975 * b.len() as f64) as usize - 1];
        if lo <= beta && beta <= hi {
            covered += 1;
        }
    }
    assert!(covered >= 18, "covered {covered} of 20");
}

#[test]
fn stationary_chain_finds_dominant_spatial_share() {
    // kappa = 1 / (1 + tau2) = 0.2: mostly spatial.
    let truth = StationaryCovParams::new(3.0, 4.0).unwrap();
    let mut rng = rng::stream(4, "stationary");
    let locs = unit_grid(14);
    let sites: Vec<Site> = locs.iter().map(|l| Site::new(*l, 0)).collect();
    let ds0 = RatingsDataset::single_ratings(sites.clone(), &vec![1; 196], 5, 1).unwrap();
    let r = landuse_core::covariance::stationary_corr_matrix(&ds0, &truth);
    let z = Cholesky::new(&r).unwrap().lower_mul(&DVector::from_fn(196, |_, _| rng.sample::<f64, _>(StandardNormal)));
    let gamma = CutPoints::simulation_default();
    let levels: Vec<usize> = z.iter().map(|&v| bin_latent(v, &gamma)).collect();
    let ds = RatingsDataset::single_ratings(sites, &levels, 5, 1).unwrap();
    let cfg = ChainConfig {
        n_iter: 3000,
        burn_in: 1000,
        thin: 5,
        pilot_iter: 1000,
        model_kind: ModelKind::Stationary,
        ..ChainConfig::default()
    };
    let post = run_chain(&ds, &cfg, &Priors::default(), None, &mut rng::stream(4, "chain")).unwrap();
    let kappa: f64 = post
        .draws
        .iter()
        .map(|d| match &d.theta {
            CovParams::Stationary(p) => p.kappa(),
            _ => unreachable!(),
        })
        .sum::<f64>()
        / post.len() as f64;
    assert!(kappa < 0.5, "posterior mean kappa {kappa}");
}
