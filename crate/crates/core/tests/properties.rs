use landuse_core::covariance::{observation_corr_matrix, stationary_corr_matrix, Decay};
use landuse_core::linalg::min_eigenvalue;
use landuse_core::ordinal::bin_latent;
use landuse_core::simulation::{assign_train_categories, gen_filtered_data, gen_partition, unit_grid};
use landuse_core::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn filter_params(q: usize) -> impl Strategy<Value = FilterCovParams> {
    (
        prop::collection::vec(-2.0..2.0f64, q * q),
        prop::collection::vec(0.1..20.0f64, q),
        prop::collection::vec(0.05..3.0f64, q),
    )
        .prop_map(move |(a, phi, s2)| {
            let mut m = DMatrix::from_row_slice(q, q, &a);
            for g in 0..q {
                for k in g + 1..q {
                    m[(g, k)] = 0.0;
                }
                m[(g, g)] = m[(g, g)].abs() + 0.05;
            }
            FilterCovParams::new(m, phi.into_iter().map(Decay::Finite).collect(), s2).unwrap()
        })
}

fn dataset(q: usize) -> impl Strategy<Value = RatingsDataset> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0..q, 1..=5usize), 1..25).prop_map(move |pts| {
        let sites = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y, c, _))| Site::new(Location::new(i as u64, x, y), c))
            .collect();
        let levels: Vec<usize> = pts.iter().map(|p| p.3).collect();
        RatingsDataset::single_ratings(sites, &levels, 5, q).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtered_correlation_is_a_correlation_matrix(p in filter_params(3), ds in dataset(3)) {
        let r = observation_corr_matrix(&ds, &p);
        for i in 0..ds.n() {
            prop_assert!((r[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..ds.n() {
                prop_assert!((r[(i, j)] - r[(j, i)]).abs() < 1e-15);
                prop_assert!(r[(i, j)].abs() <= 1.0 + 1e-12);
            }
        }
        prop_assert!(min_eigenvalue(&r) > -1e-8);
    }

    #[test]
    fn stationary_correlation_is_a_correlation_matrix(phi in 0.1..30.0f64, tau2 in 0.0..10.0f64, ds in dataset(1)) {
        let p = StationaryCovParams::new(phi, tau2).unwrap();
        let r = stationary_corr_matrix(&ds, &p);
        for i in 0..ds.n() {
            prop_assert!((r[(i, i)] - 1.0).abs() < 1e-12);
        }
        prop_assert!(min_eigenvalue(&r) > -1e-8);
    }

    #[test]
    fn cross_correlation_is_bounded(p in filter_params(3), d in 0.0..3.0f64) {
        let c = p.cross_corr_block(d);
        for g in 0..3 {
            for h in 0..3 {
                prop_assert!(c[(g, h)].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn binning_matches_a_linear_scan(z in -6.0..6.0f64, mut cuts in prop::collection::vec(-4.0..4.0f64, 1..8)) {
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let gamma = CutPoints::new(cuts.clone()).unwrap();
        let mut level = 1;
        for &g in &cuts {
            if z > g {
                level += 1;
            }
        }
        prop_assert_eq!(bin_latent(z, &gamma), level);
        for (k, &g) in cuts.iter().enumerate() {
            // A value on a cut point belongs to the level below.
            prop_assert_eq!(bin_latent(g, &gamma), k + 1);
        }
    }
}

#[test]
fn partitions_use_every_category() {
    let grid = unit_grid(20);
    for seed in 0..10 {
        let cats = gen_partition(&grid, 3, 5.0, seed).unwrap();
        for q in 0..3 {
            assert!(cats.contains(&q), "seed {seed} misses category {}", q + 1);
        }
        assert_eq!(cats, gen_partition(&grid, 3, 5.0, seed).unwrap());
    }
}

#[test]
fn training_points_take_the_nearest_grid_category() {
    let locs = unit_grid(4);
    let grid: Vec<Site> = locs.iter().map(|l| Site::new(*l, (l.id % 3) as usize)).collect();
    let train = vec![Location::new(100, 0.13, 0.12), Location::new(101, 0.9, 0.6), Location::new(102, 0.375, 0.5)];
    let cats = assign_train_categories(&train, &grid).unwrap();
    for (t, &c) in train.iter().zip(&cats) {
        let best = grid
            .iter()
            .min_by(|a, b| a.loc.distance(t).total_cmp(&b.loc.distance(t)).then(a.loc.id.cmp(&b.loc.id)))
            .unwrap();
        assert_eq!(c, best.category);
    }
}

#[test]
fn simulated_levels_bin_the_latent_draw() {
    let sites: Vec<Site> = unit_grid(8).iter().map(|l| Site::new(*l, (l.id % 3) as usize)).collect();
    let gamma = CutPoints::simulation_default();
    for noiseless in [false, true] {
        let d = gen_filtered_data(&sites, &FilterCovParams::simulation_default(), &gamma, noiseless, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d.z_tilde.is_some(), noiseless);
        for (z, y) in d.z_star.iter().zip(&d.y) {
            assert_eq!(bin_latent(*z, &gamma), *y);
        }
    }
}

#[test]
fn diagonal_loadings_give_uncorrelated_categories() {
    // Two categories at the same places with independent loadings.
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0]));
    let theta = FilterCovParams::with_unit_nugget(a, vec![Decay::Finite(4.0), Decay::Finite(4.0)]).unwrap();
    let gamma = CutPoints::simulation_default();
    let loc = Location::new(0, 0.5, 0.5);
    let sites = vec![Site::new(loc, 0), Site::new(Location::new(1, 0.5, 0.5), 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let mut sxy = 0.0;
    for _ in 0..n {
        let d = gen_filtered_data(&sites, &theta, &gamma, false, &mut rng).unwrap();
        sxy += d.z_star[0] * d.z_star[1];
    }
    // Unit variances, so the sample correlation has sd about 1 / sqrt(n).
    assert!((sxy / n as f64).abs() < 4.0 / (n as f64).sqrt());
}
