//! Parsers reject malformed input with errors, never panics. Mutations of the
//! fuzz corpus seeds stand in for a fuzzing run on the stable toolchain.

use std::path::PathBuf;

use landuse_core::io::*;
use landuse_core::simulation::SimScenario;
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut seeds: Vec<Vec<u8>> = std::fs::read_dir(dir).unwrap().map(|e| std::fs::read(e.unwrap().path()).unwrap()).collect();
    seeds.sort();
    assert!(!seeds.is_empty());
    seeds
}

fn all_parsers(data: &[u8]) {
    let map = CategoryMap::parse("q = 3\n[tax_codes]\nR1 = 1\nC2 = 2\nI3 = 3\n").unwrap();
    let _ = read_parcels(data, Some(&map));
    let _ = read_ratings(data, None, &RatingsOptions::default());
    let _ = read_grid(data, None, 3);
    let _ = read_draws_csv(data);
    let _ = decode_draws_bin(data);
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = CategoryMap::parse(text);
        if let Ok(s) = toml::from_str::<SimScenario>(text) {
            let _ = s.validate();
        }
    }
}

#[test]
fn seeds_parse() {
    let map = CategoryMap::parse(std::str::from_utf8(&corpus("category_map")[0]).unwrap()).unwrap();
    assert_eq!(map.category("C2"), Some(1));
    for seed in corpus("parcels_csv") {
        assert_eq!(read_parcels(seed.as_slice(), Some(&map)).unwrap().len(), 3);
    }
    for seed in corpus("ratings_csv") {
        let opts = RatingsOptions::default();
        // Seeds without categories need a partition; the rest parse alone.
        if let Ok(ds) = read_ratings(seed.as_slice(), None, &opts) {
            assert!(ds.n() > 0);
        }
    }
    let grids = corpus("grid_csv");
    // `bare.csv` sorts first and names no categories.
    assert!(read_grid(grids[0].as_slice(), None, 3).is_err());
    assert!(!read_grid(grids[1].as_slice(), None, 3).unwrap().is_empty());
    let csv = read_draws_csv(corpus("draws_csv")[0].as_slice()).unwrap();
    let bin = decode_draws_bin(&corpus("draws_bin")[0]).unwrap();
    assert_eq!(csv, bin);
    let s: SimScenario = toml::from_str(std::str::from_utf8(&corpus("scenario_toml")[0]).unwrap()).unwrap();
    s.validate().unwrap();
}

#[test]
fn truncated_binary_draws_are_rejected() {
    let seed = &corpus("draws_bin")[0];
    for cut in 0..seed.len() {
        assert!(decode_draws_bin(&seed[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
    let mut long = seed.clone();
    long.push(0);
    assert!(decode_draws_bin(&long).is_err());
}

fn mutated() -> impl Strategy<Value = Vec<u8>> {
    let seeds: Vec<Vec<u8>> = [
        "parcels_csv",
        "ratings_csv",
        "grid_csv",
        "draws_csv",
        "draws_bin",
        "category_map",
        "scenario_toml",
    ]
    .iter()
    .flat_map(|t| corpus(t))
    .collect();
    (prop::sample::select(seeds), prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6)).prop_map(
        |(mut bytes, edits)| {
            for (at, b) in edits {
                let i = at.index(bytes.len());
                bytes[i] = b;
            }
            bytes
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_bytes_do_not_panic(data in prop::collection::vec(any::<u8>(), 0..256)) {
        all_parsers(&data);
    }

    #[test]
    fn mutated_seeds_do_not_panic(data in mutated()) {
        all_parsers(&data);
    }
}
