#![no_main]

use landuse_core::io::{read_ratings, RatingsOptions};
use landuse_core::{LandUsePartition, Location, Parcel};
use libfuzzer_sys::fuzz_target;

fn partition() -> LandUsePartition {
    let parcels = (0..9)
        .map(|i| Parcel {
            centroid: Location::new(i, (i % 3) as f64, (i / 3) as f64),
            tax_code: format!("T{i}"),
            category: (i % 3) as usize,
        })
        .collect();
    LandUsePartition::new(3, parcels, None).unwrap()
}

fuzz_target!(|data: &[u8]| {
    let opts = RatingsOptions::default();
    let _ = read_ratings(data, None, &opts);
    let _ = read_ratings(data, Some(&partition()), &opts);
    let reversed = RatingsOptions {
        reverse_scale: true,
        ..opts
    };
    let _ = read_ratings(data, None, &reversed);
});
