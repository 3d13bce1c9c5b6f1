#![no_main]

use landuse_core::io::{read_parcels, CategoryMap};
use landuse_core::LandUsePartition;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let map = CategoryMap::parse("q = 3\n[tax_codes]\nR1 = 1\nC2 = 2\nI3 = 3\n").unwrap();
    if let Ok(parcels) = read_parcels(data, Some(&map)) {
        // Parsed parcels either form a partition or are rejected cleanly.
        let _ = LandUsePartition::new(3, parcels, None);
    }
});
