#![no_main]

use landuse_core::io::CategoryMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(map) = CategoryMap::parse(text) {
            for code in map.tax_codes.keys() {
                assert!(map.category(code).unwrap() < map.q);
            }
        }
    }
});
