#![no_main]

use landuse_core::io::{read_grid, write_grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = read_grid(data, None, 3) {
        let mut out = Vec::new();
        write_grid(&mut out, &grid).unwrap();
        let again = read_grid(out.as_slice(), None, 3).unwrap();
        assert_eq!(again.sites.len(), grid.sites.len());
    }
});
