#![no_main]

use landuse_core::io::{read_draws_csv, write_draws_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(draws) = read_draws_csv(data) {
        let mut out = Vec::new();
        if write_draws_csv(&mut out, &draws).is_ok() {
            let _ = read_draws_csv(out.as_slice());
        }
    }
});
