#![no_main]

use landuse_core::io::{decode_draws_bin, write_draws_bin};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(draws) = decode_draws_bin(data) {
        let mut out = Vec::new();
        if write_draws_bin(&mut out, &draws).is_ok() {
            let _ = decode_draws_bin(&out);
        }
    }
});
