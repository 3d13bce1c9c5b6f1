#![no_main]

use landuse_core::simulation::SimScenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(scenario) = toml::from_str::<SimScenario>(text) {
            let _ = scenario.validate();
        }
    }
});
