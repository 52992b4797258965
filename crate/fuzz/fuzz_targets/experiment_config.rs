#![no_main]

use heft_core::harness::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = ExperimentConfig::from_json(text) {
            for plan in &config.plans {
                let _ = config.plan(plan);
            }
        }
    }
});
