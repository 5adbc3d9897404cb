#![no_main]

use lconet::pipeline::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::from_json(text) {
            cfg.validate().expect("parsed configs are valid");
        }
    }
});
