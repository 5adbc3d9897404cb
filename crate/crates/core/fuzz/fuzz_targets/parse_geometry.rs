#![no_main]

use lconet::volume::Geometry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = Geometry::from_json(text) {
            let again = Geometry::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
            assert_eq!(again, g);
        }
    }
});
