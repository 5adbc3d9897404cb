#![no_main]

use lconet::checkpoint::{decode, decode_header, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_header(data);
    if let Ok(c) = decode::<f32>(data) {
        let bytes = encode(&c.network, c.epoch);
        let again = decode::<f32>(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode(&again.network, again.epoch), bytes);
    }
    let _ = decode::<f64>(data);
});
