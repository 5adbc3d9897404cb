#![no_main]

use lconet::volume::{decode_header, CineVolume, MaskVolume};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_header(data);
    if let Ok(v) = CineVolume::decode(data) {
        assert_eq!(CineVolume::decode(&v.encode()).unwrap().data(), v.data());
    }
    if let Ok(v) = MaskVolume::decode(data) {
        assert_eq!(MaskVolume::decode(&v.encode()).unwrap().data(), v.data());
    }
});
