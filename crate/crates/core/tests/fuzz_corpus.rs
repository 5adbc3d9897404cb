//! Replays the checked-in fuzz seeds through the same entry points the
//! fuzz targets drive.

use std::path::PathBuf;

use lconet::checkpoint;
use lconet::pipeline::TrainConfig;
use lconet::volume::{CineVolume, Geometry, MaskVolume};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn volume_seeds() {
    let mut decoded = 0;
    for (name, bytes) in seeds("decode_volume") {
        let cine = CineVolume::decode(&bytes);
        let mask = MaskVolume::decode(&bytes);
        if let Ok(v) = &cine {
            assert_eq!(CineVolume::decode(&v.encode()).unwrap().data(), v.data(), "{name}");
        }
        if let Ok(v) = &mask {
            assert_eq!(MaskVolume::decode(&v.encode()).unwrap().data(), v.data(), "{name}");
        }
        decoded += (cine.is_ok() || mask.is_ok()) as usize;
    }
    assert!(decoded >= 2);
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (name, bytes) in seeds("decode_checkpoint") {
        if let Ok(c) = checkpoint::decode::<f32>(&bytes) {
            let again = checkpoint::encode(&c.network, c.epoch);
            assert!(checkpoint::decode::<f32>(&again).is_ok(), "{name}");
            decoded += 1;
        }
        let _ = checkpoint::decode::<f64>(&bytes);
    }
    assert!(decoded >= 1);
}

#[test]
fn config_seeds() {
    let mut valid = 0;
    for (_, bytes) in seeds("parse_train_config") {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            if let Ok(cfg) = TrainConfig::from_json(text) {
                cfg.validate().unwrap();
                valid += 1;
            }
        }
    }
    assert!(valid >= 1);
}

#[test]
fn geometry_seeds() {
    let mut valid = 0;
    for (name, bytes) in seeds("parse_geometry") {
        if let Ok(g) = std::str::from_utf8(&bytes).map_err(|_| ()).and_then(|t| Geometry::from_json(t).map_err(|_| ())) {
            let again = Geometry::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
            assert_eq!(again, g, "{name}");
            valid += 1;
        }
    }
    assert!(valid >= 1);
}
