//! Harmonic saliency, circle detection and cropping.

use std::f64::consts::PI;

use lconet::pipeline::generate_cohort;
use lconet::roi::{
    detect_roi, first_harmonic, first_harmonic_map, hough_circle, locate_lv, saliency_pgm, HoughConfig, RoiBox,
    CROP_SIZE,
};
use lconet::volume::{CineVolume, Geometry};
use lconet::Error;
use proptest::prelude::*;

/// `[T, 1, H, W]` cine whose every pixel follows `f(t, y, x)`.
fn cine(t_len: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> CineVolume {
    let mut data = Vec::with_capacity(t_len * h * w);
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                data.push(f(t, y, x));
            }
        }
    }
    CineVolume::new([t_len, 1, h, w], data, Geometry::default()).unwrap()
}

/// Annulus of the given radius and half-width drawn at `value`.
fn ring(h: usize, w: usize, rings: &[([f64; 2], f64, f64)]) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for &([cx, cy], r, value) in rings {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                if (d - r).abs() <= 1.5 {
                    img[y * w + x] = value;
                }
            }
        }
    }
    img
}

#[test]
fn harmonic_closed_form() {
    let series: Vec<f64> = (0..16).map(|t| 5.0 + 2.0 * (2.0 * PI * t as f64 / 16.0).cos()).collect();
    assert!((first_harmonic(&series) - 16.0).abs() < 1e-9);

    // A phase shift does not change the magnitude A*T/2.
    let shifted: Vec<f64> = (0..20).map(|t| -1.0 + 3.0 * (2.0 * PI * t as f64 / 20.0 + 0.7).sin()).collect();
    assert!((first_harmonic(&shifted) - 30.0).abs() < 1e-9);

    let bin2: Vec<f64> = (0..16).map(|t| (4.0 * PI * t as f64 / 16.0).cos()).collect();
    assert!(first_harmonic(&bin2).abs() < 1e-9);
}

#[test]
fn harmonic_map_examples() {
    let still = cine(8, 4, 4, |_, y, x| (y * 4 + x) as f32);
    let m = first_harmonic_map(&still).unwrap();
    assert!(m.summed.iter().all(|&v| v.abs() < 1e-9));

    let beating = cine(16, 2, 2, |t, _, _| 5.0 + 2.0 * (2.0 * PI * t as f64 / 16.0).cos() as f32);
    let m = first_harmonic_map(&beating).unwrap();
    assert!(m.summed.iter().all(|&v| (v - 16.0).abs() < 1e-4));

    let single = cine(1, 2, 2, |_, _, _| 0.0);
    assert!(matches!(first_harmonic_map(&single), Err(Error::Argument(_))));
}

#[test]
fn bright_ring_is_found() {
    let img = ring(128, 128, &[([64.0, 64.0], 20.0, 1.0)]);
    let c = hough_circle(&img, 128, 128, &HoughConfig::default()).unwrap();
    assert!((c.cx - 64.0).abs() <= 2.0 && (c.cy - 64.0).abs() <= 2.0, "{c:?}");
    assert!((c.radius - 20.0).abs() <= 2.0, "{c:?}");
}

#[test]
fn stronger_ring_wins() {
    let img = ring(128, 128, &[([36.0, 40.0], 15.0, 2.0), ([90.0, 88.0], 15.0, 1.0)]);
    let c = hough_circle(&img, 128, 128, &HoughConfig::default()).unwrap();
    assert!((c.cx - 36.0).abs() <= 2.0 && (c.cy - 40.0).abs() <= 2.0, "{c:?}");

    let swapped = ring(128, 128, &[([36.0, 40.0], 15.0, 1.0), ([90.0, 88.0], 15.0, 2.0)]);
    let c = hough_circle(&swapped, 128, 128, &HoughConfig::default()).unwrap();
    assert!((c.cx - 90.0).abs() <= 2.0 && (c.cy - 88.0).abs() <= 2.0, "{c:?}");
}

#[test]
fn uniform_image_has_no_circle() {
    let img = vec![0.5; 128 * 128];
    assert!(matches!(
        hough_circle(&img, 128, 128, &HoughConfig::default()),
        Err(Error::Detection(_))
    ));
}

#[test]
fn bad_radius_band_is_rejected() {
    let img = vec![0.0; 64 * 64];
    let cfg = HoughConfig {
        r_min: 10,
        r_max: 40,
        ..HoughConfig::default()
    };
    assert!(matches!(hough_circle(&img, 64, 64, &cfg), Err(Error::Argument(_))));
}

#[test]
fn static_volume_falls_back_to_centre() {
    let vol = cine(4, 100, 120, |_, y, x| ((x + y) % 7) as f32);
    let d = detect_roi(&vol, &HoughConfig::default()).unwrap();
    assert!(d.fallback);
    assert_eq!(d.roi.center, [60.0, 50.0]);
    assert!(d.roi.padded);
}

#[test]
fn crop_window_examples() {
    let b = RoiBox::around([128.0, 128.0], 10.0, 256, 256, CROP_SIZE);
    assert_eq!(b.crop_corner, [64, 64]);
    assert!(!b.padded);

    let b = RoiBox::around([5.0, 5.0], 10.0, 256, 256, CROP_SIZE);
    assert_eq!(b.crop_corner, [0, 0]);

    let b = RoiBox::around([250.0, 3.0], 10.0, 256, 200, CROP_SIZE);
    assert_eq!(b.crop_corner, [200 - 128, 0]);

    // A 100x100 image is padded symmetrically to 128.
    let b = RoiBox::around([50.0, 50.0], 10.0, 100, 100, CROP_SIZE);
    assert!(b.padded);
    assert_eq!(b.crop_corner, [-14, -14]);
    let img: Vec<u16> = (0..100 * 100).map(|i| i as u16 + 1).collect();
    let crop = b.crop(&img, 100, 100);
    assert_eq!(crop[0], 0);
    assert_eq!(crop[14 * 128 + 14], 1);
    let mut back = vec![0u16; 100 * 100];
    b.paste(&crop, &mut back, 100, 100);
    assert_eq!(back, img);
}

#[test]
fn phantom_lv_is_located() {
    // Truth radius is the basal LV radius halfway between ED and ES, where
    // the wall's first harmonic peaks.
    let subjects = generate_cohort(20, 7).unwrap();
    let mut hits = 0;
    for s in &subjects {
        let t = s.truth.as_ref().unwrap();
        let d = detect_roi(&s.cine, &HoughConfig::default()).unwrap();
        let r_truth = 0.5 * (t.lv_radius_ed + t.lv_radius_es);
        let centre_err = (d.roi.center[0] - t.lv_center[0]).hypot(d.roi.center[1] - t.lv_center[1]);
        if !d.fallback && centre_err <= 3.0 && (d.roi.radius - r_truth).abs() <= 3.0 {
            hits += 1;
        }
    }
    assert!(hits >= 19, "{hits}/20 located");
}

#[test]
fn saliency_dump_is_a_pgm() {
    let s = &generate_cohort(1, 3).unwrap()[0];
    let map = first_harmonic_map(&s.cine).unwrap();
    let pgm = saliency_pgm(&map);
    let header = format!("P5\n{} {}\n255\n", map.width, map.height);
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + map.width * map.height);
    assert!(locate_lv(&map, &HoughConfig::default()).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn harmonic_ignores_offset_and_scales_linearly(
        series in prop::collection::vec(-10.0f64..10.0, 2..32),
        offset in -50.0f64..50.0,
        gain in 0.1f64..10.0,
    ) {
        let base = first_harmonic(&series);
        let moved: Vec<f64> = series.iter().map(|v| v + offset).collect();
        prop_assert!((first_harmonic(&moved) - base).abs() < 1e-8 * (1.0 + offset.abs() * series.len() as f64));
        let scaled: Vec<f64> = series.iter().map(|v| v * gain).collect();
        prop_assert!((first_harmonic(&scaled) - gain * base).abs() < 1e-8 * (1.0 + gain * base));
    }

    #[test]
    fn ring_detection_is_translation_covariant(dx in -20i32..20, dy in -20i32..20) {
        let cfg = HoughConfig::default();
        let a = hough_circle(&ring(128, 128, &[([64.0, 64.0], 18.0, 1.0)]), 128, 128, &cfg).unwrap();
        let c = [64.0 + dx as f64, 64.0 + dy as f64];
        let b = hough_circle(&ring(128, 128, &[(c, 18.0, 1.0)]), 128, 128, &cfg).unwrap();
        prop_assert!((b.cx - a.cx - dx as f64).abs() <= 1.0);
        prop_assert!((b.cy - a.cy - dy as f64).abs() <= 1.0);
        prop_assert!((b.radius - a.radius).abs() <= 1.0);
    }

    #[test]
    fn crop_then_paste_restores_the_window(
        h in 20usize..90,
        w in 20usize..90,
        cx in 0.0f64..90.0,
        cy in 0.0f64..90.0,
        size in 8usize..64,
    ) {
        let b = RoiBox::around([cx, cy], 5.0, h, w, size);
        let img: Vec<u32> = (0..h * w).map(|i| i as u32 * 3 + 1).collect();
        let crop = b.crop(&img, h, w);
        prop_assert_eq!(crop.len(), size * size);
        let mut back = vec![0u32; h * w];
        b.paste(&crop, &mut back, h, w);
        for y in 0..h {
            for x in 0..w {
                let inside = (x as i64) >= b.crop_corner[0]
                    && (x as i64) < b.crop_corner[0] + size as i64
                    && (y as i64) >= b.crop_corner[1]
                    && (y as i64) < b.crop_corner[1] + size as i64;
                let want = if inside { img[y * w + x] } else { 0 };
                prop_assert_eq!(back[y * w + x], want);
            }
        }
        if h >= size && w >= size {
            prop_assert!(!b.padded);
            prop_assert!(b.crop_corner[0] >= 0 && b.crop_corner[0] as usize + size <= w);
            prop_assert!(b.crop_corner[1] >= 0 && b.crop_corner[1] as usize + size <= h);
        }
    }
}
