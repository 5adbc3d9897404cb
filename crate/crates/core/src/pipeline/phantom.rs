//! Synthetic short-axis cine phantoms with exact ground truth.
//!
//! Each slice shows a disk (LV blood pool) inside an annulus (myocardium)
//! with a crescent (RV) on one side, inside a static body outline. The LV
//! radius follows `r(t) = r_es + (r_ed - r_es) (1 + cos(2 pi t / T)) / 2`,
//! so ED is frame 0 and ES is frame `T / 2`. Myocardial area is conserved
//! through the cycle. Disks are rasterized as the `round(pi r^2)` pixels
//! nearest the centre, so pixel counts match the analytic areas.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clinical::MYO_DENSITY_G_PER_ML;
use crate::error::{Error, Result};
use crate::volume::{CineVolume, Geometry, MaskVolume, LABEL_LV, LABEL_MYO, LABEL_RV};

use super::Subject;

pub const INTENSITY_AIR: f32 = 0.02;
pub const INTENSITY_BODY: f32 = 0.18;
pub const INTENSITY_MYO: f32 = 0.38;
pub const INTENSITY_LV: f32 = 1.0;
pub const INTENSITY_RV: f32 = 0.85;

/// Pathology bins, each with its own size and function ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathologyGroup {
    Nor,
    Minf,
    Dcm,
    Hcm,
    Arv,
}

impl PathologyGroup {
    pub const ALL: [PathologyGroup; 5] = [
        PathologyGroup::Nor,
        PathologyGroup::Minf,
        PathologyGroup::Dcm,
        PathologyGroup::Hcm,
        PathologyGroup::Arv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PathologyGroup::Nor => "NOR",
            PathologyGroup::Minf => "MINF",
            PathologyGroup::Dcm => "DCM",
            PathologyGroup::Hcm => "HCM",
            PathologyGroup::Arv => "ARV",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub frames: usize,
    pub slices: usize,
    pub spacing_mm: f64,
    pub slice_thickness_mm: f64,
    pub slice_gap_mm: f64,
    /// Basal LV blood-pool radius at ED, pixels.
    pub lv_radius_px: [f64; 2],
    pub myo_thickness_px: [f64; 2],
    /// Radius of the disk the RV crescent is cut from, pixels.
    pub rv_radius_px: [f64; 2],
    /// LV ejection fraction range in `[0, 1)`; sets the contraction amplitude.
    pub lv_ef: [f64; 2],
    pub rv_ef: [f64; 2],
    /// Apical radius as a fraction of the basal radius.
    pub apex_taper: f64,
    pub noise_std: f64,
    pub group: PathologyGroup,
}

impl PhantomSpec {
    pub fn for_group(group: PathologyGroup) -> Self {
        let base = PhantomSpec {
            image_size: 160,
            frames: 16,
            slices: 8,
            spacing_mm: 1.5,
            slice_thickness_mm: 8.0,
            slice_gap_mm: 2.0,
            lv_radius_px: [15.0, 18.0],
            myo_thickness_px: [5.0, 6.5],
            rv_radius_px: [15.0, 18.0],
            lv_ef: [0.55, 0.68],
            rv_ef: [0.50, 0.60],
            apex_taper: 0.45,
            noise_std: 0.04,
            group,
        };
        match group {
            PathologyGroup::Nor => base,
            PathologyGroup::Minf => PhantomSpec {
                lv_radius_px: [18.0, 21.0],
                myo_thickness_px: [4.5, 6.0],
                lv_ef: [0.25, 0.42],
                rv_ef: [0.45, 0.55],
                ..base
            },
            PathologyGroup::Dcm => PhantomSpec {
                lv_radius_px: [21.0, 24.0],
                myo_thickness_px: [3.5, 4.5],
                lv_ef: [0.10, 0.25],
                rv_ef: [0.35, 0.50],
                ..base
            },
            PathologyGroup::Hcm => PhantomSpec {
                lv_radius_px: [12.0, 15.0],
                myo_thickness_px: [7.5, 9.5],
                lv_ef: [0.68, 0.80],
                rv_ef: [0.55, 0.65],
                ..base
            },
            PathologyGroup::Arv => PhantomSpec {
                rv_radius_px: [18.0, 21.0],
                lv_ef: [0.50, 0.62],
                rv_ef: [0.20, 0.40],
                ..base
            },
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            spacing_mm: [self.spacing_mm, self.spacing_mm],
            slice_thickness_mm: self.slice_thickness_mm,
            slice_gap_mm: self.slice_gap_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 < r[0] && r[0] <= r[1];
        if self.frames < 2 {
            v.push("frames must be at least 2".to_string());
        }
        if self.slices == 0 || self.image_size == 0 {
            v.push("slices and image_size must be positive".to_string());
        }
        for (name, r) in [
            ("lv_radius_px", self.lv_radius_px),
            ("myo_thickness_px", self.myo_thickness_px),
            ("rv_radius_px", self.rv_radius_px),
        ] {
            if !range_ok(r) {
                v.push(format!("{name} {r:?} is not a positive range"));
            }
        }
        for (name, r) in [("lv_ef", self.lv_ef), ("rv_ef", self.rv_ef)] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] < 1.0) {
                v.push(format!("{name} {r:?} must lie in [0, 1)"));
            }
        }
        if !(self.apex_taper > 0.0 && self.apex_taper <= 1.0) {
            v.push(format!("apex_taper {} outside (0, 1]", self.apex_taper));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            v.push(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if let Err(e) = self.geometry().validate() {
            v.push(e.to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Closed-form quantities of a generated subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    /// LV centre `(x, y)` in pixels.
    pub lv_center: [f64; 2],
    /// Basal LV blood-pool radius at ED and ES, pixels.
    pub lv_radius_ed: f64,
    pub lv_radius_es: f64,
    pub lv_edv_ml: f64,
    pub lv_esv_ml: f64,
    pub ef_percent: f64,
    pub myo_mass_g: f64,
}

/// Indices of the `round(pi r^2)` pixels nearest `(cx, cy)`.
pub fn raster_disk(cx: f64, cy: f64, r: f64, h: usize, w: usize) -> Vec<usize> {
    let n = (PI * r * r).round() as usize;
    if n == 0 {
        return Vec::new();
    }
    let reach = r.ceil() as i64 + 2;
    let (x0, y0) = (cx.floor() as i64, cy.floor() as i64);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for y in (y0 - reach).max(0)..=(y0 + reach + 1).min(h as i64 - 1) {
        for x in (x0 - reach).max(0)..=(x0 + reach + 1).min(w as i64 - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            cand.push((dx * dx + dy * dy, y as usize * w + x as usize));
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(n).map(|(_, i)| i).collect()
}

struct Drawn {
    lv_center: [f64; 2],
    r_ed: f64,
    r_es: f64,
    wall: f64,
    rv_dir: [f64; 2],
    rv_r_ed: f64,
    rv_r_es: f64,
    blobs: Vec<([f64; 2], f64, f32)>,
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl PhantomSpec {
    fn taper(&self, z: usize) -> f64 {
        if self.slices == 1 {
            return 1.0;
        }
        let f = z as f64 / (self.slices - 1) as f64;
        1.0 - (1.0 - self.apex_taper) * f * f
    }

    /// Phase weight in `[0, 1]`: 1 at ED, 0 at ES.
    fn phase(&self, t: usize) -> f64 {
        0.5 * (1.0 + (2.0 * PI * t as f64 / self.frames as f64).cos())
    }

    fn rv_present(&self, z: usize) -> bool {
        4 * z < 3 * self.slices
    }

    /// LV radius, outer myocardial radius and RV disk radius at `(t, z)`.
    fn radii(&self, d: &Drawn, t: usize, z: usize) -> (f64, f64, f64) {
        let s = self.taper(z);
        let ph = self.phase(t);
        let r_ed = d.r_ed * s;
        let r = (d.r_es + (d.r_ed - d.r_es) * ph) * s;
        let wall = d.wall * (0.8 + 0.2 * s);
        let outer = (r * r + (r_ed + wall).powi(2) - r_ed * r_ed).sqrt();
        let rv = (d.rv_r_es + (d.rv_r_ed - d.rv_r_es) * ph) * s;
        (r, outer, rv)
    }

    fn rv_center(&self, d: &Drawn, outer: f64, rv: f64) -> [f64; 2] {
        let dist = outer + 0.4 * rv;
        [d.lv_center[0] + d.rv_dir[0] * dist, d.lv_center[1] + d.rv_dir[1] * dist]
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Result<Drawn> {
        let r_ed = uniform(rng, self.lv_radius_px);
        let wall = uniform(rng, self.myo_thickness_px);
        let rv_r_ed = uniform(rng, self.rv_radius_px);
        let ef = uniform(rng, self.lv_ef);
        let rv_ef = uniform(rng, self.rv_ef);
        let angle = PI + rng.random_range(-0.45..0.45);
        let rv_dir = [angle.cos(), angle.sin()];

        // Heart extent from the LV centre along +-x and +-y at ED.
        let outer = r_ed + wall;
        let rv_far = outer + 1.4 * rv_r_ed;
        // Reach of the LV annulus and RV disk along a unit axis whose dot
        // product with the RV direction is `u`.
        let ext = |u: f64| outer.max((outer + 0.4 * rv_r_ed) * u + rv_r_ed);
        let (left, right) = (ext(-rv_dir[0]), ext(rv_dir[0]));
        let (up, down) = (ext(-rv_dir[1]), ext(rv_dir[1]));
        let size = self.image_size as f64;
        let margin = 3.0;
        let (lo_x, hi_x) = (left + margin, size - 1.0 - right - margin);
        let (lo_y, hi_y) = (up + margin, size - 1.0 - down - margin);
        if lo_x > hi_x || lo_y > hi_y {
            return Err(Error::Config(vec![format!(
                "heart of extent {:.1} px does not fit a {} px image",
                left + right,
                self.image_size
            )]));
        }
        let lv_center = [uniform(rng, [lo_x, hi_x]), uniform(rng, [lo_y, hi_y])];

        let mut blobs = Vec::new();
        for _ in 0..3 {
            let rb = rng.random_range(6.0..12.0);
            let c = [rng.random_range(rb..size - rb), rng.random_range(rb..size - rb)];
            let clear = rv_far + rb + 4.0;
            let intensity = rng.random_range(0.3f32..0.6);
            if (c[0] - lv_center[0]).hypot(c[1] - lv_center[1]) > clear {
                blobs.push((c, rb, intensity));
            }
        }
        Ok(Drawn {
            lv_center,
            r_ed,
            r_es: r_ed * (1.0 - ef).sqrt(),
            wall,
            rv_dir,
            rv_r_ed,
            rv_r_es: rv_r_ed * (1.0 - rv_ef).sqrt(),
            blobs,
        })
    }

    fn labels(&self, d: &Drawn, t: usize, z: usize) -> Vec<u8> {
        let n = self.image_size;
        let mut lab = vec![0u8; n * n];
        let (r, outer, rv) = self.radii(d, t, z);
        let [cx, cy] = d.lv_center;
        let outer_px = raster_disk(cx, cy, outer, n, n);
        if self.rv_present(z) {
            let c = self.rv_center(d, outer, rv);
            for i in raster_disk(c[0], c[1], rv, n, n) {
                lab[i] = LABEL_RV;
            }
        }
        for &i in &outer_px {
            lab[i] = LABEL_MYO;
        }
        for i in raster_disk(cx, cy, r, n, n) {
            lab[i] = LABEL_LV;
        }
        lab
    }

    fn background(&self, d: &Drawn) -> Vec<f32> {
        let n = self.image_size;
        let c = (n as f64 - 1.0) / 2.0;
        let (ax, ay) = (0.47 * n as f64, 0.42 * n as f64);
        let mut img = vec![INTENSITY_AIR; n * n];
        for y in 0..n {
            for x in 0..n {
                let (u, v) = ((x as f64 - c) / ax, (y as f64 - c) / ay);
                if u * u + v * v <= 1.0 {
                    img[y * n + x] = INTENSITY_BODY;
                }
            }
        }
        for &(bc, rb, val) in &d.blobs {
            for i in raster_disk(bc[0], bc[1], rb, n, n) {
                img[i] = val;
            }
        }
        img
    }
}

fn intensity(label: u8, background: f32) -> f32 {
    match label {
        LABEL_LV => INTENSITY_LV,
        LABEL_RV => INTENSITY_RV,
        LABEL_MYO => INTENSITY_MYO,
        _ => background,
    }
}

/// One subject: cine, ED/ES masks and the closed-form indices.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64, id: &str) -> Result<Subject> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.draw(&mut rng)?;
    let n = spec.image_size;
    let (t_len, z_len) = (spec.frames, spec.slices);
    let geom = spec.geometry();
    let bg = spec.background(&d);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");

    let mut cine = Vec::with_capacity(t_len * z_len * n * n);
    let mut ed = Vec::with_capacity(z_len * n * n);
    let mut es = Vec::with_capacity(z_len * n * n);
    let es_frame = t_len / 2;
    for t in 0..t_len {
        for z in 0..z_len {
            let lab = spec.labels(&d, t, z);
            cine.extend(lab.iter().zip(&bg).map(|(&l, &b)| {
                let e: f64 = noise.sample(&mut rng);
                intensity(l, b) + e as f32
            }));
            if t == 0 {
                ed.extend_from_slice(&lab);
            }
            if t == es_frame {
                es.extend_from_slice(&lab);
            }
        }
    }

    let voxel_ml = geom.voxel_mm3() / 1000.0;
    let (mut edv, mut esv, mut myo) = (0.0, 0.0, 0.0);
    for z in 0..z_len {
        let (r_ed, outer_ed, _) = spec.radii(&d, 0, z);
        let (r_es, _, _) = spec.radii(&d, es_frame, z);
        edv += PI * r_ed * r_ed * voxel_ml;
        esv += PI * r_es * r_es * voxel_ml;
        myo += PI * (outer_ed * outer_ed - r_ed * r_ed) * voxel_ml;
    }
    let truth = PhantomTruth {
        lv_center: d.lv_center,
        lv_radius_ed: d.r_ed,
        lv_radius_es: d.r_es,
        lv_edv_ml: edv,
        lv_esv_ml: esv,
        ef_percent: 100.0 * (edv - esv) / edv,
        myo_mass_g: myo * MYO_DENSITY_G_PER_ML,
    };
    let names = MaskVolume::standard_label_names();
    Ok(Subject {
        id: id.to_string(),
        group: spec.group.name().to_string(),
        cine: CineVolume::new([t_len, z_len, n, n], cine, geom.clone())?,
        ed: MaskVolume::new([1, z_len, n, n], ed, geom.clone())?.with_label_names(names.clone()),
        es: MaskVolume::new([1, z_len, n, n], es, geom)?.with_label_names(names),
        ed_frame: 0,
        es_frame,
        truth: Some(truth),
    })
}

/// `count` subjects cycling through the five groups, each with its own
/// seed derived from `seed`.
pub fn generate_cohort(count: usize, seed: u64) -> Result<Vec<Subject>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let group = PathologyGroup::ALL[i % PathologyGroup::ALL.len()];
            let sub_seed: u64 = master.random();
            generate_phantom(&PhantomSpec::for_group(group), sub_seed, &format!("subject{i:03}"))
        })
        .collect()
}
