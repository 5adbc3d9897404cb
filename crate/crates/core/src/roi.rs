//! Heart localization in a cine volume.
//!
//! The beating heart is the only large structure that moves at the cardiac
//! frequency, so the magnitude of the first temporal DFT bin highlights it.
//! A circle Hough transform on the edges of that saliency image finds the
//! LV centre, the ridge of the moving LV wall gives its radius, and a
//! fixed-size window around it is cropped for segmentation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CineVolume, Volume};

/// Side length of the segmentation window.
pub const CROP_SIZE: usize = 128;

/// First-harmonic magnitude per slice, plus their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicMap {
    pub height: usize,
    pub width: usize,
    pub per_slice: Vec<Vec<f64>>,
    pub summed: Vec<f64>,
}

/// `|X_1|` of a real series: `|sum_t x_t exp(-2 pi i t / T)|`.
pub fn first_harmonic(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, &x) in series.iter().enumerate() {
        let a = 2.0 * PI * t as f64 / n;
        re += x * a.cos();
        im -= x * a.sin();
    }
    re.hypot(im)
}

pub fn first_harmonic_map(vol: &CineVolume) -> Result<HarmonicMap> {
    let [t_len, z_len, h, w] = vol.dims();
    if t_len < 2 {
        return Err(Error::Argument(format!("first harmonic needs at least 2 frames, got {t_len}")));
    }
    let basis: Vec<(f64, f64)> = (0..t_len)
        .map(|t| {
            let a = 2.0 * PI * t as f64 / t_len as f64;
            (a.cos(), -a.sin())
        })
        .collect();
    let mut per_slice = Vec::with_capacity(z_len);
    let mut summed = vec![0.0; h * w];
    for z in 0..z_len {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for (t, &(c, s)) in basis.iter().enumerate() {
            for ((r, i), &x) in re.iter_mut().zip(&mut im).zip(vol.slice(t, z)) {
                *r += x as f64 * c;
                *i += x as f64 * s;
            }
        }
        let mag: Vec<f64> = re.iter().zip(&im).map(|(r, i)| r.hypot(*i)).collect();
        for (s, &m) in summed.iter_mut().zip(&mag) {
            *s += m;
        }
        per_slice.push(mag);
    }
    Ok(HarmonicMap {
        height: h,
        width: w,
        per_slice,
        summed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoughConfig {
    pub r_min: usize,
    pub r_max: usize,
    /// Edge pixels are those whose gradient magnitude exceeds this quantile.
    pub edge_quantile: f64,
}

impl Default for HoughConfig {
    fn default() -> Self {
        HoughConfig {
            r_min: 8,
            r_max: 40,
            edge_quantile: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub score: f64,
}

/// Central-difference gradient `(gx, gy)` of an image; zero on the border.
pub fn gradient(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            gx[i] = 0.5 * (img[i + 1] - img[i - 1]);
            gy[i] = 0.5 * (img[i + w] - img[i - w]);
        }
    }
    (gx, gy)
}

fn check_band(cfg: &HoughConfig, h: usize, w: usize) -> Result<()> {
    if !(cfg.r_min < cfg.r_max && cfg.r_max < h.min(w) / 2) {
        return Err(Error::Argument(format!(
            "radius band [{}, {}] must satisfy r_min < r_max < {}",
            cfg.r_min,
            cfg.r_max,
            h.min(w) / 2
        )));
    }
    if !(0.0..1.0).contains(&cfg.edge_quantile) {
        return Err(Error::Argument(format!("edge quantile {} outside [0, 1)", cfg.edge_quantile)));
    }
    Ok(())
}

struct Edge {
    x: f64,
    y: f64,
    ux: f64,
    uy: f64,
    mag: f64,
}

impl Edge {
    /// Pixel index `dist` away along the gradient, if inside the image.
    fn target(&self, dist: f64, h: usize, w: usize) -> Option<usize> {
        let cx = (self.x + dist * self.ux).round();
        let cy = (self.y + dist * self.uy).round();
        (cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64).then(|| cy as usize * w + cx as usize)
    }
}

/// Pixels whose gradient magnitude exceeds the configured quantile.
fn edge_pixels(img: &[f64], h: usize, w: usize, cfg: &HoughConfig) -> Vec<Edge> {
    let (gx, gy) = gradient(img, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((sorted.len() - 1) as f64 * cfg.edge_quantile).floor() as usize];
    (0..mag.len())
        .filter(|&i| mag[i] > threshold && mag[i] > 0.0)
        .map(|i| Edge {
            x: (i % w) as f64,
            y: (i / w) as f64,
            ux: gx[i] / mag[i],
            uy: gy[i] / mag[i],
            mag: mag[i],
        })
        .collect()
}

/// Centre accumulator of a circle Hough transform over several images,
/// marginalized over radius. Each edge pixel votes with its gradient
/// magnitude at every distance in `[r_min, r_max]` along both directions
/// of its gradient, so concentric circles in all images reinforce one
/// centre. Returns the smoothed peak `(cx, cy)` and its vote mass.
pub fn hough_center(images: &[&[f64]], h: usize, w: usize, cfg: &HoughConfig) -> Result<([f64; 2], f64)> {
    check_band(cfg, h, w)?;
    let mut acc = vec![0.0f64; h * w];
    let mut any_edge = false;
    for img in images {
        if img.len() != h * w {
            return Err(Error::dim("hough_center", format!("image has {} pixels, expected {}", img.len(), h * w)));
        }
        for e in edge_pixels(img, h, w, cfg) {
            any_edge = true;
            for r in cfg.r_min..=cfg.r_max {
                for sign in [-1.0, 1.0] {
                    if let Some(c) = e.target(sign * r as f64, h, w) {
                        acc[c] += e.mag;
                    }
                }
            }
        }
    }
    if !any_edge {
        return Err(Error::Detection("saliency image has no edges".into()));
    }
    // 3x3 box sum absorbs the rounding scatter of the votes.
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut v = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    v += acc[(y + dy - 1) * w + x + dx - 1];
                }
            }
            if v > best.0 {
                best = (v, x, y);
            }
        }
    }
    let (score, bx, by) = best;
    let (mut sx, mut sy) = (0.0, 0.0);
    for dy in 0..3 {
        for dx in 0..3 {
            let (x, y) = (bx + dx - 1, by + dy - 1);
            let v = acc[y * w + x];
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    if score <= 0.0 {
        return Err(Error::Detection("no circle centre received votes".into()));
    }
    Ok(([sx / score, sy / score], score))
}

fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

const RAYS: usize = 64;
const RADIAL_STEP: f64 = 0.25;

/// Radius of the brightest ring around `center`: the peak of the radial
/// profile, where each radius takes the median over 64 rays so structures
/// covering less than half the circle are ignored. Returns `(radius, peak)`.
pub fn ridge_radius(img: &[f64], h: usize, w: usize, center: [f64; 2], cfg: &HoughConfig) -> Result<(f64, f64)> {
    check_band(cfg, h, w)?;
    if img.len() != h * w {
        return Err(Error::dim("ridge_radius", format!("image has {} pixels, expected {}", img.len(), h * w)));
    }
    let steps = ((cfg.r_max - cfg.r_min) as f64 / RADIAL_STEP).round() as usize;
    let mut profile = Vec::with_capacity(steps + 1);
    let mut samples = Vec::with_capacity(RAYS);
    for k in 0..=steps {
        let r = cfg.r_min as f64 + k as f64 * RADIAL_STEP;
        samples.clear();
        for a in 0..RAYS {
            let th = 2.0 * PI * a as f64 / RAYS as f64;
            if let Some(v) = bilinear(img, h, w, center[0] + r * th.cos(), center[1] + r * th.sin()) {
                samples.push(v);
            }
        }
        if samples.len() * 2 < RAYS {
            profile.push(f64::NEG_INFINITY);
            continue;
        }
        samples.sort_by(f64::total_cmp);
        profile.push(samples[samples.len() / 2]);
    }
    let (k, &peak) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .ok_or_else(|| Error::Detection("empty radial profile".into()))?;
    if !(peak > 0.0) {
        return Err(Error::Detection("no ring around the detected centre".into()));
    }
    // Parabolic refinement between neighbouring samples.
    let mut offset = 0.0;
    if k > 0 && k < steps {
        let (a, c) = (profile[k - 1], profile[k + 1]);
        let denom = a - 2.0 * peak + c;
        if a.is_finite() && c.is_finite() && denom < 0.0 {
            offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    Ok((cfg.r_min as f64 + (k as f64 + offset) * RADIAL_STEP, peak))
}

/// Circle Hough transform. Every edge pixel votes, weighted by its gradient
/// magnitude, for the centres one radius away along both directions of its
/// gradient; the best `(cx, cy, r)` cell wins.
pub fn hough_circle(img: &[f64], h: usize, w: usize, cfg: &HoughConfig) -> Result<Circle> {
    check_band(cfg, h, w)?;
    if img.len() != h * w {
        return Err(Error::dim("hough_circle", format!("image has {} pixels, expected {}", img.len(), h * w)));
    }
    let edges = edge_pixels(img, h, w, cfg);
    if edges.is_empty() {
        return Err(Error::Detection("saliency image has no edges".into()));
    }
    let radii = cfg.r_max - cfg.r_min + 1;
    let mut acc = vec![0.0f64; radii * h * w];
    for e in &edges {
        for ri in 0..radii {
            let r = (cfg.r_min + ri) as f64;
            for sign in [-1.0, 1.0] {
                if let Some(c) = e.target(sign * r, h, w) {
                    acc[ri * h * w + c] += e.mag;
                }
            }
        }
    }
    // Normalize by circumference so small circles are not penalized for
    // having fewer boundary pixels to vote.
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (j, &v) in acc.iter().enumerate() {
        let s = v / (cfg.r_min + j / (h * w)) as f64;
        if s > best.0 {
            best = (s, j);
        }
    }
    let (score, j) = best;
    let rest = j % (h * w);
    Ok(Circle {
        cx: (rest % w) as f64,
        cy: (rest / w) as f64,
        radius: (cfg.r_min + j / (h * w)) as f64,
        score,
    })
}

/// Locates the LV in a harmonic map: one centre for the whole stack, and
/// the largest ridge radius among slices whose ring is at least half as
/// strong as the strongest.
pub fn locate_lv(map: &HarmonicMap, cfg: &HoughConfig) -> Result<Circle> {
    let (h, w) = (map.height, map.width);
    let images: Vec<&[f64]> = map.per_slice.iter().map(Vec::as_slice).collect();
    let (c, score) = hough_center(&images, h, w, cfg)?;
    let mut rings = Vec::with_capacity(images.len());
    for img in &images {
        match ridge_radius(img, h, w, c, cfg) {
            Ok(r) => rings.push(r),
            Err(Error::Detection(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let strongest = rings.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let radius = rings
        .iter()
        .filter(|r| r.1 >= 0.5 * strongest)
        .map(|r| r.0)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
        .ok_or_else(|| Error::Detection("no ring around the detected centre".into()))?;
    Ok(Circle {
        cx: c[0],
        cy: c[1],
        radius,
        score,
    })
}

/// Fixed-size crop window in original image coordinates. The corner may be
/// negative when the image is smaller than the window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub center: [f64; 2],
    pub radius: f64,
    /// `(x0, y0)` of the window's top-left pixel.
    pub crop_corner: [i64; 2],
    pub size: usize,
    /// The image was smaller than the window and the crop is zero-padded.
    pub padded: bool,
}

fn window_start(center: f64, extent: usize, size: usize) -> (i64, bool) {
    if extent < size {
        return (-(((size - extent) / 2) as i64), true);
    }
    let start = center.round() as i64 - (size / 2) as i64;
    (start.clamp(0, (extent - size) as i64), false)
}

impl RoiBox {
    /// Window of side `size` centred on `center = (cx, cy)`, clamped into an
    /// `h × w` image.
    pub fn around(center: [f64; 2], radius: f64, h: usize, w: usize, size: usize) -> RoiBox {
        let (x0, px) = window_start(center[0], w, size);
        let (y0, py) = window_start(center[1], h, size);
        RoiBox {
            center,
            radius,
            crop_corner: [x0, y0],
            size,
            padded: px || py,
        }
    }

    /// Copies the window out of an `h × w` image; outside pixels are zero.
    pub fn crop<V: Copy + Default>(&self, img: &[V], h: usize, w: usize) -> Vec<V> {
        let s = self.size;
        let mut out = vec![V::default(); s * s];
        for i in 0..s {
            let y = self.crop_corner[1] + i as i64;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for j in 0..s {
                let x = self.crop_corner[0] + j as i64;
                if x >= 0 && x < w as i64 {
                    out[i * s + j] = img[y as usize * w + x as usize];
                }
            }
        }
        out
    }

    /// Writes a cropped image back into `dst` (an `h × w` image); pixels
    /// outside the window are left alone.
    pub fn paste<V: Copy>(&self, crop: &[V], dst: &mut [V], h: usize, w: usize) {
        let s = self.size;
        for i in 0..s {
            let y = self.crop_corner[1] + i as i64;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for j in 0..s {
                let x = self.crop_corner[0] + j as i64;
                if x >= 0 && x < w as i64 {
                    dst[y as usize * w + x as usize] = crop[i * s + j];
                }
            }
        }
    }

    pub fn crop_volume<V: crate::volume::Voxel>(&self, vol: &Volume<V>) -> Result<Volume<V>> {
        let [t_len, z_len, h, w] = vol.dims();
        let mut data = Vec::with_capacity(t_len * z_len * self.size * self.size);
        for t in 0..t_len {
            for z in 0..z_len {
                data.extend(self.crop(vol.slice(t, z), h, w));
            }
        }
        Ok(Volume::new([t_len, z_len, self.size, self.size], data, vol.geometry().clone())?
            .with_label_names(vol.label_names().to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiDetection {
    pub roi: RoiBox,
    /// Detection failed and the window sits at the image centre.
    pub fallback: bool,
}

impl RoiDetection {
    /// Same centre, window of side `size` in an `h × w` image.
    pub fn resized(&self, size: usize, h: usize, w: usize) -> RoiDetection {
        RoiDetection {
            roi: RoiBox::around(self.roi.center, self.roi.radius, h, w, size),
            fallback: self.fallback,
        }
    }
}

/// Harmonic saliency, [`locate_lv`], then a [`CROP_SIZE`] window. Falls back
/// to the image centre when no circle is found.
pub fn detect_roi(vol: &CineVolume, cfg: &HoughConfig) -> Result<RoiDetection> {
    let map = first_harmonic_map(vol)?;
    let (h, w) = (map.height, map.width);
    match locate_lv(&map, cfg) {
        Ok(c) => Ok(RoiDetection {
            roi: RoiBox::around([c.cx, c.cy], c.radius, h, w, CROP_SIZE),
            fallback: false,
        }),
        Err(Error::Detection(msg)) => {
            log::warn!("ROI detection failed ({msg}); using the image centre");
            let center = [(w / 2) as f64, (h / 2) as f64];
            Ok(RoiDetection {
                roi: RoiBox::around(center, 0.0, h, w, CROP_SIZE),
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Saliency image as 8-bit binary PGM, scaled to its maximum.
pub fn saliency_pgm(map: &HarmonicMap) -> Vec<u8> {
    let max = map.summed.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.summed.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}
