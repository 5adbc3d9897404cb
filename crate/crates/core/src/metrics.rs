//! Overlap, boundary distance and agreement metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `2|A ∩ B| / (|A| + |B|)` for one label; 1 when both sets are empty.
pub fn dice_score(a: &[u8], b: &[u8], label: u8) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("dice_score", format!("masks have {} and {} voxels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Label pixels with a 4-neighbour outside the label or the slice,
/// as `(z, y, x)`.
pub fn boundary_points(mask: &[u8], dims: [usize; 3], label: u8) -> Vec<[usize; 3]> {
    let [zn, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..zn {
        let s = &mask[z * h * w..(z + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if s[y * w + x] != label {
                    continue;
                }
                let inside = |yy: usize, xx: usize| s[yy * w + xx] == label;
                let border = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !inside(y, x - 1)
                    || !inside(y, x + 1)
                    || !inside(y - 1, x)
                    || !inside(y + 1, x);
                if border {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let d2 = |p: &[usize; 3], q: &[usize; 3]| {
        let dz = (p[0] as f64 - q[0] as f64) * spacing[0];
        let dy = (p[1] as f64 - q[1] as f64) * spacing[1];
        let dx = (p[2] as f64 - q[2] as f64) * spacing[2];
        dz * dz + dy * dy + dx * dx
    };
    from.iter()
        .map(|p| to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between the boundaries of `label` in two
/// `[Z, H, W]` masks. `spacing_mm` is `(z, y, x)`.
pub fn hausdorff(a: &[u8], b: &[u8], dims: [usize; 3], label: u8, spacing_mm: [f64; 3]) -> Result<f64> {
    let n = dims[0] * dims[1] * dims[2];
    if a.len() != n || b.len() != n {
        return Err(Error::dim(
            "hausdorff",
            format!("masks have {} and {} voxels, dims {dims:?} need {n}", a.len(), b.len()),
        ));
    }
    let pa = boundary_points(a, dims, label);
    let pb = boundary_points(b, dims, label);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Undefined(format!("Hausdorff distance with an empty set for label {label}")));
    }
    Ok(directed(&pa, &pb, spacing_mm).max(directed(&pb, &pa, spacing_mm)))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson", format!("series of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Undefined("correlation of a series with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Per-class metrics of one subject and phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub subject: String,
    pub phase: String,
    pub class: String,
    pub dice: f64,
    /// `None` when either mask lacks the class.
    pub hausdorff_mm: Option<f64>,
}
