//! Intensity normalization and ROI cropping ahead of the network.

use crate::error::Result;
use crate::roi::{detect_roi, HoughConfig, RoiDetection};
use crate::volume::CineVolume;

use super::Subject;

/// Intensity quantile mapped to 1.0 by [`normalize_intensity`].
pub const NORMALIZE_QUANTILE: f64 = 0.99;

/// Divides by the 99th percentile of the volume's intensities.
pub fn normalize_intensity(vol: &CineVolume) -> CineVolume {
    let mut scratch: Vec<f32> = vol.data().to_vec();
    let k = ((scratch.len() - 1) as f64 * NORMALIZE_QUANTILE).round() as usize;
    let (_, q, _) = scratch.select_nth_unstable_by(k, f32::total_cmp);
    let q = *q;
    let mut out = vol.clone();
    if q > 0.0 {
        for v in out.data_mut() {
            *v /= q;
        }
    }
    out
}

/// Cropped, normalized ED/ES slices of one subject, ready for training or
/// inference.
#[derive(Clone, Debug)]
pub struct PreparedSubject {
    pub id: String,
    pub group: String,
    pub roi: RoiDetection,
    /// `(Z, H, W)` of the original volume.
    pub dims: [usize; 3],
    pub ed_images: Vec<Vec<f32>>,
    pub es_images: Vec<Vec<f32>>,
    pub ed_labels: Vec<Vec<u8>>,
    pub es_labels: Vec<Vec<u8>>,
}

impl PreparedSubject {
    /// Every `(image, labels)` crop, ED slices first.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f32], &[u8])> {
        self.ed_images
            .iter()
            .zip(&self.ed_labels)
            .chain(self.es_images.iter().zip(&self.es_labels))
            .map(|(i, l)| (i.as_slice(), l.as_slice()))
    }
}

/// Crops every slice of the `frame` of a normalized cine around the ROI.
pub fn crop_frame(cine: &CineVolume, frame: usize, roi: &RoiDetection) -> Vec<Vec<f32>> {
    let [_, z_len, h, w] = cine.dims();
    (0..z_len).map(|z| roi.roi.crop(cine.slice(frame, z), h, w)).collect()
}

/// Detects the ROI and crops `size × size` windows of the ED/ES frames.
pub fn prepare_subject(s: &Subject, hough: &HoughConfig, size: usize) -> Result<PreparedSubject> {
    s.validate()?;
    let [_, z_len, h, w] = s.cine.dims();
    let roi = detect_roi(&s.cine, hough)?.resized(size, h, w);
    let norm = normalize_intensity(&s.cine);
    let labels = |m: &crate::volume::MaskVolume| -> Vec<Vec<u8>> {
        (0..z_len).map(|z| roi.roi.crop(m.slice(0, z), h, w)).collect()
    };
    Ok(PreparedSubject {
        id: s.id.clone(),
        group: s.group.clone(),
        dims: [z_len, h, w],
        ed_images: crop_frame(&norm, s.ed_frame, &roi),
        es_images: crop_frame(&norm, s.es_frame, &roi),
        ed_labels: labels(&s.ed),
        es_labels: labels(&s.es),
        roi,
    })
}
