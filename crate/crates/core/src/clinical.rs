//! Clinical indices from segmentation masks: Simpson's-rule volumes,
//! stroke volume, ejection fraction and myocardial mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LABEL_LV, LABEL_MYO, LABEL_RV};

/// Myocardial tissue density in g/mL.
pub const MYO_DENSITY_G_PER_ML: f64 = 1.05;

/// Volume of `label` in mL: pixel count times `sx * sy * (thickness + gap)`,
/// summed over every slice in `labels`.
pub fn simpson_volume(labels: &[u8], label: u8, geom: &Geometry) -> f64 {
    let count = labels.iter().filter(|&&l| l == label).count();
    count as f64 * geom.voxel_mm3() / 1000.0
}

/// `(SV, EF%)` from end-diastolic and end-systolic volumes.
pub fn indices(edv: f64, esv: f64) -> Result<(f64, f64)> {
    if !(edv > 0.0) {
        return Err(Error::Undefined(format!("ejection fraction with EDV = {edv} mL")));
    }
    if esv > edv {
        log::warn!("ESV {esv:.2} mL exceeds EDV {edv:.2} mL; EF is negative");
    }
    let sv = edv - esv;
    Ok((sv, 100.0 * sv / edv))
}

pub fn myocardial_mass(myo_volume_ml: f64) -> f64 {
    myo_volume_ml * MYO_DENSITY_G_PER_ML
}

/// ED and ES label stacks of one subject with their shared geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub ed: Option<Vec<u8>>,
    pub es: Option<Vec<u8>>,
    pub geometry: Geometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReport {
    pub lv_edv_ml: f64,
    pub lv_esv_ml: f64,
    pub sv_ml: f64,
    pub ef_percent: f64,
    pub rv_edv_ml: f64,
    pub rv_esv_ml: f64,
    /// `None` when the RV is absent at ED.
    pub rv_ef_percent: Option<f64>,
    pub myo_mass_g: f64,
}

/// Column order of [`ClinicalReport::csv_row`].
pub const CSV_HEADER: &str = "lv_edv_ml,lv_esv_ml,sv_ml,ef_percent,rv_edv_ml,rv_esv_ml,rv_ef_percent,myo_mass_g";

impl ClinicalReport {
    pub fn csv_row(&self) -> String {
        let rv_ef = self.rv_ef_percent.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.lv_edv_ml, self.lv_esv_ml, self.sv_ml, self.ef_percent, self.rv_edv_ml, self.rv_esv_ml, rv_ef, self.myo_mass_g
        )
    }
}

/// Assembles every index; myocardial mass is taken at ED.
pub fn report(seg: &SegmentationResult) -> Result<ClinicalReport> {
    seg.geometry.validate()?;
    let ed = seg.ed.as_deref().ok_or_else(|| Error::Missing("ED frame".into()))?;
    let es = seg.es.as_deref().ok_or_else(|| Error::Missing("ES frame".into()))?;
    if ed.len() != es.len() {
        return Err(Error::dim(
            "clinical report",
            format!("ED mask has {} voxels, ES mask {}", ed.len(), es.len()),
        ));
    }
    let g = &seg.geometry;
    let lv_edv_ml = simpson_volume(ed, LABEL_LV, g);
    let lv_esv_ml = simpson_volume(es, LABEL_LV, g);
    let (sv_ml, ef_percent) = indices(lv_edv_ml, lv_esv_ml)?;
    let rv_edv_ml = simpson_volume(ed, LABEL_RV, g);
    let rv_esv_ml = simpson_volume(es, LABEL_RV, g);
    let rv_ef_percent = indices(rv_edv_ml, rv_esv_ml).ok().map(|(_, ef)| ef);
    Ok(ClinicalReport {
        lv_edv_ml,
        lv_esv_ml,
        sv_ml,
        ef_percent,
        rv_edv_ml,
        rv_esv_ml,
        rv_ef_percent,
        myo_mass_g: myocardial_mass(simpson_volume(ed, LABEL_MYO, g)),
    })
}
