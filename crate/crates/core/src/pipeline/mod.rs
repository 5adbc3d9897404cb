//! Datasets, phantoms, fold splitting, training and evaluation.
//!
//! A dataset directory holds `manifest.json` plus three volume files per
//! subject: `<id>_cine.vol` (`[T, Z, H, W]` f32), `<id>_ed.vol` and
//! `<id>_es.vol` (`[1, Z, H, W]` u8 labels).

pub mod evaluate;
pub mod phantom;
pub mod prepare;
pub mod split;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CineVolume, MaskVolume};

pub use evaluate::{
    emit_report_csv, evaluate, evaluate_predictions, metrics_csv, segment_frames, ClinicalRow, Evaluation, ReportFiles,
    SummaryRow, CLINICAL_PARAMETERS,
};
pub use phantom::{generate_cohort, generate_phantom, PathologyGroup, PhantomSpec, PhantomTruth};
pub use prepare::{normalize_intensity, prepare_subject, PreparedSubject};
pub use split::{stratified_kfold, train_val_test_split, Split};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

/// One subject with ED/ES annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub group: String,
    pub cine: CineVolume,
    /// `[1, Z, H, W]` labels at the ED frame.
    pub ed: MaskVolume,
    pub es: MaskVolume,
    pub ed_frame: usize,
    pub es_frame: usize,
    /// Closed-form indices, known for phantoms only.
    pub truth: Option<PhantomTruth>,
}

impl Subject {
    pub fn validate(&self) -> Result<()> {
        let [t, z, h, w] = self.cine.dims();
        for (name, m) in [("ED", &self.ed), ("ES", &self.es)] {
            if m.dims() != [1, z, h, w] {
                return Err(Error::Validation(format!(
                    "{} {name} mask dims {:?} do not match cine {:?}",
                    self.id,
                    m.dims(),
                    self.cine.dims()
                )));
            }
            if let Some(&l) = m.data().iter().find(|&&l| l > crate::volume::LABEL_LV) {
                return Err(Error::Validation(format!("{} {name} mask holds label {l}", self.id)));
            }
        }
        if self.ed_frame >= t || self.es_frame >= t {
            return Err(Error::Validation(format!(
                "{} ED/ES frames {}/{} outside {t} frames",
                self.id, self.ed_frame, self.es_frame
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: String,
    pub ed_frame: usize,
    pub es_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PhantomTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn save_dataset(dir: &Path, subjects: &[Subject]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        if !valid_id(&s.id) {
            return Err(Error::Argument(format!("subject id {:?} is not a safe file name", s.id)));
        }
        s.cine.save(&dir.join(format!("{}_cine.vol", s.id)))?;
        s.ed.save(&dir.join(format!("{}_ed.vol", s.id)))?;
        s.es.save(&dir.join(format!("{}_es.vol", s.id)))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            group: s.group.clone(),
            ed_frame: s.ed_frame,
            es_frame: s.es_frame,
            truth: s.truth.clone(),
        });
    }
    let manifest = Manifest { subjects: entries };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Subject>> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.subjects.is_empty() {
        return Err(Error::Validation(format!("{} lists no subjects", dir.display())));
    }
    manifest
        .subjects
        .into_iter()
        .map(|e| {
            if !valid_id(&e.id) {
                return Err(Error::Validation(format!("subject id {:?} is not a safe file name", e.id)));
            }
            let s = Subject {
                cine: CineVolume::load(&dir.join(format!("{}_cine.vol", e.id)))?,
                ed: MaskVolume::load(&dir.join(format!("{}_ed.vol", e.id)))?,
                es: MaskVolume::load(&dir.join(format!("{}_es.vol", e.id)))?,
                id: e.id,
                group: e.group,
                ed_frame: e.ed_frame,
                es_frame: e.es_frame,
                truth: e.truth,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}
