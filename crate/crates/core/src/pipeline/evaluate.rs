//! Inference on whole volumes, per-class metrics and clinical agreement.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clinical::{report, ClinicalReport, SegmentationResult};
use crate::error::{Error, Result};
use crate::metrics::{dice_score, hausdorff, pearson, MetricResult};
use crate::net::Network;
use crate::roi::{detect_roi, HoughConfig, RoiDetection};
use crate::tensor::Tensor;
use crate::volume::{CineVolume, LABEL_LV, LABEL_MYO, LABEL_NAMES, LABEL_RV};

use super::prepare::{crop_frame, normalize_intensity};
use super::Subject;

/// Slices per forward pass at inference.
const CHUNK: usize = 4;

/// Per-pixel argmax of one `[C, H, W]` probability map.
pub fn argmax_channels(prob: &[f32], classes: usize) -> Vec<u8> {
    let n = prob.len() / classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if prob[c * n + i] > prob[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Eval-mode probabilities, one `[C, S, S]` buffer per input image.
pub fn predict_slices(net: &Network<f32>, images: &[&[f32]], size: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * size * size);
        for img in chunk {
            if img.len() != size * size {
                return Err(Error::dim(
                    "predict_slices",
                    format!("image of {} pixels, network expects {size}x{size}", img.len()),
                ));
            }
            data.extend_from_slice(img);
        }
        let probs = net.predict(&Tensor::new(vec![chunk.len(), 1, size, size], data)?)?;
        let per = probs.len() / chunk.len();
        out.extend(probs.data().chunks(per).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Segments the given frames of a cine. Each returned mask is `[Z, H, W]`
/// at the original resolution, background outside the ROI window.
pub fn segment_frames(
    net: &Network<f32>,
    cine: &CineVolume,
    frames: &[usize],
    hough: &HoughConfig,
) -> Result<(RoiDetection, Vec<Vec<u8>>)> {
    let [t_len, z_len, h, w] = cine.dims();
    if let Some(&f) = frames.iter().find(|&&f| f >= t_len) {
        return Err(Error::Argument(format!("frame {f} outside {t_len} frames")));
    }
    let size = net.config().input_size;
    let classes = net.config().num_classes;
    let roi = detect_roi(cine, hough)?.resized(size, h, w);
    let norm = normalize_intensity(cine);
    let mut masks = Vec::with_capacity(frames.len());
    for &f in frames {
        let crops = crop_frame(&norm, f, &roi);
        let refs: Vec<&[f32]> = crops.iter().map(Vec::as_slice).collect();
        let probs = predict_slices(net, &refs, size)?;
        let mut mask = vec![0u8; z_len * h * w];
        for (z, p) in probs.iter().enumerate() {
            let labels = argmax_channels(p, classes);
            roi.roi.paste(&labels, &mut mask[z * h * w..(z + 1) * h * w], h, w);
        }
        masks.push(mask);
    }
    Ok((roi, masks))
}

/// One clinical parameter of one subject, from predicted and from
/// ground-truth masks. Undefined values are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRow {
    pub subject: String,
    pub group: String,
    pub parameter: String,
    pub predicted: f64,
    pub ground_truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    /// NaN when fewer than two finite pairs or zero variance.
    pub rho: f64,
    pub mean_abs_error: f64,
    /// Pairs with both values finite.
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `(subject, group)` in evaluation order.
    pub subjects: Vec<(String, String)>,
    pub metrics: Vec<MetricResult>,
    pub clinical: Vec<ClinicalRow>,
    /// Subjects whose ROI fell back to the image centre.
    pub roi_fallbacks: usize,
}

/// Parameter names in [`Evaluation::clinical`] order.
pub const CLINICAL_PARAMETERS: [&str; 5] = ["lv_edv_ml", "lv_esv_ml", "sv_ml", "ef_percent", "myo_mass_g"];

const CLASSES: [u8; 3] = [LABEL_RV, LABEL_MYO, LABEL_LV];

fn index_values(r: Option<&ClinicalReport>) -> [f64; 5] {
    match r {
        Some(r) => [r.lv_edv_ml, r.lv_esv_ml, r.sv_ml, r.ef_percent, r.myo_mass_g],
        None => [f64::NAN; 5],
    }
}

/// Segments ED and ES of every subject and scores them against the
/// annotations.
pub fn evaluate(net: &Network<f32>, subjects: &[Subject], hough: &HoughConfig) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(subjects.len());
    let mut fallbacks = 0;
    for s in subjects {
        s.validate()?;
        let (roi, masks) = segment_frames(net, &s.cine, &[s.ed_frame, s.es_frame], hough)?;
        fallbacks += roi.fallback as usize;
        let [ed, es]: [Vec<u8>; 2] = masks.try_into().expect("two frames requested");
        predictions.push([ed, es]);
    }
    let mut ev = evaluate_predictions(subjects, &predictions)?;
    ev.roi_fallbacks = fallbacks;
    Ok(ev)
}

/// Scores given `[ED, ES]` label stacks (each `[Z, H, W]`) against the
/// annotations of the matching subjects.
pub fn evaluate_predictions(subjects: &[Subject], predictions: &[[Vec<u8>; 2]]) -> Result<Evaluation> {
    if subjects.len() != predictions.len() {
        return Err(Error::Argument(format!(
            "{} subjects but {} predictions",
            subjects.len(),
            predictions.len()
        )));
    }
    let mut ev = Evaluation::default();
    for (s, [pred_ed, pred_es]) in subjects.iter().zip(predictions) {
        s.validate()?;
        let [_, z_len, h, w] = s.cine.dims();
        let geom = s.cine.geometry().clone();
        let spacing = [geom.slice_thickness_mm + geom.slice_gap_mm, geom.spacing_mm[1], geom.spacing_mm[0]];
        for (phase, pred, truth) in [("ED", pred_ed, s.ed.data()), ("ES", pred_es, s.es.data())] {
            for label in CLASSES {
                let hd = match hausdorff(pred, truth, [z_len, h, w], label, spacing) {
                    Ok(d) => Some(d),
                    Err(Error::Undefined(_)) => None,
                    Err(e) => return Err(e),
                };
                ev.metrics.push(MetricResult {
                    subject: s.id.clone(),
                    phase: phase.into(),
                    class: LABEL_NAMES[label as usize].into(),
                    dice: dice_score(pred, truth, label)?,
                    hausdorff_mm: hd,
                });
            }
        }
        let reference = report(&SegmentationResult {
            ed: Some(s.ed.data().to_vec()),
            es: Some(s.es.data().to_vec()),
            geometry: geom.clone(),
        });
        let predicted = report(&SegmentationResult {
            ed: Some(pred_ed.clone()),
            es: Some(pred_es.clone()),
            geometry: geom,
        });
        for r in [&reference, &predicted] {
            if let Err(e) = r {
                if !matches!(e, Error::Undefined(_)) {
                    return Err(Error::Validation(format!("{}: {e}", s.id)));
                }
                log::warn!("{}: {e}", s.id);
            }
        }
        let p = index_values(predicted.as_ref().ok());
        let r = index_values(reference.as_ref().ok());
        for (i, name) in CLINICAL_PARAMETERS.iter().enumerate() {
            ev.clinical.push(ClinicalRow {
                subject: s.id.clone(),
                group: s.group.clone(),
                parameter: (*name).into(),
                predicted: p[i],
                ground_truth: r[i],
            });
        }
        ev.subjects.push((s.id.clone(), s.group.clone()));
    }
    Ok(ev)
}

impl Evaluation {
    /// Mean Dice of one class (`"LV"`, `"RV"`, `"myocardium"`) over both phases.
    pub fn mean_dice(&self, class: &str) -> Option<f64> {
        let v: Vec<f64> = self.metrics.iter().filter(|m| m.class == class).map(|m| m.dice).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Agreement of every clinical parameter over the subjects where both
    /// values are finite.
    pub fn summary(&self) -> Vec<SummaryRow> {
        CLINICAL_PARAMETERS
            .iter()
            .map(|&name| {
                let (p, r): (Vec<f64>, Vec<f64>) = self
                    .clinical
                    .iter()
                    .filter(|c| c.parameter == name && c.predicted.is_finite() && c.ground_truth.is_finite())
                    .map(|c| (c.predicted, c.ground_truth))
                    .unzip();
                let n = p.len();
                let mae = if n == 0 {
                    f64::NAN
                } else {
                    p.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64
                };
                SummaryRow {
                    parameter: name.into(),
                    rho: pearson(&p, &r).unwrap_or(f64::NAN),
                    mean_abs_error: mae,
                    n,
                }
            })
            .collect()
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One row per subject and class: Dice and Hausdorff at ED and ES.
pub fn metrics_csv(ev: &Evaluation) -> String {
    let mut out = String::from("subject,group,class,dice_ed,dice_es,hd_ed_mm,hd_es_mm\n");
    for (id, group) in &ev.subjects {
        for label in CLASSES {
            let class = LABEL_NAMES[label as usize];
            let find = |phase: &str| {
                ev.metrics
                    .iter()
                    .find(|m| &m.subject == id && m.class == class && m.phase == phase)
            };
            let (ed, es) = (find("ED"), find("ES"));
            let _ = writeln!(
                out,
                "{id},{group},{class},{},{},{},{}",
                opt(ed.map(|m| m.dice)),
                opt(es.map(|m| m.dice)),
                opt(ed.and_then(|m| m.hausdorff_mm)),
                opt(es.and_then(|m| m.hausdorff_mm)),
            );
        }
    }
    out
}

fn clinical_csv(ev: &Evaluation) -> String {
    let mut out = String::from("subject,group,parameter,predicted,ground_truth\n");
    for c in &ev.clinical {
        let _ = writeln!(out, "{},{},{},{},{}", c.subject, c.group, c.parameter, num(c.predicted), num(c.ground_truth));
    }
    out
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("parameter,rho,mean_abs_error,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.parameter, num(r.rho), num(r.mean_abs_error), r.n);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub clinical: PathBuf,
    pub summary: PathBuf,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

/// Writes the clinical rows to `path` and the agreement summary to
/// `<stem>_summary.<ext>`.
pub fn emit_report_csv(ev: &Evaluation, path: &Path) -> Result<ReportFiles> {
    if ev.subjects.is_empty() {
        return Err(Error::Argument("no evaluated subjects to report".into()));
    }
    let files = ReportFiles {
        clinical: path.to_path_buf(),
        summary: sibling(path, "summary"),
    };
    std::fs::write(&files.clinical, clinical_csv(ev))?;
    std::fs::write(&files.summary, summary_csv(&ev.summary()))?;
    Ok(files)
}
