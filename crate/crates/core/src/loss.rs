//! Dual segmentation objective: frequency- and edge-weighted cross-entropy
//! plus class-balanced soft Dice.
//!
//! `|V|` and the class/edge frequencies are taken over the mini-batch the
//! loss is evaluated on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term; Dice gets `1 - alpha`.
    pub alpha: f64,
    pub scale: f64,
    pub edge_scale: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            scale: 1.0,
            edge_scale: 1.0,
            epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            v.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            v.push(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            v.push(format!("scale {} must be finite and non-negative", self.scale));
        }
        if !(self.edge_scale >= 0.0 && self.edge_scale.is_finite()) {
            v.push(format!("edge_scale {} must be finite and non-negative", self.edge_scale));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Integer labels over a `[B, H, W]` batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    batch: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: [usize; 3], num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        let [batch, height, width] = shape;
        if labels.len() != batch * height * width {
            return Err(Error::dim(
                "label mask",
                format!("shape {shape:?} needs {} labels, got {}", batch * height * width, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(LabelMask {
            batch,
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `|B_l|` for every class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Pixels with a 4-neighbour of another label in the same slice.
    pub fn edge_pixels(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; self.labels.len()];
        for b in 0..self.batch {
            let s = &self.labels[b * h * w..(b + 1) * h * w];
            let o = &mut out[b * h * w..(b + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = s[y * w + x];
                    let differs = (x > 0 && s[y * w + x - 1] != v)
                        || (x + 1 < w && s[y * w + x + 1] != v)
                        || (y > 0 && s[(y - 1) * w + x] != v)
                        || (y + 1 < h && s[(y + 1) * w + x] != v);
                    o[y * w + x] = differs;
                }
            }
        }
        out
    }
}

/// Per-pixel weights with the frequencies they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub weights: Vec<f64>,
    pub class_freq: Vec<usize>,
    pub edge_freq: usize,
    pub total: usize,
}

impl WeightMap {
    /// Element-wise sum of two maps over the same mask.
    pub fn add(&self, other: &WeightMap) -> Result<WeightMap> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::dim("weight map", "maps cover different pixel counts"));
        }
        Ok(WeightMap {
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a + b).collect(),
            class_freq: self.class_freq.clone(),
            edge_freq: self.edge_freq.max(other.edge_freq),
            total: self.total,
        })
    }
}

/// Pixel of class `l` gets `scale * |V| / |B_l|`.
pub fn class_weight_map(mask: &LabelMask, cfg: &LossConfig) -> WeightMap {
    let counts = mask.class_counts();
    let total = mask.len();
    let absent: Vec<usize> = (0..counts.len()).filter(|&l| counts[l] == 0).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} absent from batch; their terms are skipped");
    }
    let per_class: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { cfg.scale * total as f64 / c as f64 })
        .collect();
    WeightMap {
        weights: mask.labels().iter().map(|&l| per_class[l as usize]).collect(),
        class_freq: counts,
        edge_freq: 0,
        total,
    }
}

/// Additive `edge_scale * |V| / edge_freq` on every edge pixel, zero
/// elsewhere.
pub fn edge_weight_map(mask: &LabelMask, cfg: &LossConfig) -> WeightMap {
    let edges = mask.edge_pixels();
    let total = mask.len();
    let edge_freq = edges.iter().filter(|&&e| e).count();
    let w = if edge_freq == 0 {
        0.0
    } else {
        cfg.edge_scale * total as f64 / edge_freq as f64
    };
    WeightMap {
        weights: edges.iter().map(|&e| if e { w } else { 0.0 }).collect(),
        class_freq: mask.class_counts(),
        edge_freq,
        total,
    }
}

/// Class plus edge weights, the map the cross-entropy term uses.
pub fn combined_weight_map(mask: &LabelMask, cfg: &LossConfig) -> WeightMap {
    class_weight_map(mask, cfg)
        .add(&edge_weight_map(mask, cfg))
        .expect("same mask")
}

fn check_pred<T: Element>(tape: &Tape<T>, pred: Var, mask: &LabelMask) -> Result<()> {
    let [b, h, w] = mask.shape();
    let want = [b, mask.num_classes(), h, w];
    if tape.shape(pred) != want {
        return Err(Error::dim(
            "loss",
            format!("prediction shape {:?} does not match mask {want:?}", tape.shape(pred)),
        ));
    }
    Ok(())
}

/// `-sum_i w_i log p(r_i | a_i)` with the probability floored at 1e-12.
pub fn weighted_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    mask: &LabelMask,
    weights: &WeightMap,
) -> Result<Var> {
    check_pred(tape, pred, mask)?;
    let w: Vec<T> = weights.weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
    tape.weighted_cross_entropy(pred, mask.labels(), &w)
}

/// `1 - sum_l w_l (2 sum p g + eps) / sum_l w_l (sum p + sum g + eps)` with
/// `w_l = |B| / |B_l|`; absent classes are left out.
pub fn dice_loss<T: Element>(tape: &mut Tape<T>, pred: Var, mask: &LabelMask, cfg: &LossConfig) -> Result<Var> {
    check_pred(tape, pred, mask)?;
    let total = mask.len() as f64;
    let cw: Vec<T> = mask
        .class_counts()
        .iter()
        .map(|&c| T::from_f64_lossy(if c == 0 { 0.0 } else { total / c as f64 }))
        .collect();
    tape.dice_loss(pred, mask.labels(), &cw, cfg.epsilon)
}

/// `alpha * CE + (1 - alpha) * Dice`. An endpoint `alpha` records only the
/// surviving term, so the value equals that component exactly.
pub fn total_loss<T: Element>(tape: &mut Tape<T>, pred: Var, mask: &LabelMask, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if cfg.alpha == 1.0 {
        return weighted_cross_entropy(tape, pred, mask, &combined_weight_map(mask, cfg));
    }
    if cfg.alpha == 0.0 {
        return dice_loss(tape, pred, mask, cfg);
    }
    let ce = weighted_cross_entropy(tape, pred, mask, &combined_weight_map(mask, cfg))?;
    let dice = dice_loss(tape, pred, mask, cfg)?;
    tape.combine(&[
        (ce, T::from_f64_lossy(cfg.alpha)),
        (dice, T::from_f64_lossy(cfg.beta())),
    ])
}
