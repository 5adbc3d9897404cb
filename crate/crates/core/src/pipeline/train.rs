//! Training loop: condensation schedule, dual loss, group lasso and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lg_conv::{CondensationSchedule, Phase};
use crate::loss::{total_loss, LabelMask, LossConfig};
use crate::metrics::dice_score;
use crate::net::{CountMode, Mode, NetConfig, Network};
use crate::roi::HoughConfig;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::volume::LABEL_LV;

use super::evaluate::{argmax_channels, predict_slices};
use super::prepare::PreparedSubject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Randomly sampled batches per epoch.
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub net: NetConfig,
    /// Weight of the summed LG-Conv group-lasso penalty while condensing.
    pub group_lasso_coefficient: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Validation slices scored for Dice after every epoch.
    pub val_slices_per_epoch: usize,
    pub hough: HoughConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            steps_per_epoch: 10,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            net: NetConfig::default(),
            group_lasso_coefficient: 1e-5,
            train_fraction: 0.7,
            val_fraction: 0.15,
            val_slices_per_epoch: 16,
            hough: HoughConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            v.push("epochs, batch_size and steps_per_epoch must be positive".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(self.group_lasso_coefficient >= 0.0 && self.group_lasso_coefficient.is_finite()) {
            v.push(format!(
                "group_lasso_coefficient {} must be non-negative",
                self.group_lasso_coefficient
            ));
        }
        let frac = |f: f64| (0.0..=1.0).contains(&f);
        if !frac(self.train_fraction) || !frac(self.val_fraction) || self.train_fraction + self.val_fraction > 1.0 + 1e-12 {
            v.push(format!(
                "split fractions {} + {} must lie in [0, 1] and sum to at most 1",
                self.train_fraction, self.val_fraction
            ));
        }
        if let Err(e) = CondensationSchedule::new(self.epochs, self.net.condensation_factor) {
            v.push(e.to_string());
        }
        for r in [self.loss.validate(), self.net.validate()] {
            match r {
                Err(Error::Config(inner)) => v.extend(inner),
                Err(e) => v.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `condensing <s>` or `optimization`.
    pub phase: String,
    /// LG-Conv layers condensed at the start of this epoch.
    pub condensed_layers: usize,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    pub val_lv_dice: Option<f64>,
    pub alive_params: usize,
    pub alive_lg_params: usize,
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub history: Vec<EpochRecord>,
}

fn batch_input(images: &[&[f32]], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

/// Trains a fresh network on the crops of `train_set`, scoring LV Dice on
/// a fixed subset of `val_set` slices after every epoch.
pub fn train(train_set: &[PreparedSubject], val_set: &[PreparedSubject], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let size = cfg.net.input_size;
    let samples: Vec<(&[f32], &[u8])> = train_set.iter().flat_map(|s| s.pairs()).collect();
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if let Some((img, _)) = samples.iter().find(|(img, _)| img.len() != size * size) {
        return Err(Error::dim(
            "train",
            format!("crop of {} pixels does not match input_size {size}", img.len()),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut net = Network::<f32>::build(&cfg.net, &mut init_rng)?;
    let sched = CondensationSchedule::new(cfg.epochs, cfg.net.condensation_factor)?;
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });

    let mut val_pool: Vec<(&[f32], &[u8])> = val_set.iter().flat_map(|s| s.pairs()).collect();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        use rand::seq::SliceRandom;
        val_pool.shuffle(&mut rng);
        val_pool.truncate(cfg.val_slices_per_epoch);
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let events = net.apply_condensation(epoch, &sched)?;
        if !events.is_empty() {
            log::info!("epoch {epoch}: condensed {} LG-Conv layers", events.len());
        }
        let phase = sched.phase(epoch)?;
        let lasso_on = matches!(phase, Phase::Condensing(_)) && cfg.group_lasso_coefficient > 0.0;
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| sample_rng.random_range(0..samples.len())).collect();
            let images: Vec<&[f32]> = picks.iter().map(|&i| samples[i].0).collect();
            let mut labels = Vec::with_capacity(cfg.batch_size * size * size);
            for &i in &picks {
                labels.extend_from_slice(samples[i].1);
            }
            let mask = LabelMask::new([cfg.batch_size, size, size], cfg.net.num_classes, labels)?;

            let mut tape = Tape::new();
            let x = tape.constant(batch_input(&images, size)?);
            let probs = net.forward(&mut tape, x, Mode::Train)?;
            let mut objective = total_loss(&mut tape, probs, &mask, &cfg.loss)?;
            if lasso_on {
                if let Some(lasso) = net.group_lasso_on_tape(&mut tape)? {
                    objective = tape.combine(&[(objective, 1.0), (lasso, cfg.group_lasso_coefficient as f32)])?;
                }
            }
            let value = tape.value(objective).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: step,
                    loss: value,
                });
            }
            tape.backward(objective)?;
            net.zero_grad();
            net.accumulate_grads(&tape);
            drop(tape);
            {
                let mut params = net.params_mut();
                adam_step(params.iter_mut().map(|p| (p.name.as_str(), &mut *p.tensor)), &mut adam)?;
            }
            net.enforce_masks();
            loss_sum += value;
        }

        let val_lv_dice = if val_pool.is_empty() {
            None
        } else {
            let images: Vec<&[f32]> = val_pool.iter().map(|p| p.0).collect();
            let probs = predict_slices(&net, &images, size)?;
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (p, (_, lab)) in probs.iter().zip(&val_pool) {
                pred.extend(argmax_channels(p, cfg.net.num_classes));
                truth.extend_from_slice(lab);
            }
            Some(dice_score(&pred, &truth, LABEL_LV)?)
        };
        let record = EpochRecord {
            epoch,
            phase: match phase {
                Phase::Condensing(s) => format!("condensing {}", s + 1),
                Phase::Optimization => "optimization".into(),
            },
            condensed_layers: events.len(),
            loss: loss_sum / cfg.steps_per_epoch as f64,
            val_lv_dice,
            alive_params: net.param_count(CountMode::Alive),
            alive_lg_params: net.lg_param_count(CountMode::Alive),
        };
        log::info!(
            "epoch {epoch} [{}] loss {:.4} val LV dice {}",
            record.phase,
            record.loss,
            record.val_lv_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
        );
        history.push(record);
    }
    Ok(TrainOutcome { network: net, history })
}
