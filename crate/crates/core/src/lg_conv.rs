//! Learned group convolution.
//!
//! The `N` filters of a layer are split into `M` contiguous groups. Each
//! group starts connected to every input channel; condensation then
//! removes, group by group, the input channels whose outgoing weights have
//! the lowest mean magnitude. After the `C - 1` condensing stages each
//! group keeps `ceil(h / C)` of its `h` input channels and the layer can
//! be rewritten as a gather followed by an ordinary grouped convolution
//! ([`InferenceLGConv`]).

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Channels pruned from each group by one condensing stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Stage number after this condensation (1-based).
    pub stage: usize,
    /// Pruned input channels per group, in pruning order.
    pub pruned: Vec<Vec<usize>>,
}

/// Learned group convolution layer with its pruning state.
#[derive(Clone, Debug)]
pub struct LGConvLayer<T> {
    name: String,
    groups: usize,
    condensation_factor: usize,
    padding: usize,
    kernel: Tensor<T>,
    /// `alive[g * h + c]`: group `g` still reads input channel `c`.
    alive: Vec<bool>,
    stage: usize,
    history: Vec<StageRecord>,
}

impl<T: Element> LGConvLayer<T> {
    /// Fresh layer with fan-in scaled normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        filters: usize,
        kernel_size: usize,
        groups: usize,
        condensation_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel_size * kernel_size).max(1) as f64;
        let kernel = Tensor::randn(
            &[filters, in_channels, kernel_size, kernel_size],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        Self::from_kernel(name, kernel, groups, condensation_factor, kernel_size / 2)
    }

    /// Wraps an existing `[N, h, kh, kw]` kernel.
    pub fn from_kernel(
        name: impl Into<String>,
        kernel: Tensor<T>,
        groups: usize,
        condensation_factor: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, h, _, _] = kernel.dims4("lg_conv")?;
        let mut problems = Vec::new();
        if groups == 0 || n % groups != 0 {
            problems.push(format!("{n} filters cannot be split into {groups} equal groups"));
        }
        if condensation_factor == 0 {
            problems.push("condensation factor must be at least 1".to_string());
        }
        if h == 0 {
            problems.push("layer needs at least one input channel".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(LGConvLayer {
            name: name.into(),
            groups,
            condensation_factor,
            padding,
            kernel,
            alive: vec![true; groups * h],
            stage: 0,
            history: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn condensation_factor(&self) -> usize {
        self.condensation_factor
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn history(&self) -> &[StageRecord] {
        &self.history
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor<T> {
        &mut self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn filters_per_group(&self) -> usize {
        self.filters() / self.groups
    }

    fn kernel_area(&self) -> usize {
        self.kernel.shape()[2] * self.kernel.shape()[3]
    }

    pub fn is_fully_condensed(&self) -> bool {
        self.stage + 1 >= self.condensation_factor
    }

    pub fn is_alive(&self, group: usize, channel: usize) -> bool {
        self.alive[group * self.in_channels() + channel]
    }

    /// Alive input channels of one group, ascending.
    pub fn alive_channels(&self, group: usize) -> Vec<usize> {
        (0..self.in_channels()).filter(|&c| self.is_alive(group, c)).collect()
    }

    /// Binary `[N, h]` connection mask, one row per filter.
    pub fn mask(&self) -> Tensor<T> {
        let (n, h) = (self.filters(), self.in_channels());
        let per = self.filters_per_group();
        Tensor::from_fn(&[n, h], |i| {
            let (f, c) = (i / h, i % h);
            if self.is_alive(f / per, c) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Restores a mask read from disk; rows within a group must agree.
    pub fn set_mask(&mut self, mask: &[u8], stage: usize, history: Vec<StageRecord>) -> Result<()> {
        let (n, h) = (self.filters(), self.in_channels());
        if mask.len() != n * h {
            return Err(Error::Validation(format!(
                "mask for {} has {} entries, expected {}",
                self.name,
                mask.len(),
                n * h
            )));
        }
        if stage >= self.condensation_factor {
            return Err(Error::Validation(format!("stage {stage} out of range for {}", self.name)));
        }
        let per = self.filters_per_group();
        let mut alive = vec![false; self.groups * h];
        for f in 0..n {
            for c in 0..h {
                let bit = mask[f * h + c] != 0;
                let g = f / per;
                if f % per == 0 {
                    alive[g * h + c] = bit;
                } else if alive[g * h + c] != bit {
                    return Err(Error::Validation(format!(
                        "mask of {} differs between filters of group {g}",
                        self.name
                    )));
                }
            }
        }
        let target = self.alive_target(stage);
        for g in 0..self.groups {
            let n_alive = alive[g * h..(g + 1) * h].iter().filter(|&&a| a).count();
            if n_alive != target {
                return Err(Error::Validation(format!(
                    "group {g} of {} keeps {n_alive} channels; stage {stage} keeps {target}",
                    self.name
                )));
            }
        }
        self.alive = alive;
        self.stage = stage;
        self.history = history;
        self.enforce_mask();
        Ok(())
    }

    /// Mask expanded to the kernel's full `[N, h, kh, kw]` layout.
    fn expanded_mask(&self) -> Vec<T> {
        let (h, k) = (self.in_channels(), self.kernel_area());
        let per = self.filters_per_group();
        let mut out = Vec::with_capacity(self.kernel.len());
        for f in 0..self.filters() {
            for c in 0..h {
                let v = if self.is_alive(f / per, c) { T::one() } else { T::zero() };
                out.extend(std::iter::repeat_n(v, k));
            }
        }
        out
    }

    /// Zeroes every pruned weight (and its gradient, if any).
    pub fn enforce_mask(&mut self) {
        let mask = self.expanded_mask();
        for (w, &m) in self.kernel.data_mut().iter_mut().zip(&mask) {
            if m == T::zero() {
                *w = T::zero();
            }
        }
        if let Some(g) = self.kernel.grad_mut() {
            for (v, &m) in g.iter_mut().zip(&mask) {
                if m == T::zero() {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    /// Masked dense convolution, recorded on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(Error::dim(
                "lg_forward",
                format!("{} expects {} input channels, got {c}", self.name, self.in_channels()),
            ));
        }
        let w = tape.param(&self.weight_name(), &self.kernel);
        let w = if self.alive.iter().all(|&a| a) {
            w
        } else {
            tape.mask_mul(w, self.expanded_mask())?
        };
        tape.conv2d(x, w, 1, self.padding)
    }

    /// Mean |weight| per (group, input channel) over the group's filters and
    /// kernel positions. Pruned connections score negative infinity.
    pub fn importance_scores(&self) -> Vec<Vec<f64>> {
        let (h, k) = (self.in_channels(), self.kernel_area());
        let per = self.filters_per_group();
        let w = self.kernel.data();
        (0..self.groups)
            .map(|g| {
                (0..h)
                    .map(|c| {
                        if !self.is_alive(g, c) {
                            return f64::NEG_INFINITY;
                        }
                        let mut s = 0.0;
                        for f in g * per..(g + 1) * per {
                            let base = (f * h + c) * k;
                            s += w[base..base + k].iter().map(|v| v.abs().as_f64()).sum::<f64>();
                        }
                        s / (per * k) as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Channels each group keeps once `stage` stages are complete.
    pub fn alive_target(&self, stage: usize) -> usize {
        let (h, c) = (self.in_channels(), self.condensation_factor);
        (h * (c - stage)).div_ceil(c)
    }

    /// One condensing stage: each group drops its least important alive
    /// channels so that `ceil(h * (C - s) / C)` survive after stage `s`.
    /// Equal scores prune the lower channel index first.
    pub fn condense(&mut self) -> Result<StageRecord> {
        if self.is_fully_condensed() {
            return Err(Error::State(format!(
                "{} already finished its {} condensing stages",
                self.name,
                self.condensation_factor - 1
            )));
        }
        let h = self.in_channels();
        let target = self.alive_target(self.stage + 1);
        let scores = self.importance_scores();
        let mut pruned = Vec::with_capacity(self.groups);
        for (g, row) in scores.iter().enumerate() {
            let mut order = self.alive_channels(g);
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let drop = order.len().saturating_sub(target);
            let chosen: Vec<usize> = order[..drop].to_vec();
            for &c in &chosen {
                self.alive[g * h + c] = false;
            }
            pruned.push(chosen);
        }
        self.stage += 1;
        self.enforce_mask();
        let record = StageRecord {
            stage: self.stage,
            pruned,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Group-lasso penalty: sum over (group, channel) of the L2 norm of the
    /// group's weights on that channel.
    pub fn group_lasso_penalty(&self) -> f64 {
        let dims = <[usize; 4]>::try_from(self.kernel.shape()).expect("4-d kernel");
        crate::tensor::tape_group_norms(self.kernel.data(), dims, self.groups)
            .iter()
            .map(|v| v.as_f64())
            .sum()
    }

    /// The same penalty recorded on the tape so it contributes gradients.
    pub fn group_lasso_on_tape(&self, tape: &mut Tape<T>) -> Result<Var> {
        let w = tape.param(&self.weight_name(), &self.kernel);
        tape.group_lasso(w, self.groups)
    }

    pub fn dense_weight_count(&self) -> usize {
        self.kernel.len()
    }

    pub fn alive_weight_count(&self) -> usize {
        let per_conn = self.filters_per_group() * self.kernel_area();
        self.alive.iter().filter(|&&a| a).count() * per_conn
    }

    /// Compact gather + grouped-convolution form. Only valid once every
    /// condensing stage has run.
    pub fn to_inference(&self) -> Result<InferenceLGConv<T>> {
        if !self.is_fully_condensed() {
            return Err(Error::State(format!(
                "{} is at stage {} of {}; condense fully before conversion",
                self.name,
                self.stage,
                self.condensation_factor - 1
            )));
        }
        let (h, k) = (self.in_channels(), self.kernel_area());
        let [n, _, kh, kw] = <[usize; 4]>::try_from(self.kernel.shape()).expect("4-d kernel");
        let per = self.filters_per_group();
        let index: Vec<Vec<usize>> = (0..self.groups).map(|g| self.alive_channels(g)).collect();
        let kept = index[0].len();
        if index.iter().any(|ix| ix.len() != kept) {
            return Err(Error::State(format!("{} has unequal group widths", self.name)));
        }
        let w = self.kernel.data();
        let mut data = Vec::with_capacity(n * kept * k);
        for f in 0..n {
            for &c in &index[f / per] {
                let base = (f * h + c) * k;
                data.extend_from_slice(&w[base..base + k]);
            }
        }
        Ok(InferenceLGConv {
            index,
            grouped_kernel: Tensor::new(vec![n, kept, kh, kw], data)?,
            padding: self.padding,
        })
    }
}

/// Condensed layer rewritten as per-group channel gathers followed by an
/// ordinary grouped convolution.
#[derive(Clone, Debug)]
pub struct InferenceLGConv<T> {
    /// Surviving input channels for each group.
    pub index: Vec<Vec<usize>>,
    /// `[N, kept, kh, kw]`; filters of group `g` are rows `g*N/M..(g+1)*N/M`.
    pub grouped_kernel: Tensor<T>,
    pub padding: usize,
}

impl<T: Element> InferenceLGConv<T> {
    pub fn groups(&self) -> usize {
        self.index.len()
    }

    pub fn weight_count(&self) -> usize {
        self.grouped_kernel.len()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [n, kept, kh, kw] = <[usize; 4]>::try_from(self.grouped_kernel.shape()).expect("4-d");
        let per = n / self.groups();
        let chunk = per * kept * kh * kw;
        let mut outs = Vec::with_capacity(self.groups());
        for (g, idx) in self.index.iter().enumerate() {
            let xs = tape.gather_channels(x, idx)?;
            let wg = Tensor::new(
                vec![per, kept, kh, kw],
                self.grouped_kernel.data()[g * chunk..(g + 1) * chunk].to_vec(),
            )?;
            let wv = tape.constant(wg);
            outs.push(tape.conv2d(xs, wv, 1, self.padding)?);
        }
        tape.concat_channels(&outs)
    }

    /// Convenience wrapper on plain tensors.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Phase of training an epoch falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Condensing stage `s` (0-based): `s` condensations have happened.
    Condensing(usize),
    Optimization,
}

/// `C - 1` condensing stages sharing the first half of training equally,
/// then the optimization stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondensationSchedule {
    pub total_epochs: usize,
    pub condensation_factor: usize,
    /// Epoch at whose start condensation `s` (1-based) fires.
    pub stage_boundaries: Vec<usize>,
}

impl CondensationSchedule {
    pub fn new(total_epochs: usize, condensation_factor: usize) -> Result<Self> {
        if condensation_factor == 0 {
            return Err(Error::Argument("condensation factor must be at least 1".into()));
        }
        let stages = condensation_factor - 1;
        let boundaries: Vec<usize> = (1..=stages)
            .map(|s| total_epochs * s / (2 * stages))
            .collect();
        let increasing = boundaries
            .iter()
            .try_fold(0usize, |prev, &b| (b > prev).then_some(b))
            .is_some();
        if stages > 0 && !increasing {
            return Err(Error::Argument(format!(
                "{total_epochs} epochs cannot hold {stages} condensing stages in their first half"
            )));
        }
        Ok(CondensationSchedule {
            total_epochs,
            condensation_factor,
            stage_boundaries: boundaries,
        })
    }

    pub fn phase(&self, epoch: usize) -> Result<Phase> {
        if epoch >= self.total_epochs {
            return Err(Error::Argument(format!(
                "epoch {epoch} outside [0, {})",
                self.total_epochs
            )));
        }
        let done = self.stage_boundaries.iter().filter(|&&b| b <= epoch).count();
        Ok(if done == self.stage_boundaries.len() {
            Phase::Optimization
        } else {
            Phase::Condensing(done)
        })
    }

    /// 1-based condensation number that fires at the start of `epoch`.
    pub fn fires_at(&self, epoch: usize) -> Option<usize> {
        self.stage_boundaries
            .iter()
            .position(|&b| b == epoch)
            .map(|i| i + 1)
    }
}

/// CSV listing of alive counts and pruned channels for each layer and stage.
pub fn prune_report_csv<T: Element>(layers: &[&LGConvLayer<T>]) -> String {
    let mut out = String::from("layer,stage,group,alive,pruned_channels\n");
    for layer in layers {
        let h = layer.in_channels();
        let mut alive = vec![h; layer.groups()];
        for g in 0..layer.groups() {
            let _ = writeln!(out, "{},0,{g},{h},", layer.name());
        }
        for rec in layer.history() {
            for (g, pr) in rec.pruned.iter().enumerate() {
                alive[g] -= pr.len();
                let list: Vec<String> = pr.iter().map(usize::to_string).collect();
                let _ = writeln!(out, "{},{},{g},{},{}", layer.name(), rec.stage, alive[g], list.join(" "));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(h: usize, n: usize, m: usize, c: usize, seed: u64) -> LGConvLayer<f64> {
        LGConvLayer::new("t", h, n, 3, m, c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn rejects_unequal_groups() {
        let k = Tensor::<f64>::zeros(&[6, 4, 3, 3]);
        assert!(LGConvLayer::from_kernel("x", k, 4, 4, 1).is_err());
    }

    #[test]
    fn dense_layer_cannot_condense() {
        let mut l = layer(4, 4, 2, 1, 0);
        assert!(l.is_fully_condensed());
        assert!(matches!(l.condense(), Err(Error::State(_))));
        assert_eq!(l.alive_weight_count(), l.dense_weight_count());
    }

    #[test]
    fn alive_counts_follow_cumulative_schedule() {
        let mut l = layer(8, 8, 4, 4, 1);
        let mut counts = Vec::new();
        for _ in 0..3 {
            l.condense().unwrap();
            counts.push(l.alive_channels(0).len());
        }
        assert_eq!(counts, vec![6, 4, 2]);
        assert!(matches!(l.condense(), Err(Error::State(_))));
    }

    #[test]
    fn importance_ranking_by_mean_magnitude() {
        // one group, two filters, 1x1 kernel; mean |w| per channel 0.5, 0.1, 0.9
        let k = Tensor::new(vec![2, 3, 1, 1], vec![0.4, -0.1, 0.8, -0.6, 0.1, 1.0]).unwrap();
        let l = LGConvLayer::<f64>::from_kernel("x", k, 1, 3, 0).unwrap();
        let s = &l.importance_scores()[0];
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.1).abs() < 1e-12 && (s[2] - 0.9).abs() < 1e-12);
        let mut order = vec![0, 1, 2];
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn zeroed_channel_pruned_first() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut k = Tensor::<f64>::randn(&[2, 4, 3, 3], 1.0, &mut r);
        for f in 0..2 {
            for j in 0..9 {
                k.data_mut()[(f * 4 + 2) * 9 + j] = 0.0;
            }
        }
        let mut l = LGConvLayer::from_kernel("x", k, 1, 4, 1).unwrap();
        assert_eq!(l.importance_scores()[0][2], 0.0);
        let rec = l.condense().unwrap();
        assert_eq!(rec.pruned, vec![vec![2]]);
        assert_eq!(l.importance_scores()[0][2], f64::NEG_INFINITY);
    }

    #[test]
    fn equal_scores_prune_lower_index() {
        let k = Tensor::<f64>::full(&[1, 4, 1, 1], 1.0);
        let mut l = LGConvLayer::from_kernel("x", k, 1, 2, 0).unwrap();
        assert_eq!(l.condense().unwrap().pruned, vec![vec![0, 1]]);
    }

    #[test]
    fn group_lasso_values() {
        let l = LGConvLayer::<f64>::from_kernel("x", Tensor::zeros(&[2, 3, 3, 3]), 2, 2, 1).unwrap();
        assert_eq!(l.group_lasso_penalty(), 0.0);
        let k = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        let l = LGConvLayer::<f64>::from_kernel("x", k, 1, 1, 0).unwrap();
        assert!((l.group_lasso_penalty() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_boundaries() {
        let s = CondensationSchedule::new(100, 4).unwrap();
        assert_eq!(s.stage_boundaries, vec![16, 33, 50]);
        assert_eq!(s.phase(0).unwrap(), Phase::Condensing(0));
        assert_eq!(s.phase(15).unwrap(), Phase::Condensing(0));
        assert_eq!(s.phase(16).unwrap(), Phase::Condensing(1));
        assert_eq!(s.phase(49).unwrap(), Phase::Condensing(2));
        assert_eq!(s.phase(50).unwrap(), Phase::Optimization);
        assert_eq!(s.phase(99).unwrap(), Phase::Optimization);
        assert!(s.phase(100).is_err());
        let fired: Vec<usize> = (0..100).filter_map(|e| s.fires_at(e)).collect();
        assert_eq!(fired, vec![1, 2, 3]);

        let dense = CondensationSchedule::new(10, 1).unwrap();
        assert!(dense.stage_boundaries.is_empty());
        assert!((0..10).all(|e| dense.phase(e).unwrap() == Phase::Optimization));

        assert!(CondensationSchedule::new(4, 4).is_err());
    }

    #[test]
    fn inference_conversion_of_dense_layer_is_identity() {
        let l = layer(5, 4, 2, 1, 4);
        let inf = l.to_inference().unwrap();
        assert!(inf.index.iter().all(|ix| *ix == vec![0, 1, 2, 3, 4]));
        assert_eq!(inf.grouped_kernel.data(), l.kernel().data());
    }

    #[test]
    fn inference_weight_count_reduction() {
        let mut l = layer(8, 8, 4, 4, 5);
        assert!(l.to_inference().is_err());
        for _ in 0..3 {
            l.condense().unwrap();
        }
        let inf = l.to_inference().unwrap();
        assert_eq!(inf.grouped_kernel.shape(), &[8, 2, 3, 3]);
        assert_eq!(inf.weight_count(), 144);
        assert_eq!(l.dense_weight_count(), 576);
        assert_eq!(inf.weight_count(), l.alive_weight_count());
    }

    #[test]
    fn prune_report_lists_every_stage() {
        let mut l = layer(8, 8, 4, 4, 6);
        for _ in 0..3 {
            l.condense().unwrap();
        }
        let csv = prune_report_csv(&[&l]);
        assert_eq!(csv.lines().count(), 1 + 4 * 4);
        assert!(csv.lines().last().unwrap().starts_with("t,3,3,2,"));
    }
}
