//! The training loop.
//!
//! Every batch starts from Input-1 stacks. A uniform draw `z` decides whether
//! the batch is refined: a no-update evaluation pass produces the first
//! prediction, the scripted user draws edits against the ground truth, and
//! the batch is rebuilt as Input-2 stacks. The loss is taken on the
//! training-mode forward pass of whichever stacks the batch ended up with.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use longiseg_core::editsim::{simulate_edits, DEFAULT_EDIT_CAP};
use longiseg_core::{InputScheme, InputStack, LabelSlice, Lesion, ProbSlice};
use longiseg_model::{mse_loss, Adam, AdamConfig, CheckpointMeta, Element, Mode, Network, Tensor};

use crate::dataset::{all_slices, ensure_disjoint, PatientVolumes, SliceRef};
use crate::error::{Result, TrainError};
use crate::segmenter::{Pass, PASS_BANKS};
use crate::stacks::{gt_slice, labels_flat, slice_stack, stacks_to_tensor, tensor_to_probs, Refinement};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub amsgrad: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability that a batch takes the two-pass refinement path.
    pub refine_probability: f64,
    pub seed: u64,
    pub scheme: InputScheme,
    /// Slices drawn per epoch; `None` uses every training slice once.
    pub samples_per_epoch: Option<usize>,
    /// Validation slices, a fixed evenly spaced subset; `None` uses all.
    pub val_samples: Option<usize>,
    pub edit_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            amsgrad: true,
            batch_size: 4,
            epochs: 20,
            refine_probability: 0.5,
            seed: 0,
            scheme: InputScheme::Proposed,
            samples_per_epoch: None,
            val_samples: None,
            edit_cap: DEFAULT_EDIT_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.refine_probability) {
            return Err(TrainError::Config(format!(
                "refine_probability {} outside [0, 1]",
                self.refine_probability
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.edit_cap == 0 {
            return Err(TrainError::Config("edit_cap must be positive".into()));
        }
        if self.samples_per_epoch == Some(0) || self.val_samples == Some(0) {
            return Err(TrainError::Config("sample counts must be positive".into()));
        }
        Ok(())
    }

    /// Refine iff `z >= 1 - p`, so `p = 0` never refines and `p = 1` always does.
    pub fn refines(&self, z: f64) -> bool {
        z >= 1.0 - self.refine_probability
    }
}

/// First-pass output kept for an Input-2 batch.
#[derive(Clone, Debug)]
pub struct FirstPass<S> {
    pub prob: ProbSlice<S>,
    pub labels: LabelSlice,
}

/// Network input and targets for one group of same-sized slices.
#[derive(Clone, Debug)]
pub struct TrainBatch<S> {
    pub slices: Vec<SliceRef>,
    pub input: Tensor<S>,
    pub labels: Vec<u8>,
    /// Present when the batch was refined.
    pub first: Option<Vec<FirstPass<S>>>,
}

/// Builds a batch. With `refine`, runs the evaluation pass on Input-1,
/// simulates edits against the ground truth and returns Input-2 stacks that
/// carry that pass's output. `net` is only read.
pub fn build_batch<S: Element>(
    net: &Network<S>,
    patients: &[PatientVolumes<S>],
    slices: &[SliceRef],
    refine: bool,
    scheme: InputScheme,
    edit_cap: usize,
) -> Result<TrainBatch<S>> {
    let mut stacks = Vec::with_capacity(slices.len());
    let mut gts = Vec::with_capacity(slices.len());
    for r in slices {
        let p = &patients[r.patient];
        stacks.push(slice_stack(p, r.plane, r.index, Refinement::default(), scheme)?);
        gts.push(gt_slice(p, r.plane, r.index)?);
    }
    let mut first = None;
    if refine {
        let input = stacks_to_tensor(&stacks)?;
        let probs = tensor_to_probs(&net.predict_bank(&input, Pass::Initial.bank())?)?;
        let mut refined: Vec<InputStack<S>> = Vec::with_capacity(slices.len());
        let mut passes = Vec::with_capacity(slices.len());
        for ((r, prob), gt) in slices.iter().zip(probs).zip(&gts) {
            let labels = prob.labels();
            let edits = simulate_edits(&labels, gt, edit_cap)?;
            let refinement = Refinement {
                prob: Some(&prob),
                labels: Some(&labels),
                edits: Some(&edits),
            };
            refined.push(slice_stack(&patients[r.patient], r.plane, r.index, refinement, scheme)?);
            passes.push(FirstPass { prob, labels });
        }
        stacks = refined;
        first = Some(passes);
    }
    Ok(TrainBatch {
        slices: slices.to_vec(),
        input: stacks_to_tensor(&stacks)?,
        labels: labels_flat(&gts),
        first,
    })
}

/// Aggregated confusion counts per foreground class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct DiceAcc {
    tp: [usize; 2],
    fp: [usize; 2],
    fn_: [usize; 2],
}

impl DiceAcc {
    fn add<S: Element>(&mut self, probs: &Tensor<S>, labels: &[u8]) {
        let [n, c, h, w] = probs.shape();
        let hw = h * w;
        for s in 0..n {
            let p = probs.sample(s);
            for i in 0..hw {
                let mut best = 0;
                for k in 1..c {
                    if p[k * hw + i] > p[best * hw + i] {
                        best = k;
                    }
                }
                let truth = labels[s * hw + i] as usize;
                for l in Lesion::ALL {
                    let (k, ch) = (l.label() as usize, l.channel());
                    match (best == k, truth == k) {
                        (true, true) => self.tp[ch] += 1,
                        (true, false) => self.fp[ch] += 1,
                        (false, true) => self.fn_[ch] += 1,
                        _ => {}
                    }
                }
            }
        }
    }

    fn dice(&self, lesion: Lesion) -> f64 {
        let ch = lesion.channel();
        let denom = 2 * self.tp[ch] + self.fp[ch] + self.fn_[ch];
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp[ch] as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub dice_ggo: f64,
    pub dice_cons: f64,
}

impl EpochLog {
    pub fn mean_dice(&self) -> f64 {
        (self.dice_ggo + self.dice_cons) / 2.0
    }
}

/// Best network and the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub network: Network<S>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<EpochLog>,
    pub refined_batches: usize,
    pub total_batches: usize,
}

impl<S> TrainOutcome<S> {
    /// `epoch,split,loss,dice_ggo,dice_cons`
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,dice_ggo,dice_cons\n");
        for e in &self.history {
            let _ = writeln!(
                out,
                "{},{},{:.8},{:.6},{:.6}",
                e.epoch, e.split, e.loss, e.dice_ggo, e.dice_cons
            );
        }
        out
    }

    pub fn checkpoint_meta(&self, config: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.best_epoch,
            val_metric: Some(self.best_val_dice),
            extra: serde_json::to_value(config).unwrap_or_default(),
        }
    }
}

/// Splits a batch into groups of equal slice shape, keeping order.
fn shape_groups<S: Element>(patients: &[PatientVolumes<S>], batch: &[SliceRef]) -> Vec<Vec<SliceRef>> {
    let mut groups: Vec<([usize; 2], Vec<SliceRef>)> = Vec::new();
    for r in batch {
        let shape = r.plane.slice_shape(patients[r.patient].shape());
        match groups.iter_mut().find(|(s, _)| *s == shape) {
            Some((_, g)) => g.push(*r),
            None => groups.push((shape, vec![*r])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

fn evenly_spaced<T: Copy>(items: &[T], count: Option<usize>) -> Vec<T> {
    match count {
        Some(k) if k < items.len() => (0..k).map(|i| items[i * items.len() / k]).collect(),
        _ => items.to_vec(),
    }
}

/// Loss and aggregated Dice of Input-1 predictions on `slices`.
pub fn validate<S: Element>(
    net: &Network<S>,
    patients: &[PatientVolumes<S>],
    slices: &[SliceRef],
    config: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let mut acc = DiceAcc::default();
    let (mut loss, mut n) = (0.0, 0usize);
    for chunk in slices.chunks(config.batch_size) {
        for group in shape_groups(patients, chunk) {
            let batch = build_batch(net, patients, &group, false, config.scheme, config.edit_cap)?;
            let probs = net.predict(&batch.input)?;
            let (l, _) = mse_loss(&probs, &batch.labels)?;
            loss += l * group.len() as f64;
            n += group.len();
            acc.add(&probs, &batch.labels);
        }
    }
    Ok((loss / n.max(1) as f64, acc.dice(Lesion::Ggo), acc.dice(Lesion::Cons)))
}

fn check_finite(loss: f64, epoch: usize, step: usize, refined: bool) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(longiseg_model::ModelError::NonFiniteLoss {
        loss,
        context: format!("epoch {epoch}, step {step}, refined {refined}"),
    }
    .into())
}

/// Trains `net` and returns the weights with the best validation Dice.
pub fn train<S: Element>(
    net: Network<S>,
    train_set: &[PatientVolumes<S>],
    val_set: &[PatientVolumes<S>],
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("no training patients".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("no validation patients".into()));
    }
    ensure_disjoint(&[train_set, val_set])?;
    for p in train_set.iter().chain(val_set) {
        p.validate()?;
        p.ground_truth()?;
    }

    // Input-1 and Input-2 batches are normalized with separate running statistics
    let banks = net.stat_banks().max(PASS_BANKS);
    let mut net = net.with_stat_banks(banks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            amsgrad: config.amsgrad,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let mut slices = all_slices(train_set);
    let val_slices = evenly_spaced(&all_slices(val_set), config.val_samples);
    let per_epoch = config.samples_per_epoch.unwrap_or(slices.len()).min(slices.len());

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network<S>)> = None;
    let (mut refined_batches, mut total_batches) = (0, 0);
    for epoch in 1..=config.epochs {
        slices.shuffle(&mut rng);
        let mut acc = DiceAcc::default();
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, batch) in slices[..per_epoch].chunks(config.batch_size).enumerate() {
            let z: f64 = rng.random();
            let refine = config.refines(z);
            refined_batches += usize::from(refine);
            total_batches += 1;
            let mut grads: Vec<Option<Tensor<S>>> = vec![None; net.params().len()];
            let mut stats = Vec::new();
            for group in shape_groups(train_set, batch) {
                let tb = build_batch(&net, train_set, &group, refine, config.scheme, config.edit_cap)?;
                let weight = group.len() as f64 / batch.len() as f64;
                let (mut g, out) = net.forward(&tb.input, Mode::Train, true)?;
                let (loss, seed) = mse_loss(g.value(out), &tb.labels)?;
                check_finite(loss, epoch, step, refine)?;
                acc.add(g.value(out), &tb.labels);
                loss_sum += loss * group.len() as f64;
                seen += group.len();
                let w = S::lit(weight);
                let group_grads = g.backward(out, seed.map(|v| v * w))?;
                stats.extend(g.into_batch_stats());
                for (total, gg) in grads.iter_mut().zip(group_grads) {
                    match (total.as_mut(), gg) {
                        (Some(t), Some(gg)) => t.add_assign(&gg),
                        (None, gg) => *total = gg,
                        _ => {}
                    }
                }
            }
            adam.step(net.params_mut(), &grads)?;
            let pass = if refine { Pass::Refine } else { Pass::Initial };
            net.update_bank_stats(pass.bank(), &stats);
        }
        let train_log = EpochLog {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen.max(1) as f64,
            dice_ggo: acc.dice(Lesion::Ggo),
            dice_cons: acc.dice(Lesion::Cons),
        };
        let (vloss, vggo, vcons) = validate(&net, val_set, &val_slices, config)?;
        let val_log = EpochLog {
            epoch,
            split: "val".into(),
            loss: vloss,
            dice_ggo: vggo,
            dice_cons: vcons,
        };
        let score = val_log.mean_dice();
        tracing::info!(
            epoch,
            train_loss = train_log.loss,
            val_loss = vloss,
            val_dice = score,
            "epoch done"
        );
        history.push(train_log);
        history.push(val_log);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, net.clone()));
        }
    }
    let (best_val_dice, best_epoch, network) = match best {
        Some(b) => b,
        None => {
            // zero epochs: the initial weights are the only candidate
            let (_, g, c) = validate(&net, val_set, &val_slices, config)?;
            ((g + c) / 2.0, 0, net)
        }
    };
    Ok(TrainOutcome {
        network,
        best_epoch,
        best_val_dice,
        history,
        refined_batches,
        total_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refine_rule_extremes() {
        let never = TrainConfig {
            refine_probability: 0.0,
            ..TrainConfig::default()
        };
        let always = TrainConfig {
            refine_probability: 1.0,
            ..TrainConfig::default()
        };
        for z in [0.0, 0.3, 0.5, 0.999_999] {
            assert!(!never.refines(z));
            assert!(always.refines(z));
        }
        assert!(TrainConfig::default().refines(0.5));
        assert!(!TrainConfig::default().refines(0.49));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            refine_probability: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn evenly_spaced_subset() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(evenly_spaced(&v, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(evenly_spaced(&v, Some(20)), v);
    }
}
