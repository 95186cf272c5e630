//! Combining member predictions: arithmetic/geometric model averaging and
//! the trainable stacking combiner, plus the named ensemble rosters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvKernelRef, Mode, NodeId, ParamSet, Tape, SCORE_FLOOR};
use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::labelling::{label_map_map, LabelMap};
use crate::tensor::{Real, Tensor};
use crate::topology::NAMED_IDS;
use crate::train::{EpochStats, Optimizer, OptimizerKind, TrainOutcome, DEFAULT_ADAM_LR};

/// Default width of the stacking meta-learner's hidden dense layer.
pub const STACK_HIDDEN_WIDTH: usize = 64;
/// Default epoch budget for stacking training.
pub const STACK_EPOCHS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AveragingMode {
    Arith,
    Geo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Concat,
    Average,
    Add,
}

/// What the stacking model consumes from each member: softmax score maps
/// or the 64-channel tensor feeding the member's classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackInput {
    Normalized,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnsembleMode {
    Averaging { mean: AveragingMode },
    Stacking { input: StackInput, merge: MergeMode, hidden_width: usize },
}

impl EnsembleMode {
    /// Normalized scores / Average merge / Dense meta-learner.
    pub fn nad() -> Self {
        EnsembleMode::Stacking {
            input: StackInput::Normalized,
            merge: MergeMode::Average,
            hidden_width: STACK_HIDDEN_WIDTH,
        }
    }

    /// 64-channel head-input tensors / Concatenate merge / Dense meta-learner.
    pub fn tcd() -> Self {
        EnsembleMode::Stacking {
            input: StackInput::Tensor,
            merge: MergeMode::Concat,
            hidden_width: STACK_HIDDEN_WIDTH,
        }
    }
}

/// The member lists of the named ensembles E4–E13.
pub fn roster(id: &str) -> Result<Vec<&'static str>> {
    let members: Vec<&'static str> = match id {
        "E4" => vec!["UAD", "UMD", "UQD", "UDD"],
        "E5" => vec!["UD", "UAD", "UMD", "UAMD", "UDD2"],
        "E6" => vec!["UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD"],
        "E7" => vec!["UD", "UAD", "UMD", "UAMD", "UVMD", "UQD", "UDD2"],
        "E8" => vec!["FCN", "UD", "UAD", "UMD", "UAMD", "UVMD", "UQD", "UDD2"],
        "E9" => vec!["UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD"],
        "E10" => vec!["UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD", "UDD2"],
        "E11" => {
            vec!["UA", "UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD", "UDD2"]
        }
        "E12" => vec![
            "U1", "UA", "UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD", "UDD2",
        ],
        "E13" => vec![
            "FCN", "U1", "UA", "UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD",
            "UDD2",
        ],
        other => return Err(Error::InvalidArgument(format!("unknown ensemble id '{other}'"))),
    };
    Ok(members)
}

/// A combination recipe: which members, merged how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub id: String,
    pub member_ids: Vec<String>,
    pub mode: EnsembleMode,
}

impl EnsembleSpec {
    /// Expands a named roster (E4–E13) with the given combination mode.
    pub fn named(id: &str, mode: EnsembleMode) -> Result<Self> {
        let member_ids = roster(id)?.into_iter().map(str::to_string).collect();
        let spec = Self { id: id.to_string(), member_ids, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.member_ids.len();
        if !(2..=13).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "ensemble '{}' has {n} members; 2..=13 required",
                self.id
            )));
        }
        if let EnsembleMode::Stacking { hidden_width, .. } = self.mode {
            if hidden_width == 0 {
                return Err(Error::InvalidArgument("hidden width must be positive".into()));
            }
        }
        Ok(())
    }

    /// Member ids that no built-in topology provides (e.g. the FCN slot);
    /// these require an externally supplied score-map source.
    pub fn external_members(&self) -> Vec<&str> {
        self.member_ids
            .iter()
            .map(String::as_str)
            .filter(|id| !NAMED_IDS.contains(id))
            .collect()
    }
}

fn check_members<T: Real>(members: &[Tensor<T>]) -> Result<(usize, usize, usize)> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member map".into()))?;
    let shape = first.shape();
    for m in members {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "member maps disagree: {:?} vs {:?}",
                shape,
                m.shape()
            )));
        }
    }
    Ok(shape)
}

/// Sums after sorting into a canonical order, so the reduction is exactly
/// independent of member order.
fn ordered_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-pixel, per-class arithmetic mean of member score maps.
pub fn average_arith<T: Real>(members: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w, c) = check_members(members)?;
    let r = members.len() as f64;
    let mut out = Tensor::zeros(h, w, c);
    let mut scratch = Vec::with_capacity(members.len());
    for i in 0..h * w * c {
        scratch.clear();
        scratch.extend(members.iter().map(|m| m.data()[i].as_f64()));
        out.data_mut()[i] = T::of(ordered_sum(&mut scratch) / r);
    }
    Ok(out)
}

/// Per-pixel, per-class geometric mean (scores floored at 1e-12, computed
/// in log space), without renormalization.
pub fn average_geo_raw<T: Real>(members: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w, c) = check_members(members)?;
    let r = members.len() as f64;
    let mut out = Tensor::zeros(h, w, c);
    let mut scratch = Vec::with_capacity(members.len());
    for i in 0..h * w * c {
        scratch.clear();
        scratch.extend(members.iter().map(|m| m.data()[i].as_f64().max(SCORE_FLOOR).ln()));
        out.data_mut()[i] = T::of((ordered_sum(&mut scratch) / r).exp());
    }
    Ok(out)
}

/// Geometric mean renormalized per pixel so the output scores sum to 1.
pub fn average_geo<T: Real>(members: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut raw = average_geo_raw(members)?;
    let (h, w, _) = raw.shape();
    for y in 0..h {
        for x in 0..w {
            let sum: f64 = raw.pixel(y, x).iter().map(|v| v.as_f64()).sum();
            for v in raw.pixel_mut(y, x) {
                *v = T::of(v.as_f64() / sum);
            }
        }
    }
    Ok(raw)
}

/// Trainable combiner: merge stage, positionwise dense+ReLU meta-learner,
/// and a positionwise dense+softmax prediction layer.
pub struct StackingModel<T: Real = f32> {
    pub input: StackInput,
    pub merge: MergeMode,
    pub num_members: usize,
    pub member_channels: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
    pub params: ParamSet<T>,
    hidden: ConvKernelRef,
    output: ConvKernelRef,
}

impl<T: Real> StackingModel<T> {
    pub fn build(
        input: StackInput,
        merge: MergeMode,
        num_members: usize,
        member_channels: usize,
        hidden_width: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_members < 2 {
            return Err(Error::InvalidArgument("stacking needs at least 2 members".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if hidden_width == 0 || member_channels == 0 {
            return Err(Error::InvalidArgument("zero-width stacking layer".into()));
        }
        if input == StackInput::Normalized && member_channels != num_classes {
            return Err(Error::InvalidTopology(format!(
                "normalized stacking input needs {num_classes} channels per member, got {member_channels}"
            )));
        }
        let merged = match merge {
            MergeMode::Concat => num_members * member_channels,
            MergeMode::Average | MergeMode::Add => member_channels,
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden =
            ConvKernelRef::create(&mut params, &mut rng, "stack.hidden", 1, 1, merged, hidden_width);
        let output =
            ConvKernelRef::create(&mut params, &mut rng, "stack.out", 1, 1, hidden_width, num_classes);
        Ok(Self {
            input,
            merge,
            num_members,
            member_channels,
            hidden_width,
            num_classes,
            params,
            hidden,
            output,
        })
    }

    /// Builds the stack for an ensemble spec's stacking mode.
    pub fn for_spec(spec: &EnsembleSpec, num_classes: usize, seed: u64) -> Result<Self> {
        match spec.mode {
            EnsembleMode::Stacking { input, merge, hidden_width } => {
                let member_channels = match input {
                    StackInput::Normalized => num_classes,
                    StackInput::Tensor => crate::blocks::DS_HEAD_WIDTH,
                };
                Self::build(
                    input,
                    merge,
                    spec.member_ids.len(),
                    member_channels,
                    hidden_width,
                    num_classes,
                    seed,
                )
            }
            _ => Err(Error::InvalidArgument("spec does not describe a stacking model".into())),
        }
    }

    pub fn merged_width(&self) -> usize {
        match self.merge {
            MergeMode::Concat => self.num_members * self.member_channels,
            MergeMode::Average | MergeMode::Add => self.member_channels,
        }
    }

    /// Records the stack on a tape over already-materialized member nodes
    /// (members are frozen: they enter as constants).
    pub fn forward(&self, tape: &mut Tape<T>, members: &[NodeId]) -> Result<NodeId> {
        self.forward_with(tape, &self.params, members)
    }

    /// `forward` against an external parameter set (used by the gradient
    /// checker, which owns the perturbed parameters).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        members: &[NodeId],
    ) -> Result<NodeId> {
        if members.len() != self.num_members {
            return Err(Error::ShapeMismatch(format!(
                "stack built for {} members, got {}",
                self.num_members,
                members.len()
            )));
        }
        for &m in members {
            let (_, _, c) = tape.value(m).shape();
            if c != self.member_channels {
                return Err(Error::ShapeMismatch(format!(
                    "member has {c} channels, stack expects {}",
                    self.member_channels
                )));
            }
        }
        let merged = match self.merge {
            MergeMode::Concat => tape.concat_channels(members)?,
            MergeMode::Average | MergeMode::Add => {
                let mut acc = members[0];
                for &m in &members[1..] {
                    acc = tape.add(acc, m)?;
                }
                if self.merge == MergeMode::Average {
                    tape.scale(acc, T::of(1.0 / self.num_members as f64))
                } else {
                    acc
                }
            }
        };
        let h = tape.conv2d(params, merged, &self.hidden)?;
        let h = tape.relu(h);
        let o = tape.conv2d(params, h, &self.output)?;
        Ok(tape.softmax_channelwise(o))
    }

    /// Runs the stack over member maps and returns the combined scores.
    pub fn predict(&self, member_maps: &[Tensor<T>]) -> Result<Tensor<T>> {
        check_members(member_maps)?;
        let mut tape = Tape::new(Mode::Eval);
        let nodes: Vec<NodeId> = member_maps.iter().map(|m| tape.constant(m.clone())).collect();
        let out = self.forward(&mut tape, &nodes)?;
        Ok(tape.value(out).clone())
    }
}

/// Hyperparameters for stacking training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StackTrainConfig {
    fn default() -> Self {
        Self { epochs: STACK_EPOCHS, learning_rate: DEFAULT_ADAM_LR, batch_size: 4, seed: 7 }
    }
}

/// One stacking training example: the frozen member outputs for a sample
/// and its ground truth.
pub type StackSample = (Vec<Tensor<f32>>, LabelMap);

fn stack_accuracy(model: &StackingModel<f32>, samples: &[StackSample]) -> Result<f64> {
    let mut correct = 0u64;
    let mut total = 0u64;
    for (members, truth) in samples {
        let scores = model.predict(members)?;
        let pred = label_map_map(&scores);
        correct += pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count() as u64;
        total += pred.data().len() as u64;
    }
    Ok(correct as f64 / total as f64)
}

/// Trains the stacking combiner over frozen member outputs with Adam,
/// keeping the epoch with the highest validation pixel accuracy (training
/// set stands in when no validation samples are given).
pub fn train_stacking(
    model: &mut StackingModel<f32>,
    train: &[StackSample],
    val: &[StackSample],
    config: &StackTrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::MissingData("empty stacking training set".into()));
    }
    if config.batch_size == 0 || config.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument("bad stacking training config".into()));
    }
    let one_hots: Vec<Tensor<f32>> = train
        .iter()
        .map(|(_, m)| m.to_one_hot(model.num_classes))
        .collect::<Result<_>>()?;
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, config.learning_rate, &model.params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grads();
            for &i in batch {
                let mut tape = Tape::new(Mode::Train);
                let nodes: Vec<NodeId> =
                    train[i].0.iter().map(|m| tape.constant(m.clone())).collect();
                let out = model.forward(&mut tape, &nodes)?;
                let loss_node = tape.cross_entropy(out, &one_hots[i])?;
                let loss = tape.scalar(loss_node)?.as_f64();
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite stacking loss at epoch {epoch}")));
                }
                epoch_loss += loss;
                tape.backward(loss_node, &mut model.params)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f32);
            optimizer.step(&mut model.params)?;
        }
        let monitor = if val.is_empty() { train } else { val };
        let val_accuracy = stack_accuracy(model, monitor)?;
        history.push(EpochStats { epoch, train_loss: epoch_loss / train.len() as f64, val_accuracy });
        if best.as_ref().map_or(true, |(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((epoch, _, snapshot)) => {
            model.params.copy_values_from(&snapshot)?;
            Some(epoch)
        }
        None => None,
    };
    Ok(TrainOutcome { history, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_score_maps(seed: u64, r: usize, h: usize, w: usize, c: usize) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..r)
            .map(|_| {
                let mut t = Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(0.01..1.0));
                for y in 0..h {
                    for x in 0..w {
                        let s: f64 = t.pixel(y, x).iter().sum();
                        for v in t.pixel_mut(y, x) {
                            *v /= s;
                        }
                    }
                }
                t
            })
            .collect()
    }

    #[test]
    fn named_rosters_expand_exactly() {
        let cases: [(&str, usize, &str); 10] = [
            ("E4", 4, "UAD"),
            ("E5", 5, "UD"),
            ("E6", 6, "UD"),
            ("E7", 7, "UD"),
            ("E8", 8, "FCN"),
            ("E9", 9, "UD"),
            ("E10", 10, "UD"),
            ("E11", 11, "UA"),
            ("E12", 12, "U1"),
            ("E13", 13, "FCN"),
        ];
        for (id, count, first) in cases {
            let members = roster(id).unwrap();
            assert_eq!(members.len(), count, "{id}");
            assert_eq!(members[0], first, "{id}");
        }
        assert_eq!(roster("E4").unwrap(), vec!["UAD", "UMD", "UQD", "UDD"]);
        assert_eq!(
            roster("E12").unwrap(),
            vec!["U1", "UA", "UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD", "UDD2"]
        );
        assert!(roster("E3").is_err());
        // Only E8 and E13 carry the external FCN slot.
        for id in ["E4", "E5", "E6", "E7", "E9", "E10", "E11", "E12"] {
            assert!(!roster(id).unwrap().contains(&"FCN"), "{id}");
        }
        for id in ["E8", "E13"] {
            assert!(roster(id).unwrap().contains(&"FCN"), "{id}");
        }
    }

    #[test]
    fn spec_validation_and_external_slots() {
        let spec = EnsembleSpec::named("E13", EnsembleMode::Averaging { mean: AveragingMode::Arith })
            .unwrap();
        assert_eq!(spec.external_members(), vec!["FCN"]);
        let spec = EnsembleSpec::named("E4", EnsembleMode::nad()).unwrap();
        assert!(spec.external_members().is_empty());
        let bad = EnsembleSpec {
            id: "tiny".into(),
            member_ids: vec!["UD".into()],
            mode: EnsembleMode::nad(),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = EnsembleSpec::named("E7", EnsembleMode::tcd()).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: EnsembleSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn arithmetic_mean_examples() {
        let a = Tensor::new(1, 1, 2, vec![0.2f64, 0.8]).unwrap();
        let b = Tensor::new(1, 1, 2, vec![0.8f64, 0.2]).unwrap();
        let avg = average_arith(&[a.clone(), b]).unwrap();
        assert!((avg.get(0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((avg.get(0, 0, 1) - 0.5).abs() < 1e-15);
        // Single member: identity.
        let solo = average_arith(&[a.clone()]).unwrap();
        assert_eq!(solo, a);
    }

    #[test]
    fn arithmetic_mean_matches_oracle_and_stays_normalized() {
        let maps = random_score_maps(41, 3, 5, 4, 6);
        let avg = average_arith(&maps).unwrap();
        for y in 0..5 {
            for x in 0..4 {
                let mut sum = 0.0;
                for ch in 0..6 {
                    let expect =
                        (maps[0].get(y, x, ch) + maps[1].get(y, x, ch) + maps[2].get(y, x, ch)) / 3.0;
                    assert!((avg.get(y, x, ch) - expect).abs() < 1e-15);
                    sum += avg.get(y, x, ch);
                }
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn geometric_mean_worked_example() {
        // Raw values share the factor sqrt(0.05): renormalizing gives
        // exactly [3/4, 1/4].
        let a = Tensor::new(1, 1, 2, vec![0.9f64, 0.1]).unwrap();
        let b = Tensor::new(1, 1, 2, vec![0.5f64, 0.5]).unwrap();
        let geo = average_geo(&[a, b]).unwrap();
        assert!((geo.get(0, 0, 0) - 0.75).abs() < 1e-12);
        assert!((geo.get(0, 0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn geometric_mean_of_identical_members_is_that_member() {
        let maps = random_score_maps(43, 1, 4, 4, 5);
        let twice = vec![maps[0].clone(), maps[0].clone()];
        let geo = average_geo(&twice).unwrap();
        for i in 0..geo.len() {
            assert!((geo.data()[i] - maps[0].data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn am_gm_and_argmax_preservation() {
        for seed in 0..10 {
            let maps = random_score_maps(100 + seed, 4, 3, 3, 5);
            let am = average_arith(&maps).unwrap();
            let gm_raw = average_geo_raw(&maps).unwrap();
            let gm = average_geo(&maps).unwrap();
            for i in 0..am.len() {
                assert!(am.data()[i] >= gm_raw.data()[i] - 1e-12, "AM >= GM elementwise");
            }
            assert_eq!(label_map_map(&gm_raw), label_map_map(&gm));
        }
    }

    #[test]
    fn averaging_is_permutation_invariant() {
        let maps = random_score_maps(55, 3, 4, 4, 4);
        let swapped = vec![maps[2].clone(), maps[0].clone(), maps[1].clone()];
        assert_eq!(average_arith(&maps).unwrap(), average_arith(&swapped).unwrap());
        assert_eq!(average_geo(&maps).unwrap(), average_geo(&swapped).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(2, 2, 3);
        let b = Tensor::<f64>::zeros(2, 3, 3);
        assert!(average_arith(&[a.clone(), b.clone()]).is_err());
        assert!(average_geo(&[a, b]).is_err());
    }

    #[test]
    fn stacking_widths_follow_the_merge_mode() {
        // Normalized/average: merged width = class count.
        let nad = StackingModel::<f64>::build(
            StackInput::Normalized,
            MergeMode::Average,
            12,
            12,
            64,
            12,
            1,
        )
        .unwrap();
        assert_eq!(nad.merged_width(), 12);
        // Tensor/concat with 10 members of 64 channels: merged width 640.
        let tcd =
            StackingModel::<f64>::build(StackInput::Tensor, MergeMode::Concat, 10, 64, 64, 12, 1)
                .unwrap();
        assert_eq!(tcd.merged_width(), 640);
        // Normalized input must match the class count.
        assert!(StackingModel::<f64>::build(
            StackInput::Normalized,
            MergeMode::Average,
            3,
            64,
            64,
            12,
            1
        )
        .is_err());
    }

    #[test]
    fn stack_outputs_are_normalized_scores() {
        let maps: Vec<Tensor<f32>> = random_score_maps(77, 3, 4, 4, 5)
            .into_iter()
            .map(|m| m.cast::<f32>())
            .collect();
        let model =
            StackingModel::<f32>::build(StackInput::Normalized, MergeMode::Average, 3, 5, 16, 5, 2)
                .unwrap();
        let out = model.predict(&maps).unwrap();
        assert_eq!(out.shape(), (4, 4, 5));
        for y in 0..4 {
            for x in 0..4 {
                let s: f32 = out.pixel(y, x).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        // Wrong member count rejected.
        assert!(model.predict(&maps[..2]).is_err());
    }

    #[test]
    fn stacking_meta_learner_passes_gradient_checks() {
        use crate::autograd::{gradient_check, GradCheckConfig};
        let maps = random_score_maps(88, 3, 4, 4, 4);
        let truth = LabelMap::from_fn(4, 4, |y, x| ((y + x) % 4) as u8);
        let one_hot: Tensor<f64> = truth.to_one_hot(4).unwrap();
        for merge in [MergeMode::Concat, MergeMode::Average, MergeMode::Add] {
            let model =
                StackingModel::<f64>::build(StackInput::Normalized, merge, 3, 4, 8, 4, 3).unwrap();
            let mut params = model.params.clone();
            let report = gradient_check(
                &mut params,
                |tape, params| {
                    let nodes: Vec<NodeId> =
                        maps.iter().map(|m| tape.constant(m.clone())).collect();
                    let out = model.forward_with(tape, params, &nodes)?;
                    tape.cross_entropy(out, &one_hot)
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.pass, "{merge:?}: {report:?}");
        }
    }

    #[test]
    fn stacking_training_reduces_loss() {
        // Truth follows member 0; the stack must learn to - at least -
        // reproduce it.
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let make_sample = |rng: &mut ChaCha8Rng| -> StackSample {
            let truth = LabelMap::from_fn(4, 4, |_, _| rng.random_range(0..3) as u8);
            let good: Tensor<f32> = Tensor::from_fn(4, 4, 3, |y, x, c| {
                if truth.get(y, x) as usize == c {
                    0.8
                } else {
                    0.1
                }
            });
            let noise_map =
                random_score_maps(rng.random::<u64>(), 1, 4, 4, 3).remove(0).cast::<f32>();
            (vec![good, noise_map], truth)
        };
        let train: Vec<StackSample> = (0..4).map(|_| make_sample(&mut rng)).collect();
        let mut model =
            StackingModel::<f32>::build(StackInput::Normalized, MergeMode::Average, 2, 3, 16, 3, 5)
                .unwrap();
        let config = StackTrainConfig { epochs: 50, ..Default::default() };
        let outcome = train_stacking(&mut model, &train, &[], &config).unwrap();
        assert_eq!(outcome.history.len(), 50);
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
        assert!(outcome.best_epoch.is_some());
    }

    #[test]
    fn zero_epoch_stacking_returns_initialized_model() {
        let maps: Vec<Tensor<f32>> =
            random_score_maps(93, 2, 4, 4, 3).into_iter().map(|m| m.cast::<f32>()).collect();
        let truth = LabelMap::filled(4, 4, 1);
        let mut model =
            StackingModel::<f32>::build(StackInput::Normalized, MergeMode::Add, 2, 3, 8, 3, 6)
                .unwrap();
        let before = model.params.clone();
        let outcome = train_stacking(
            &mut model,
            &[(maps, truth)],
            &[],
            &StackTrainConfig { epochs: 0, ..Default::default() },
        )
        .unwrap();
        assert!(outcome.history.is_empty());
        assert_eq!(outcome.best_epoch, None);
        for id in before.ids() {
            assert_eq!(before.data(id), model.params.data(id));
        }
    }
}
