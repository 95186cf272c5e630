//! Pixel labelling rules, confusion counting, IoU metrics, and per-class
//! threshold tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Dense per-pixel class assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        Self { h, w, data: vec![class; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.w + x] = class;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Expands to an H×W×num_classes tensor with a single 1 per pixel.
    pub fn to_one_hot<T: Real>(&self, num_classes: usize) -> Result<Tensor<T>> {
        if num_classes < 2 || num_classes > 256 {
            return Err(Error::InvalidArgument(format!(
                "one-hot needs 2..=256 classes, got {num_classes}"
            )));
        }
        let mut out = Tensor::zeros(self.h, self.w, num_classes);
        for (i, &label) in self.data.iter().enumerate() {
            if label as usize >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            out.data_mut()[i * num_classes + label as usize] = T::one();
        }
        Ok(out)
    }

    /// Collapses a strictly one-hot tensor back to class indices. Errors if
    /// any pixel is not exactly one 1 and the rest 0.
    pub fn from_one_hot<T: Real>(t: &Tensor<T>) -> Result<LabelMap> {
        let (h, w, c) = t.shape();
        if c > 256 {
            return Err(Error::InvalidArgument(format!("too many channels for labels: {c}")));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let px = t.pixel(y, x);
                let mut hot: Option<u8> = None;
                for (ch, &v) in px.iter().enumerate() {
                    if v == T::one() {
                        if hot.is_some() {
                            return Err(Error::InvalidArgument(format!(
                                "pixel ({y},{x}) has more than one active channel"
                            )));
                        }
                        hot = Some(ch as u8);
                    } else if v != T::zero() {
                        return Err(Error::InvalidArgument(format!(
                            "pixel ({y},{x}) channel {ch} is neither 0 nor 1"
                        )));
                    }
                }
                match hot {
                    Some(ch) => data.push(ch),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "pixel ({y},{x}) has no active channel"
                        )))
                    }
                }
            }
        }
        LabelMap::new(h, w, data)
    }
}

/// One tuned acceptance threshold per target class; the background class
/// (index 0) has none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub num_classes: usize,
    /// Entry `c - 1` is the threshold of target class `c`.
    pub thresholds: Vec<f64>,
}

impl ClassThresholds {
    pub fn uniform(num_classes: usize, value: f64) -> Self {
        Self { num_classes, thresholds: vec![value; num_classes.saturating_sub(1)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.thresholds.len() != self.num_classes - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} classes need {} thresholds, got {}",
                self.num_classes,
                self.num_classes - 1,
                self.thresholds.len()
            )));
        }
        Ok(())
    }

    /// Threshold of a target class (1-based; class 0 has no threshold).
    pub fn get(&self, class: usize) -> f64 {
        self.thresholds[class - 1]
    }

    pub fn set(&mut self, class: usize, value: f64) {
        self.thresholds[class - 1] = value;
    }
}

/// The candidate threshold grid: 0.05 to 0.95 in steps of 0.05.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Rule for turning score maps into label maps.
#[derive(Clone, Debug)]
pub enum LabelRule {
    /// Per-pixel argmax.
    Map,
    /// Score-ordered visiting with per-class acceptance thresholds.
    Th(ClassThresholds),
}

impl LabelRule {
    pub fn apply<T: Real>(&self, scores: &Tensor<T>) -> Result<LabelMap> {
        match self {
            LabelRule::Map => Ok(label_map_map(scores)),
            LabelRule::Th(th) => label_map_th(scores, th),
        }
    }
}

/// Maximum-a-posteriori labelling: each pixel takes the class with the
/// highest score; ties go to the lowest class index.
pub fn label_map_map<T: Real>(scores: &Tensor<T>) -> LabelMap {
    let (h, w, _) = scores.shape();
    LabelMap::from_fn(h, w, |y, x| {
        let px = scores.pixel(y, x);
        let mut best = 0usize;
        for (c, &v) in px.iter().enumerate().skip(1) {
            if v > px[best] {
                best = c;
            }
        }
        best as u8
    })
}

/// Threshold labelling: classes are visited in descending score order
/// (ties by ascending index). Background is accepted unconditionally when
/// reached; a target class is accepted iff its score is at least its
/// threshold. If no class accepts, the pixel falls back to background.
pub fn label_map_th<T: Real>(scores: &Tensor<T>, thresholds: &ClassThresholds) -> Result<LabelMap> {
    thresholds.validate()?;
    let (h, w, c) = scores.shape();
    if thresholds.num_classes != c {
        return Err(Error::ShapeMismatch(format!(
            "thresholds cover {} classes, scores have {c}",
            thresholds.num_classes
        )));
    }
    let mut order: Vec<usize> = Vec::with_capacity(c);
    let mut out = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let px = scores.pixel(y, x);
            order.clear();
            order.extend(0..c);
            order.sort_by(|&a, &b| {
                px[b].partial_cmp(&px[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            let mut label = 0u8;
            for &cls in &order {
                if cls == 0 {
                    label = 0;
                    break;
                }
                if px[cls].as_f64() >= thresholds.get(cls) {
                    label = cls as u8;
                    break;
                }
            }
            out.set(y, x, label);
        }
    }
    Ok(out)
}

/// Per-class pixel tallies: correct predictions, ground-truth pixels, and
/// predicted pixels. Additive across images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    correct: Vec<u64>,
    truth: Vec<u64>,
    predicted: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            correct: vec![0; num_classes],
            truth: vec![0; num_classes],
            predicted: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.correct.len()
    }

    /// Pixels of class `c` predicted as class `c`.
    pub fn m_cc(&self, c: usize) -> u64 {
        self.correct[c]
    }

    /// Ground-truth pixels of class `c`.
    pub fn t_c(&self, c: usize) -> u64 {
        self.truth[c]
    }

    /// Pixels predicted as class `c`.
    pub fn m_c(&self, c: usize) -> u64 {
        self.predicted[c]
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.num_classes(), other.num_classes());
        for c in 0..self.correct.len() {
            self.correct[c] += other.correct[c];
            self.truth[c] += other.truth[c];
            self.predicted[c] += other.predicted[c];
        }
    }
}

/// Tallies prediction/truth agreement per class over one image pair.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut counts = ConfusionCounts::new(num_classes);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        counts.predicted[p] += 1;
        counts.truth[t] += 1;
        if p == t {
            counts.correct[p] += 1;
        }
    }
    Ok(counts)
}

/// Per-class intersection over union: `m_cc / (t_c + m_c - m_cc)`. The
/// degenerate case (class absent and never predicted) is defined as 1.0.
pub fn iou_per_class(counts: &ConfusionCounts) -> Vec<f64> {
    (0..counts.num_classes())
        .map(|c| {
            let denom = counts.t_c(c) + counts.m_c(c) - counts.m_cc(c);
            if denom == 0 {
                1.0
            } else {
                counts.m_cc(c) as f64 / denom as f64
            }
        })
        .collect()
}

/// Arithmetic mean of per-class IoU over the target classes, or over all
/// classes when `include_background`.
pub fn iou_mean(per_class: &[f64], include_background: bool) -> f64 {
    let slice = if include_background { per_class } else { &per_class[1..] };
    if slice.is_empty() {
        return 0.0;
    }
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// Fraction of pixels labelled identically.
pub fn pixel_accuracy(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::ShapeMismatch("pixel accuracy over unequal shapes".into()));
    }
    let same = pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / pred.data().len() as f64)
}

/// Tunes one acceptance threshold per target class on a labelled tuning
/// set.
///
/// Classes are scanned in index order; for each class the 19-value grid is
/// searched while every other class is held at 0.5, and the value with the
/// best class IoU wins (ties go to the smallest threshold).
pub fn tune_thresholds<T: Real>(
    pairs: &[(Tensor<T>, LabelMap)],
    num_classes: usize,
) -> Result<ClassThresholds> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("threshold tuning needs a non-empty set".into()));
    }
    let grid = threshold_grid();
    let mut tuned = ClassThresholds::uniform(num_classes, 0.5);
    for class in 1..num_classes {
        let mut best_t = grid[0];
        let mut best_iou = f64::NEG_INFINITY;
        for &t in &grid {
            let mut candidate = ClassThresholds::uniform(num_classes, 0.5);
            candidate.set(class, t);
            let mut counts = ConfusionCounts::new(num_classes);
            for (scores, truth) in pairs {
                let pred = label_map_th(scores, &candidate)?;
                counts.merge(&confusion(&pred, truth, num_classes)?);
            }
            let iou = iou_per_class(&counts)[class];
            if iou > best_iou {
                best_iou = iou;
                best_t = t;
            }
        }
        tuned.set(class, best_t);
    }
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores_1px(values: &[f64]) -> Tensor<f64> {
        Tensor::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    fn random_scores(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
        let mut t = Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0));
        for y in 0..h {
            for x in 0..w {
                let sum: f64 = t.pixel(y, x).iter().sum();
                for v in t.pixel_mut(y, x) {
                    *v /= sum;
                }
            }
        }
        t
    }

    #[test]
    fn map_labelling_takes_argmax_with_low_index_ties() {
        assert_eq!(label_map_map(&scores_1px(&[0.1, 0.7, 0.2])).get(0, 0), 1);
        assert_eq!(label_map_map(&scores_1px(&[0.5, 0.5])).get(0, 0), 0);
        assert_eq!(label_map_map(&scores_1px(&[0.2, 0.4, 0.4])).get(0, 0), 1);
    }

    #[test]
    fn map_matches_naive_scan_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores = random_scores(&mut rng, 9, 7, 5);
        let labels = label_map_map(&scores);
        for y in 0..9 {
            for x in 0..7 {
                let px = scores.pixel(y, x);
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (c, &v) in px.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                assert_eq!(labels.get(y, x) as usize, best);
            }
        }
    }

    #[test]
    fn th_labelling_walks_descending_scores() {
        // Class 1 fails its threshold (0.5 < 0.6); class 2 passes (0.3 >= 0.3).
        let mut th = ClassThresholds::uniform(3, 0.5);
        th.set(1, 0.6);
        th.set(2, 0.3);
        let labels = label_map_th(&scores_1px(&[0.2, 0.5, 0.3]), &th).unwrap();
        assert_eq!(labels.get(0, 0), 2);
    }

    #[test]
    fn th_background_is_accepted_when_reached() {
        // Background ranks first: accepted before any target is considered.
        let th = ClassThresholds::uniform(3, 0.05);
        let labels = label_map_th(&scores_1px(&[0.6, 0.3, 0.1]), &th).unwrap();
        assert_eq!(labels.get(0, 0), 0);
    }

    #[test]
    fn th_falls_back_to_background() {
        // All targets fail and background ranks last: fallback still = 0.
        let th = ClassThresholds::uniform(3, 0.99);
        let labels = label_map_th(&scores_1px(&[0.1, 0.5, 0.4]), &th).unwrap();
        assert_eq!(labels.get(0, 0), 0);
    }

    #[test]
    fn th_with_zero_thresholds_equals_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let scores = random_scores(&mut rng, 6, 6, 4);
            let th = ClassThresholds::uniform(4, 0.0);
            assert_eq!(label_map_th(&scores, &th).unwrap(), label_map_map(&scores));
        }
    }

    #[test]
    fn confusion_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pred = LabelMap::from_fn(8, 8, |_, _| rng.random_range(0..4) as u8);
        let truth = LabelMap::from_fn(8, 8, |_, _| rng.random_range(0..4) as u8);
        let counts = confusion(&pred, &truth, 4).unwrap();
        for c in 0..4u8 {
            let m_cc = pred
                .data()
                .iter()
                .zip(truth.data())
                .filter(|(p, t)| **p == c && **t == c)
                .count() as u64;
            let t_c = truth.data().iter().filter(|&&t| t == c).count() as u64;
            let m_c = pred.data().iter().filter(|&&p| p == c).count() as u64;
            assert_eq!(counts.m_cc(c as usize), m_cc);
            assert_eq!(counts.t_c(c as usize), t_c);
            assert_eq!(counts.m_c(c as usize), m_c);
        }
    }

    #[test]
    fn iou_hand_values() {
        let mut counts = ConfusionCounts::new(2);
        counts.correct = vec![0, 6];
        counts.truth = vec![0, 10];
        counts.predicted = vec![0, 8];
        let iou = iou_per_class(&counts);
        assert_eq!(iou[1], 0.5); // 6 / (10 + 8 - 6)
        assert_eq!(iou[0], 1.0); // degenerate: never present, never predicted
    }

    #[test]
    fn perfect_prediction_gives_unit_iou() {
        let truth = LabelMap::from_fn(4, 4, |y, x| ((y + x) % 3) as u8);
        let counts = confusion(&truth, &truth, 3).unwrap();
        for v in iou_per_class(&counts) {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn iou_mean_respects_background_toggle() {
        let per_class = [1.0, 0.5, 0.5];
        assert_eq!(iou_mean(&per_class, false), 0.5);
        assert!((iou_mean(&per_class, true) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn counts_are_additive_across_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let imgs: Vec<(LabelMap, LabelMap)> = (0..3)
            .map(|_| {
                (
                    LabelMap::from_fn(5, 5, |_, _| rng.random_range(0..3) as u8),
                    LabelMap::from_fn(5, 5, |_, _| rng.random_range(0..3) as u8),
                )
            })
            .collect();
        let mut merged = ConfusionCounts::new(3);
        for (p, t) in &imgs {
            merged.merge(&confusion(p, t, 3).unwrap());
        }
        // Equivalent to counting over the concatenated pixels.
        let all_p = LabelMap::new(15, 5, imgs.iter().flat_map(|(p, _)| p.data().to_vec()).collect()).unwrap();
        let all_t = LabelMap::new(15, 5, imgs.iter().flat_map(|(_, t)| t.data().to_vec()).collect()).unwrap();
        assert_eq!(merged, confusion(&all_p, &all_t, 3).unwrap());
    }

    #[test]
    fn one_hot_conversions_are_inverse() {
        let labels = LabelMap::from_fn(4, 3, |y, x| ((y * 3 + x) % 5) as u8);
        let hot = labels.to_one_hot::<f32>(5).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                let s: f32 = hot.pixel(y, x).iter().sum();
                assert_eq!(s, 1.0);
            }
        }
        assert_eq!(LabelMap::from_one_hot(&hot).unwrap(), labels);
        // Labels outside the class range are rejected.
        assert!(LabelMap::filled(2, 2, 7).to_one_hot::<f32>(5).is_err());
    }

    #[test]
    fn tuning_prefers_smallest_threshold_on_ties() {
        // Perfectly confident scores: every grid value labels identically,
        // so the tie rule must pick 0.05.
        let truth = LabelMap::from_fn(4, 4, |y, _| if y < 2 { 0 } else { 1 });
        let scores = Tensor::from_fn(4, 4, 2, |y, _, c| {
            let on = if y < 2 { 0 } else { 1 };
            if c == on {
                1.0f64
            } else {
                0.0
            }
        });
        let tuned = tune_thresholds(&[(scores, truth)], 2).unwrap();
        assert!((tuned.get(1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn tuning_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pairs: Vec<(Tensor<f64>, LabelMap)> = (0..2)
            .map(|_| {
                let scores = random_scores(&mut rng, 6, 6, 3);
                let truth = LabelMap::from_fn(6, 6, |_, _| rng.random_range(0..3) as u8);
                (scores, truth)
            })
            .collect();
        let tuned = tune_thresholds(&pairs, 3).unwrap();
        // Oracle: independent exhaustive scan per class with others at 0.5.
        for class in 1..3 {
            let mut best_t = 0.05;
            let mut best_iou = f64::NEG_INFINITY;
            for k in 1..=19 {
                let t = k as f64 * 0.05;
                let mut cand = ClassThresholds::uniform(3, 0.5);
                cand.set(class, t);
                let mut counts = ConfusionCounts::new(3);
                for (s, tr) in &pairs {
                    counts.merge(&confusion(&label_map_th(s, &cand).unwrap(), tr, 3).unwrap());
                }
                let iou = iou_per_class(&counts)[class];
                if iou > best_iou {
                    best_iou = iou;
                    best_t = t;
                }
            }
            assert_eq!(tuned.get(class), best_t);
        }
    }

    #[test]
    fn tuning_rejects_empty_set() {
        assert!(tune_thresholds::<f64>(&[], 3).is_err());
    }
}
