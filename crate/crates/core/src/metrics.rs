//! Segmentation statistics: Dice, confusion-derived rates, PSNR, ROC/AUC and
//! binary cross-entropy.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::imaging::BinaryMask;

/// Clamp applied to probabilities before taking logs.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: prediction {0}x{1}, ground truth {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("degenerate ROC: ground truth has a single class")]
    DegenerateRoc,
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f32),
}

/// Per-pixel stone probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, MetricsError> {
        assert_eq!(data.len(), width * height, "probability map size");
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricsError::OutOfRange(bad));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, p: f32) -> Self {
        Self::new(width, height, vec![p; width * height]).expect("constant in range")
    }

    /// A mask viewed as a hard 0/1 probability map.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            data: mask.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Binary prediction: probability at or above one half.
    pub fn predict_mask(&self) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.data.iter().map(|&p| u8::from(p >= 0.5)).collect(),
        )
        .expect("values are 0/1")
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusionReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    same_dims((pred.width(), pred.height()), (gt.width(), gt.height()))?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl ConfusionCounts {
    /// `2|P∩G| / (|P|+|G|)`, 1.0 when both are empty.
    pub fn dice(&self) -> f64 {
        ratio_or_one(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn report(&self) -> ConfusionReport {
        ConfusionReport {
            counts: *self,
            accuracy: ratio_or_one(self.tp + self.tn, self.total()),
            iou: ratio_or_one(self.tp, self.tp + self.fp + self.fn_),
            precision: ratio_or_one(self.tp, self.tp + self.fp),
            recall: ratio_or_one(self.tp, self.tp + self.fn_),
        }
    }
}

/// Sørensen–Dice overlap; two empty masks score 1.0.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    Ok(confusion_counts(pred, gt)?.dice())
}

pub fn confusion_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionReport, MetricsError> {
    Ok(confusion_counts(pred, gt)?.report())
}

/// Peak signal-to-noise ratio with peak 1.0. A perfect prediction yields
/// `f64::INFINITY`.
pub fn psnr(pred: &ProbabilityMap, gt: &BinaryMask) -> Result<f64, MetricsError> {
    same_dims((pred.width, pred.height), (gt.width(), gt.height()))?;
    let sse: f64 = pred
        .data
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum();
    let mse = sse / pred.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean pixel BCE with probabilities clamped to `[ε, 1-ε]`.
pub fn bce(pred: &ProbabilityMap, gt: &BinaryMask) -> Result<f64, MetricsError> {
    same_dims((pred.width, pred.height), (gt.width(), gt.height()))?;
    let total: f64 = pred
        .data
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| pixel_bce(p as f64, g != 0))
        .sum();
    Ok(total / pred.data.len() as f64)
}

#[inline]
fn pixel_bce(p: f64, positive: bool) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate), from (0,0) to (1,1) with
    /// the threshold descending.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over every distinct score as a threshold; equal scores move together.
pub fn roc_auc(pred: &ProbabilityMap, gt: &BinaryMask) -> Result<RocCurve, MetricsError> {
    same_dims((pred.width, pred.height), (gt.width(), gt.height()))?;
    roc_from_scores(pred.data.iter().copied().zip(gt.data().iter().map(|&g| g != 0)))
}

/// ROC from arbitrary (score, label) pairs; used for pooling across frames.
pub fn roc_from_scores(pairs: impl IntoIterator<Item = (f32, bool)>) -> Result<RocCurve, MetricsError> {
    let mut scored: Vec<(f32, bool)> = pairs.into_iter().collect();
    let positives = scored.iter().filter(|s| s.1).count() as u64;
    let negatives = scored.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateRoc);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of (1/P)(1/N)
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < scored.len() {
        let score = scored[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < scored.len() && scored[i].0 == score {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / n, tp as f64 / p));
    }
    let auc = twice_area as f64 / (2.0 * p * n);
    Ok(RocCurve { points, auc })
}

/// Serializes infinities as the string `"inf"` (JSON has no infinity).
pub mod inf_as_string {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "inf" => Ok(f64::INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!("bad number {s}"))),
        }
    }
}

/// Every statistic for a single frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub confusion: ConfusionReport,
    pub dice: f64,
    pub psnr: f64,
    /// `None` when the ground truth holds one class only.
    pub auc: Option<f64>,
    pub bce: f64,
}

pub fn frame_metrics(prob: &ProbabilityMap, gt: &BinaryMask) -> Result<FrameMetrics, MetricsError> {
    let counts = confusion_counts(&prob.predict_mask(), gt)?;
    Ok(FrameMetrics {
        confusion: counts.report(),
        dice: counts.dice(),
        psnr: psnr(prob, gt)?,
        auc: match roc_auc(prob, gt) {
            Ok(r) => Some(r.auc),
            Err(MetricsError::DegenerateRoc) => None,
            Err(e) => return Err(e),
        },
        bce: bce(prob, gt)?,
    })
}

/// Machine-readable metric summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub accuracy: f64,
    pub iou: f64,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    /// Equal to `auc_mean`.
    pub auc: f64,
    pub bce: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Mean of per-frame AUCs over frames with both classes present.
    pub auc_mean: f64,
    /// AUC of all pixels pooled across frames.
    pub auc_pooled: f64,
    pub frames: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(w, bits.len() / w, bits.to_vec()).unwrap()
    }

    fn pairwise_auc(scores: &[f32], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0f64, 0.0f64);
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, &[1, 1, 0, 0, 0, 1, 1, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(4, &[0, 0, 1, 1, 1, 0, 0, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let p = mask(4, &[1, 1, 0, 0, 0, 0, 0, 0]);
        let g = mask(4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        assert!((dice(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = BinaryMask::zeros(4, 2);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(
            dice(&empty, &BinaryMask::zeros(2, 4)),
            Err(MetricsError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn confusion_all_ones_vs_half() {
        let pred = BinaryMask::from_fn(8, 8, |_, _| true);
        let gt = BinaryMask::from_fn(8, 8, |x, _| x < 4);
        let r = confusion_metrics(&pred, &gt).unwrap();
        assert_eq!(r.counts, ConfusionCounts { tp: 32, fp: 32, tn: 0, fn_: 0 });
        assert_eq!((r.accuracy, r.recall, r.precision, r.iou), (0.5, 1.0, 0.5, 0.5));
        let same = confusion_metrics(&gt, &gt).unwrap();
        assert_eq!((same.accuracy, same.iou), (1.0, 1.0));
    }

    #[test]
    fn psnr_cases() {
        let gt = BinaryMask::from_fn(5, 5, |x, y| (x + y) % 3 == 0);
        assert_eq!(psnr(&ProbabilityMap::from_mask(&gt), &gt).unwrap(), f64::INFINITY);
        let half = psnr(&ProbabilityMap::constant(5, 5, 0.5), &gt).unwrap();
        assert!((half - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((half - 6.0206).abs() < 1e-4);
        let inv = BinaryMask::from_fn(5, 5, |x, y| !gt.get(x, y));
        assert_eq!(psnr(&ProbabilityMap::from_mask(&inv), &gt).unwrap(), 0.0);
    }

    #[test]
    fn bce_cases() {
        let gt = BinaryMask::from_fn(4, 4, |x, _| x % 2 == 0);
        let perfect = bce(&ProbabilityMap::from_mask(&gt), &gt).unwrap();
        assert!((perfect - -(1.0 - BCE_EPSILON).ln()).abs() < 1e-15);
        assert!(perfect < 1.1e-7);
        let half = bce(&ProbabilityMap::constant(4, 4, 0.5), &gt).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let one = bce(
            &ProbabilityMap::new(1, 1, vec![0.9]).unwrap(),
            &BinaryMask::new(1, 1, vec![1]).unwrap(),
        )
        .unwrap();
        assert!((one - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn roc_extremes() {
        let gt = BinaryMask::from_fn(6, 6, |x, y| x > y);
        let perfect = roc_auc(&ProbabilityMap::from_mask(&gt), &gt).unwrap();
        assert_eq!(perfect.auc, 1.0);
        assert_eq!(perfect.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(perfect.points.last(), Some(&(1.0, 1.0)));
        let inv = BinaryMask::from_fn(6, 6, |x, y| x <= y);
        assert_eq!(roc_auc(&ProbabilityMap::from_mask(&inv), &gt).unwrap().auc, 0.0);
        assert_eq!(
            roc_auc(&ProbabilityMap::constant(6, 6, 0.3), &BinaryMask::zeros(6, 6)),
            Err(MetricsError::DegenerateRoc)
        );
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            // coarse scores force ties
            let scores: Vec<f32> = (0..256).map(|_| rng.random_range(0..20) as f32 / 19.0).collect();
            let labels: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(0.4))).collect();
            let pm = ProbabilityMap::new(16, 16, scores.clone()).unwrap();
            let gt = BinaryMask::new(16, 16, labels.clone()).unwrap();
            let roc = roc_auc(&pm, &gt).unwrap();
            let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            assert!((roc.auc - pairwise_auc(&scores, &bools)).abs() <= 1e-12);
            for w in roc.points.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn report_serializes_inf() {
        let r = MetricReport {
            dice: 1.0,
            accuracy: 1.0,
            iou: 1.0,
            psnr: f64::INFINITY,
            auc: 1.0,
            bce: 0.0,
            tp: 1,
            fp: 0,
            tn: 3,
            fn_: 0,
            auc_mean: 1.0,
            auc_pooled: 1.0,
            frames: 1,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"psnr\":\"inf\""));
        assert!(s.contains("\"fn\":0"));
        assert_eq!(serde_json::from_str::<MetricReport>(&s).unwrap(), r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
            (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
                (
                    proptest::collection::vec(0u8..2, w * h),
                    proptest::collection::vec(0u8..2, w * h),
                )
                    .prop_map(move |(a, b)| (BinaryMask::new(w, h, a).unwrap(), BinaryMask::new(w, h, b).unwrap()))
            })
        }

        proptest! {
            #[test]
            fn dice_symmetric_and_bounded((a, b) in pair()) {
                let d = dice(&a, &b).unwrap();
                prop_assert_eq!(d, dice(&b, &a).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
            }

            #[test]
            fn dice_iou_identity((a, b) in pair()) {
                let r = confusion_metrics(&a, &b).unwrap();
                prop_assert_eq!(r.counts.total() as usize, a.width() * a.height());
                let d = dice(&a, &b).unwrap();
                prop_assert!((d - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
            }

            #[test]
            fn bce_minimized_at_truth((_, gt) in pair(), seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = gt.width() * gt.height();
                let p = ProbabilityMap::new(gt.width(), gt.height(), (0..n).map(|_| rng.random()).collect()).unwrap();
                prop_assert!(bce(&p, &gt).unwrap() >= bce(&ProbabilityMap::from_mask(&gt), &gt).unwrap());
            }
        }
    }
}
