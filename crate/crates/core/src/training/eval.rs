//! Hold-out evaluation: per-frame statistics averaged over a split.

use super::{forward_maps, Dataset, TrainError};
use crate::imaging::BinaryMask;
use crate::metrics::{self, ConfusionCounts, MetricReport, MetricsError, ProbabilityMap};
use crate::nnet::{Checkpoint, Model};

/// Probability maps for every sample, in order.
pub fn predict_dataset(model: &Model<f32>, data: &Dataset) -> Result<Vec<ProbabilityMap>, TrainError> {
    forward_maps(model, data)
}

/// Averages per-frame Dice, accuracy, IoU and BCE; sums confusion counts;
/// reports PSNR of the mean squared error over all frames. AUC is given
/// both as the mean of per-frame AUCs (frames holding both classes) and
/// pooled over every pixel.
pub fn evaluate_predictions(probs: &[ProbabilityMap], gts: &[BinaryMask]) -> Result<MetricReport, TrainError> {
    if probs.is_empty() {
        return Err(TrainError::Data("cannot evaluate an empty split".into()));
    }
    if probs.len() != gts.len() {
        return Err(TrainError::Data(format!("{} predictions for {} masks", probs.len(), gts.len())));
    }
    let n = probs.len() as f64;
    let (mut dice, mut acc, mut iou, mut bce, mut sq, mut px) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    let (mut auc_sum, mut auc_frames) = (0.0, 0usize);
    let mut counts = ConfusionCounts::default();
    for (p, g) in probs.iter().zip(gts) {
        let fm = metrics::frame_metrics(p, g)?;
        dice += fm.dice;
        acc += fm.confusion.accuracy;
        iou += fm.confusion.iou;
        bce += fm.bce;
        counts.add(&fm.confusion.counts);
        if let Some(a) = fm.auc {
            auc_sum += a;
            auc_frames += 1;
        }
        sq += p
            .data()
            .iter()
            .zip(g.data())
            .map(|(&q, &y)| (q as f64 - y as f64).powi(2))
            .sum::<f64>();
        px += g.data().len();
    }
    let mse = sq / px as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    let pooled = metrics::roc_from_scores(
        probs
            .iter()
            .zip(gts)
            .flat_map(|(p, g)| p.data().iter().copied().zip(g.data().iter().map(|&b| b != 0))),
    );
    let auc_pooled = match pooled {
        Ok(r) => r.auc,
        Err(MetricsError::DegenerateRoc) => f64::NAN,
        Err(e) => return Err(e.into()),
    };
    let auc_mean = if auc_frames > 0 { auc_sum / auc_frames as f64 } else { auc_pooled };
    Ok(MetricReport {
        dice: dice / n,
        accuracy: acc / n,
        iou: iou / n,
        psnr,
        auc: auc_mean,
        bce: bce / n,
        tp: counts.tp,
        fp: counts.fp,
        tn: counts.tn,
        fn_: counts.fn_,
        auc_mean,
        auc_pooled,
        frames: probs.len(),
    })
}

pub fn evaluate_model(ckpt: &Checkpoint, data: &Dataset) -> Result<MetricReport, TrainError> {
    let probs = predict_dataset(&ckpt.model, data)?;
    let gts: Vec<BinaryMask> = data.samples.iter().map(|s| s.mask.clone()).collect();
    evaluate_predictions(&probs, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks() -> Vec<BinaryMask> {
        vec![
            BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 2),
            BinaryMask::from_fn(8, 8, |x, _| x >= 6),
            BinaryMask::from_fn(8, 8, |x, y| x + y < 5),
        ]
    }

    #[test]
    fn perfect_predictions() {
        let gts = masks();
        let probs: Vec<_> = gts.iter().map(ProbabilityMap::from_mask).collect();
        let r = evaluate_predictions(&probs, &gts).unwrap();
        assert_eq!(r.dice, 1.0);
        assert_eq!(r.iou, 1.0);
        assert!(r.bce < 1e-6);
        assert!(r.psnr.is_infinite());
        assert_eq!(r.auc_mean, 1.0);
        assert_eq!(r.auc_pooled, 1.0);
        assert_eq!(r.fp + r.fn_, 0);
    }

    #[test]
    fn constant_half_model() {
        let gts = masks();
        let probs: Vec<_> = gts.iter().map(|_| ProbabilityMap::constant(8, 8, 0.5)).collect();
        let r = evaluate_predictions(&probs, &gts).unwrap();
        // everything is predicted foreground: dice = 2|G| / (|G| + 64) per frame
        let expected: f64 = gts
            .iter()
            .map(|g| 2.0 * g.count_ones() as f64 / (g.count_ones() as f64 + 64.0))
            .sum::<f64>()
            / 3.0;
        assert!((r.dice - expected).abs() < 1e-12);
        assert!((r.bce - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(r.auc_mean, 0.5);
        assert!((r.psnr - 10.0 * 4f64.log10()).abs() < 1e-9);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("fn").is_some() && json.get("auc_pooled").is_some());
    }

    #[test]
    fn empty_split_rejected() {
        assert!(evaluate_predictions(&[], &[]).is_err());
    }
}
