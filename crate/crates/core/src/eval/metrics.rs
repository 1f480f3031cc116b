use crate::error::{FvitError, Result};
use crate::tensor::Tensor;

fn check(pred: &Tensor, mask: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != mask.shape() {
        return Err(FvitError::dim(op, pred.shape(), mask.shape()));
    }
    Ok(())
}

/// Pixels strictly above the map's mean.
pub fn mean_threshold(pred: &Tensor) -> Vec<bool> {
    let mean = pred.sum() / pred.len() as f64;
    pred.data().iter().map(|&v| v > mean).collect()
}

fn foreground(mask: &Tensor) -> impl Iterator<Item = bool> + '_ {
    mask.data().iter().map(|&m| m > 0.5)
}

/// Agreement ratio `(TP + TN) / n` after mean-thresholding.
pub fn pixel_accuracy(pred: &Tensor, mask: &Tensor) -> Result<f64> {
    check(pred, mask, "pixel_accuracy")?;
    let agree = mean_threshold(pred).into_iter().zip(foreground(mask)).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Mean of foreground and background IoU after mean-thresholding; a class
/// with an empty union scores 1.
pub fn miou(pred: &Tensor, mask: &Tensor) -> Result<f64> {
    check(pred, mask, "miou")?;
    miou_binary(&mean_threshold(pred), mask)
}

/// [`miou`] of an already binary prediction.
pub fn miou_binary(pred: &[bool], mask: &Tensor) -> Result<f64> {
    if pred.len() != mask.len() {
        return Err(FvitError::dim("miou", &[pred.len()], mask.shape()));
    }
    let (mut inter, mut union) = ([0usize; 2], [0usize; 2]);
    for (&p, m) in pred.iter().zip(foreground(mask)) {
        for (c, want) in [(0, false), (1, true)] {
            let (a, b) = (p == want, m == want);
            inter[c] += (a && b) as usize;
            union[c] += (a || b) as usize;
        }
    }
    let iou = |c: usize| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Step-interpolated area under the precision-recall curve, pixels ranked by
/// score with tied scores entering together. `None` when the mask is empty
/// and the scores are not all zero.
pub fn average_precision(scores: &Tensor, mask: &Tensor) -> Result<Option<f64>> {
    check(scores, mask, "average_precision")?;
    let positives = foreground(mask).filter(|&m| m).count();
    if positives == 0 {
        return Ok(scores.data().iter().all(|&s| s == 0.0).then_some(1.0));
    }
    let s = scores.data();
    let fg: Vec<bool> = foreground(mask).collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut sum = CompensatedSum::default();
    let mut i = 0;
    while i < order.len() {
        let level = s[order[i]];
        let before = tp;
        while i < order.len() && s[order[i]] == level {
            tp += fg[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let gained = tp - before;
        if gained > 0 {
            sum.add_ratio((gained * tp) as f64, (seen * positives) as f64);
        }
    }
    Ok(Some(sum.value()))
}

/// Double-word accumulator, so sums of a few exact ratios round once.
#[derive(Default)]
struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    fn add_ratio(&mut self, a: f64, b: f64) {
        let q = a / b;
        let q_err = (-q).mul_add(b, a) / b;
        let t = self.hi + q;
        let bp = t - self.hi;
        let err = (self.hi - (t - bp)) + (q - bp);
        self.hi = t;
        self.lo += err + q_err;
    }

    fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// Trapezoidal area under top-1 accuracy at fractions `0.1, …, 0.9`, divided
/// by the `0.8` span.
pub fn perturbation_auc(accuracies: &[f64]) -> Result<f64> {
    if accuracies.len() != 9 {
        return Err(FvitError::param(format!("need 9 accuracies, got {}", accuracies.len())));
    }
    if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(FvitError::param("accuracies must lie in [0, 1]"));
    }
    // Unit spacing over eight intervals, rescaled to the 0.8-wide span.
    let area: f64 = accuracies.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(area / 8.0)
}
