//! Per-pixel enumeration oracles for the segmentation metrics.

/// `(pixel accuracy, mIoU, AP)` of `pred` against a 0/1 `mask`, counted
/// pixel by pixel. AP is `None` for an empty mask.
pub fn segmentation(pred: &[f64], mask: &[f64]) -> (f64, f64, Option<f64>) {
    let n = pred.len();
    let mut total = 0.0;
    for &v in pred {
        total += v;
    }
    let mean = total / n as f64;
    let bin: Vec<bool> = pred.iter().map(|&v| v > mean).collect();
    let fg: Vec<bool> = mask.iter().map(|&m| m == 1.0).collect();

    let mut agree = 0;
    for i in 0..n {
        if bin[i] == fg[i] {
            agree += 1;
        }
    }
    let accuracy = agree as f64 / n as f64;

    let mut ious = Vec::new();
    for class in [true, false] {
        let (mut i_count, mut u_count) = (0, 0);
        for k in 0..n {
            let a = bin[k] == class;
            let b = fg[k] == class;
            if a && b {
                i_count += 1;
            }
            if a || b {
                u_count += 1;
            }
        }
        ious.push(if u_count == 0 { 1.0 } else { i_count as f64 / u_count as f64 });
    }
    let miou = (ious[0] + ious[1]) / 2.0;

    let positives = fg.iter().filter(|&&f| f).count();
    let ap = (positives > 0).then(|| {
        let mut thresholds: Vec<f64> = pred.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let selected: Vec<usize> = (0..n).filter(|&i| pred[i] >= t).collect();
            let tp = selected.iter().filter(|&&i| fg[i]).count();
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / selected.len() as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    });
    (accuracy, miou, ap)
}
