//! Evaluation metrics: accuracy, detection recall, average best overlap,
//! ROC/AUC, correctly-tracked frames, and wall-clock timing.

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Degenerate("accuracy needs equal-length nonempty inputs".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Outcome of matching proposals to ground truth at an overlap threshold.
#[derive(Debug, Clone)]
pub struct RecallResult {
    pub recall: f64,
    /// Per ground-truth box: the index of the proposal credited to it.
    pub matches: Vec<Option<usize>>,
}

/// Detection recall: a ground-truth box counts as detected iff a proposal
/// overlaps it with IoU >= `overlap_threshold`. Crediting is greedy by IoU
/// and one proposal may satisfy only one ground-truth box. Frames without
/// ground truth score recall 1 by convention.
pub fn detection_recall(
    proposals: &[BoundingBox],
    ground_truth: &[BoundingBox],
    overlap_threshold: f64,
) -> RecallResult {
    if ground_truth.is_empty() {
        return RecallResult {
            recall: 1.0,
            matches: Vec::new(),
        };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        for (gi, g) in ground_truth.iter().enumerate() {
            let overlap = iou(p, g);
            if overlap >= overlap_threshold {
                pairs.push((overlap, pi, gi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut proposal_used = vec![false; proposals.len()];
    let mut matches: Vec<Option<usize>> = vec![None; ground_truth.len()];
    for (_, pi, gi) in pairs {
        if !proposal_used[pi] && matches[gi].is_none() {
            proposal_used[pi] = true;
            matches[gi] = Some(pi);
        }
    }
    let detected = matches.iter().filter(|m| m.is_some()).count();
    RecallResult {
        recall: detected as f64 / ground_truth.len() as f64,
        matches,
    }
}

/// Mean over ground-truth boxes of the best overlap any proposal achieves.
/// Unmatched ground truth contributes zero; empty ground truth is undefined.
pub fn average_best_overlap(ground_truth: &[BoundingBox], proposals: &[BoundingBox]) -> Result<f64> {
    if ground_truth.is_empty() {
        return Err(Error::Degenerate("average best overlap needs ground truth".into()));
    }
    let total: f64 = ground_truth
        .iter()
        .map(|g| proposals.iter().map(|p| iou(p, g)).fold(0.0f64, f64::max))
        .sum();
    Ok(total / ground_truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{:.6},{:.6},{:.6}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

/// ROC curve over sorted unique score thresholds, with the trapezoidal AUC.
/// Tied scores advance both rates at once, which credits ties with half a
/// pairwise win; the AUC therefore equals the probability that a random
/// positive outscores a random negative.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Degenerate("roc needs equal-length nonempty inputs".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate("roc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            threshold,
        });
    }
    let mut auc = 0.0f64;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// Correctly-tracked frames: the fraction of frames whose emitted box
/// overlaps the ground truth at IoU >= `overlap_threshold`. A frame with no
/// emitted box counts as a failure.
pub fn ctf(
    predictions: &[Option<BoundingBox>],
    ground_truth: &[BoundingBox],
    overlap_threshold: f64,
) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Config(format!(
            "tracked {} frames but ground truth has {}",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Degenerate("empty sequence".into()));
    }
    let ok = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, g)| matches!(p, Some(b) if iou(b, g) >= overlap_threshold))
        .count();
    Ok(ok as f64 / predictions.len() as f64)
}

/// Wall-clock statistics of an operation: run once to warm up, then time
/// `repetitions` runs and report mean and standard deviation in
/// milliseconds.
pub fn bench(mut op: impl FnMut(), repetitions: usize) -> Result<(f64, f64)> {
    if repetitions < 2 {
        return Err(Error::Config("bench needs at least 2 repetitions".into()));
    }
    op(); // warm-up excluded
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = std::time::Instant::now();
        op();
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Column-labeled numeric report; every pipeline emits its results through
/// this table so sweeps serialize uniformly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn new(columns: &[&str]) -> Self {
        EvalReport {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "report row arity");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Mean and (population) standard deviation of a slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        let preds: Vec<usize> = (0..20).map(|i| if i == 0 { 99 } else { i }).collect();
        let labels: Vec<usize> = (0..20).collect();
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.95);
        assert!(accuracy(&[], &[]).is_err());
    }

    fn boxes(specs: &[(i64, i64, i64, i64)]) -> Vec<BoundingBox> {
        specs.iter().map(|&(x, y, w, h)| BoundingBox::new(x, y, w, h)).collect()
    }

    #[test]
    fn recall_examples() {
        let gt = boxes(&[(0, 0, 50, 50), (100, 100, 40, 40)]);
        assert_eq!(detection_recall(&gt, &gt, 0.5).recall, 1.0);
        assert_eq!(detection_recall(&[], &gt, 0.5).recall, 0.0);
        assert_eq!(detection_recall(&[], &[], 0.5).recall, 1.0); // empty GT convention
    }

    // Independent greedy matcher: repeatedly scan every remaining pair for
    // the globally best IoU.
    fn recall_oracle(proposals: &[BoundingBox], gt: &[BoundingBox], threshold: f64) -> f64 {
        if gt.is_empty() {
            return 1.0;
        }
        let mut p_used = vec![false; proposals.len()];
        let mut g_used = vec![false; gt.len()];
        let mut detected = 0;
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for pi in 0..proposals.len() {
                for gi in 0..gt.len() {
                    if p_used[pi] || g_used[gi] {
                        continue;
                    }
                    let overlap = iou(&proposals[pi], &gt[gi]);
                    if overlap < threshold {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((b, bpi, bgi)) => {
                            overlap > b || (overlap == b && (pi, gi) < (bpi, bgi))
                        }
                    };
                    if better {
                        best = Some((overlap, pi, gi));
                    }
                }
            }
            match best {
                Some((_, pi, gi)) => {
                    p_used[pi] = true;
                    g_used[gi] = true;
                    detected += 1;
                }
                None => break,
            }
        }
        detected as f64 / gt.len() as f64
    }

    #[test]
    fn recall_matches_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let gt: Vec<BoundingBox> = (0..rng.gen_range(1..5))
                .map(|_| {
                    BoundingBox::new(
                        rng.gen_range(0..100),
                        rng.gen_range(0..100),
                        rng.gen_range(20..60),
                        rng.gen_range(20..60),
                    )
                })
                .collect();
            let proposals: Vec<BoundingBox> = (0..rng.gen_range(0..10))
                .map(|_| {
                    BoundingBox::new(
                        rng.gen_range(0..100),
                        rng.gen_range(0..100),
                        rng.gen_range(20..60),
                        rng.gen_range(20..60),
                    )
                    .with_score(rng.gen())
                })
                .collect();
            let threshold = rng.gen_range(0.2..0.7);
            let fast = detection_recall(&proposals, &gt, threshold).recall;
            let slow = recall_oracle(&proposals, &gt, threshold);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn abo_examples_and_oracle() {
        let gt = boxes(&[(0, 0, 50, 50)]);
        assert_eq!(average_best_overlap(&gt, &gt).unwrap(), 1.0);
        assert!(average_best_overlap(&[], &gt).is_err());
        assert_eq!(average_best_overlap(&gt, &[]).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let gt: Vec<BoundingBox> = (0..rng.gen_range(1..4))
                .map(|_| BoundingBox::new(rng.gen_range(0..80), rng.gen_range(0..80), 30, 30))
                .collect();
            let props: Vec<BoundingBox> = (0..rng.gen_range(0..8))
                .map(|_| BoundingBox::new(rng.gen_range(0..80), rng.gen_range(0..80), 30, 30))
                .collect();
            // naive double loop
            let mut total = 0.0;
            for g in &gt {
                let mut best = 0.0f64;
                for p in &props {
                    best = best.max(iou(p, g));
                }
                total += best;
            }
            let oracle = total / gt.len() as f64;
            assert_eq!(average_best_overlap(&gt, &props).unwrap(), oracle);
        }
    }

    // Pairwise-ranking AUC oracle: ties count half.
    fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
        let mut wins = 0.0f64;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        let perfect = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(perfect.auc, 1.0);
        let ties = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[true, true, false, false]).unwrap();
        assert!((ties.auc - 0.5).abs() < 1e-12);
        let mixed = roc_auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
        assert!((mixed.auc - 0.75).abs() < 1e-12);
        assert!(roc_auc(&[0.5, 0.7], &[true, true]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.gen_range(4..40);
            // quantized scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let curve = roc_auc(&scores, &labels).unwrap();
            assert!(
                (curve.auc - auc_pairwise(&scores, &labels)).abs() < 1e-9,
                "trapezoid {} vs pairwise {}",
                curve.auc,
                auc_pairwise(&scores, &labels)
            );
            // curve monotonicity
            for pair in curve.points.windows(2) {
                assert!(pair[1].fpr >= pair[0].fpr);
                assert!(pair[1].tpr >= pair[0].tpr);
            }
        }
    }

    #[test]
    fn ctf_examples() {
        let gt = boxes(&[(0, 0, 50, 50), (10, 10, 50, 50)]);
        let perfect: Vec<Option<BoundingBox>> = gt.iter().copied().map(Some).collect();
        assert_eq!(ctf(&perfect, &gt, 0.5).unwrap(), 1.0);
        let silent: Vec<Option<BoundingBox>> = vec![None; 2];
        assert_eq!(ctf(&silent, &gt, 0.5).unwrap(), 0.0);
        assert!(ctf(&perfect, &gt[..1], 0.5).is_err());
        // monotone non-increasing in the threshold
        let drifted: Vec<Option<BoundingBox>> = gt
            .iter()
            .map(|b| Some(BoundingBox::new(b.x + 10, b.y, b.w, b.h)))
            .collect();
        let mut last = 1.0f64;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let v = ctf(&drifted, &gt, t).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn bench_reports_stable_timings() {
        let (mean, std) = bench(|| std::thread::sleep(std::time::Duration::from_millis(2)), 5).unwrap();
        assert!(mean >= 2.0, "mean {mean}");
        assert!(std < mean * 0.5, "std {std} vs mean {mean}");
        assert!(bench(|| {}, 1).is_err());
    }

    #[test]
    fn report_csv_schema() {
        let mut report = EvalReport::new(&["threshold", "recall"]);
        report.push(vec![0.5, 0.9]);
        report.push(vec![0.6, 0.8]);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("threshold,recall"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(report.column("recall").unwrap(), vec![0.9, 0.8]);
    }

    proptest! {
        #[test]
        fn auc_of_flipped_labels_is_complement(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let auc = roc_auc(&scores, &labels).unwrap().auc;
            let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
            let auc_flipped = roc_auc(&scores, &flipped).unwrap().auc;
            prop_assert!((auc + auc_flipped - 1.0).abs() < 1e-9);
        }

        #[test]
        fn recall_and_abo_grow_with_more_proposals(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<BoundingBox> = (0..3)
                .map(|_| BoundingBox::new(rng.gen_range(0..60), rng.gen_range(0..60), 40, 40))
                .collect();
            let pool: Vec<BoundingBox> = (0..12)
                .map(|_| BoundingBox::new(rng.gen_range(0..60), rng.gen_range(0..60), 40, 40))
                .collect();
            let mut last_recall = 0.0f64;
            let mut last_abo = 0.0f64;
            for k in 0..=pool.len() {
                let subset = &pool[..k];
                let r = detection_recall(subset, &gt, 0.5).recall;
                let a = average_best_overlap(&gt, subset).unwrap();
                prop_assert!(r >= last_recall);
                prop_assert!(a >= last_abo - 1e-12);
                last_recall = r;
                last_abo = a;
            }
        }
    }
}
