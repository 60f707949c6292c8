//! Ranking and thresholded classification metrics.

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.is_empty() {
        return Err(Error::Usage("metrics need at least one score".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("scores contain NaN".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

fn require_both(pos: usize, neg: usize, what: &str) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("{what} needs both classes ({pos} positive, {neg} negative)")));
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Area under the ROC curve as the Mann–Whitney statistic, computed from
/// mid-ranks: `(R₊ − n₊(n₊+1)/2) / (n₊·n₋)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    require_both(pos, neg, "AUC")?;
    let order = ascending(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid * tied_pos as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC vertices from the highest threshold down, one per distinct score,
/// starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    require_both(pos, neg, "ROC")?;
    let order = ascending(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut j = order.len();
    while j > 0 {
        let mut i = j - 1;
        while i > 0 && scores[order[i - 1]] == scores[order[j - 1]] {
            i -= 1;
        }
        for &k in &order[i..j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        j = i;
    }
    Ok(points)
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// The six reported metrics plus the ROC curve.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc: Vec<(f64, f64)>,
    pub threshold: f64,
    pub confusion: Confusion,
    /// Metrics whose denominator was zero; they are reported as 0.
    pub undefined: Vec<&'static str>,
}

pub const METRIC_NAMES: [&str; 6] = ["auc", "accuracy", "specificity", "precision", "recall", "f1"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 6] {
        [self.auc, self.accuracy, self.specificity, self.precision, self.recall, self.f1]
    }
}

/// Thresholded metrics at `threshold` (prediction = score ≥ threshold) from
/// a confusion matrix. AUC and ROC are left empty.
pub fn thresholded(c: Confusion, threshold: f64) -> MetricsReport {
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &'static str| {
        if den == 0 {
            undefined.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy");
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity");
    let precision = ratio(c.tp, c.tp + c.fp, "precision");
    let recall = ratio(c.tp, c.tp + c.fn_, "recall");
    let f1 = if precision + recall > 0.0 && !undefined.contains(&"precision") && !undefined.contains(&"recall") {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1");
        0.0
    };
    MetricsReport {
        auc: 0.0,
        accuracy,
        specificity,
        precision,
        recall,
        f1,
        roc: Vec::new(),
        threshold,
        confusion: c,
        undefined,
    }
}

pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    check_inputs(scores, labels)?;
    let mut report = thresholded(Confusion::from_scores(scores, labels, threshold), threshold);
    report.auc = auc(scores, labels)?;
    report.roc = roc_points(scores, labels)?;
    Ok(report)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in points {
        out.push_str(&format!("{},{}\n", fmt_sig(*f), fmt_sig(*t)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.8, 0.3], &[1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.2, 0.3], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_points(&[0.9, 0.1], &[1, 0]).unwrap(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let ties = roc_points(&[0.5; 4], &[1, 0, 0, 1]).unwrap();
        assert_eq!(ties, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(trapezoid(&ties), 0.5);
        assert!((trapezoid(&roc_points(&[0.8, 0.8, 0.3], &[1, 0, 0]).unwrap()) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn confusion_arithmetic() {
        let r = thresholded(Confusion { tp: 3, fp: 1, tn: 4, fn_: 2 }, 0.5);
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.6);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.7);
        assert_eq!(r.specificity, 0.8);
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn perfect_and_all_positive() {
        let r = compute_metrics(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(r.values(), [1.0; 6]);
        let r = compute_metrics(&[0.9, 0.8, 0.7, 0.6], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((r.accuracy, r.specificity, r.recall), (0.5, 0.0, 1.0));
        let none = compute_metrics(&[0.1, 0.2, 0.3, 0.05], &[1, 0, 1, 0], 0.5).unwrap();
        assert!(none.undefined.contains(&"precision") && none.undefined.contains(&"f1"));
        assert_eq!(none.precision, 0.0);
    }

    #[test]
    fn formatting() {
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(0.123456789), "0.123457");
        assert_eq!(fmt_sig(12.0), "12");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.0), "0");
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
