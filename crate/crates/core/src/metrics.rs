//! Pure numerical core: confidence binning, binned ECE/MCE estimators,
//! outcome summaries, and Pearson correlation.
//!
//! A model is perfectly calibrated when its stated confidence matches the
//! empirical probability that the associated answer is correct. The binned
//! estimators here measure the deviation from that ideal: outcomes are
//! grouped into `M` equal-width confidence bins, ECE is the density-weighted
//! mean absolute gap between per-bin accuracy and per-bin mean confidence,
//! and MCE is the largest such gap over non-empty bins.
//!
//! Everything in this module is a pure function over immutable inputs and is
//! safe to call concurrently. All arithmetic is double-precision with no
//! streaming shortcuts.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("num_bins must be at least 1")]
    ZeroBins,
    #[error("confidence {0} is outside [0, 100]")]
    ConfidenceOutOfRange(f64),
    #[error("calibration metrics are undefined for an empty diagram")]
    EmptyDiagram,
    #[error("correlation needs at least two points")]
    TooFewPoints,
    #[error("correlation is undefined when a variable has zero variance")]
    DegenerateVariance,
}

/// A self-verbalized confidence estimate.
///
/// Stored internally as the stated percent. Elicited confidences arrive as
/// (usually integer) percents, and binning in percent space keeps boundary
/// values such as 95 in the bin they name; the fraction 0.95 is not exactly
/// representable and would floor one bin low.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceScore {
    percent: f64,
}

impl ConfidenceScore {
    /// Build from a percent in [0, 100].
    pub fn from_percent(percent: f64) -> Result<Self, MetricsError> {
        if percent.is_finite() && (0.0..=100.0).contains(&percent) {
            Ok(Self { percent })
        } else {
            Err(MetricsError::ConfidenceOutOfRange(percent))
        }
    }

    /// Build from a fraction in [0, 1].
    pub fn from_fraction(fraction: f64) -> Result<Self, MetricsError> {
        Self::from_percent(fraction * 100.0)
    }

    pub fn percent(&self) -> f64 {
        self.percent
    }

    /// The confidence as a fraction in [0, 1].
    pub fn value(&self) -> f64 {
        self.percent / 100.0
    }
}

/// One graded question attempt.
///
/// Incomplete outcomes carry no confidence or correctness; they count only
/// toward the completion rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalOutcome {
    Incomplete,
    Completed { confidence: ConfidenceScore, correct: bool },
}

impl EvalOutcome {
    pub fn completed(confidence: ConfidenceScore, correct: bool) -> Self {
        Self::Completed { confidence, correct }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Self::Completed { .. })
    }
}

/// One equal-width confidence bin of a reliability diagram.
///
/// `mean_confidence` and `accuracy` are absent when the bin is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Reliability diagram over `num_bins` equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityDiagram {
    pub num_bins: usize,
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

impl ReliabilityDiagram {
    /// Per-bin sample density, count / total. All zeros when the diagram is
    /// empty.
    pub fn densities(&self) -> Vec<f64> {
        self.bins
            .iter()
            .map(|b| {
                if self.total == 0 {
                    0.0
                } else {
                    b.count as f64 / self.total as f64
                }
            })
            .collect()
    }
}

/// Accuracy and completion over a set of outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSummary {
    pub n_total: usize,
    pub n_completed: usize,
    /// Fraction correct over completed outcomes; absent when none completed.
    pub accuracy: Option<f64>,
    /// Fraction completed over all outcomes; 0 for an empty set.
    pub completion_rate: f64,
}

/// Equal-width bin index for a confidence: floor(value * num_bins), with
/// value = 1.0 clamped into the last bin (bins are left-closed/right-open,
/// the final bin right-closed).
pub fn bin_index(confidence: ConfidenceScore, num_bins: usize) -> Result<usize, MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    // Scale in percent space: stated percents then floor exactly at bin
    // edges where fraction-space arithmetic can land a boundary value one
    // bin low (e.g. 0.95 * 20 < 19 in doubles).
    let scaled = confidence.percent() * num_bins as f64 / 100.0;
    let index = scaled.floor() as usize;
    Ok(index.min(num_bins - 1))
}

/// Bin completed outcomes into a reliability diagram. Incomplete outcomes
/// are excluded before binning.
pub fn build_reliability(
    outcomes: &[EvalOutcome],
    num_bins: usize,
) -> Result<ReliabilityDiagram, MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let mut counts = vec![0usize; num_bins];
    let mut confidence_sums = vec![0.0f64; num_bins];
    let mut correct_counts = vec![0usize; num_bins];
    let mut total = 0usize;

    for outcome in outcomes {
        if let EvalOutcome::Completed { confidence, correct } = outcome {
            let index = bin_index(*confidence, num_bins)?;
            counts[index] += 1;
            confidence_sums[index] += confidence.value();
            correct_counts[index] += usize::from(*correct);
            total += 1;
        }
    }

    let bins = (0..num_bins)
        .map(|index| {
            let count = counts[index];
            ReliabilityBin {
                index,
                lower: index as f64 / num_bins as f64,
                upper: (index + 1) as f64 / num_bins as f64,
                count,
                mean_confidence: (count > 0).then(|| confidence_sums[index] / count as f64),
                accuracy: (count > 0).then(|| correct_counts[index] as f64 / count as f64),
            }
        })
        .collect();

    Ok(ReliabilityDiagram { num_bins, bins, total })
}

/// Expected calibration error: sum over non-empty bins of
/// (count/n) * |accuracy - mean_confidence|.
pub fn ece(diagram: &ReliabilityDiagram) -> Result<f64, MetricsError> {
    if diagram.total == 0 {
        return Err(MetricsError::EmptyDiagram);
    }
    let n = diagram.total as f64;
    let mut sum = 0.0;
    for bin in &diagram.bins {
        if let (Some(accuracy), Some(confidence)) = (bin.accuracy, bin.mean_confidence) {
            sum += (bin.count as f64 / n) * (accuracy - confidence).abs();
        }
    }
    Ok(sum)
}

/// Maximum calibration error: the largest |accuracy - mean_confidence| over
/// non-empty bins. Empty bins have no accuracy and are skipped.
pub fn mce(diagram: &ReliabilityDiagram) -> Result<f64, MetricsError> {
    if diagram.total == 0 {
        return Err(MetricsError::EmptyDiagram);
    }
    let mut worst = 0.0f64;
    for bin in &diagram.bins {
        if let (Some(accuracy), Some(confidence)) = (bin.accuracy, bin.mean_confidence) {
            worst = worst.max((accuracy - confidence).abs());
        }
    }
    Ok(worst)
}

/// Accuracy over completed outcomes and completion rate over all outcomes.
pub fn outcome_summary(outcomes: &[EvalOutcome]) -> OutcomeSummary {
    let n_total = outcomes.len();
    let mut n_completed = 0usize;
    let mut n_correct = 0usize;
    for outcome in outcomes {
        if let EvalOutcome::Completed { correct, .. } = outcome {
            n_completed += 1;
            n_correct += usize::from(*correct);
        }
    }
    OutcomeSummary {
        n_total,
        n_completed,
        accuracy: (n_completed > 0).then(|| n_correct as f64 / n_completed as f64),
        completion_rate: if n_total == 0 {
            0.0
        } else {
            n_completed as f64 / n_total as f64
        },
    }
}

/// Sample Pearson correlation coefficient, clamped into [-1, 1].
pub fn pearson_r(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewPoints);
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in pairs {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn completed(percent: f64, correct: bool) -> EvalOutcome {
        EvalOutcome::completed(ConfidenceScore::from_percent(percent).unwrap(), correct)
    }

    /// The four-outcome set used across the binning and ECE/MCE tests.
    fn four_outcomes() -> Vec<EvalOutcome> {
        vec![
            completed(90.0, true),
            completed(90.0, false),
            completed(60.0, true),
            completed(60.0, true),
        ]
    }

    #[test]
    fn confidence_bounds_enforced() {
        assert!(ConfidenceScore::from_percent(0.0).is_ok());
        assert!(ConfidenceScore::from_percent(100.0).is_ok());
        assert!(ConfidenceScore::from_percent(100.5).is_err());
        assert!(ConfidenceScore::from_percent(-0.1).is_err());
        assert!(ConfidenceScore::from_percent(f64::NAN).is_err());
        assert!(ConfidenceScore::from_fraction(1.2).is_err());
    }

    #[test]
    fn bin_index_edges() {
        let c = |p| ConfidenceScore::from_percent(p).unwrap();
        assert_eq!(bin_index(c(0.0), 20).unwrap(), 0);
        // Top edge clamps into the last bin.
        assert_eq!(bin_index(c(100.0), 20).unwrap(), 19);
        // floor(0.87 * 20) = 17.
        assert_eq!(bin_index(c(87.0), 20).unwrap(), 17);
        // Boundary percents land in the bin they open.
        assert_eq!(bin_index(c(95.0), 20).unwrap(), 19);
        assert_eq!(bin_index(c(35.0), 20).unwrap(), 7);
        assert_eq!(bin_index(c(50.0), 2).unwrap(), 1);
        assert_eq!(bin_index(c(42.0), 1).unwrap(), 0);
        assert_eq!(bin_index(c(50.0), 0), Err(MetricsError::ZeroBins));
    }

    #[test]
    fn build_reliability_hand_binned() {
        let diagram = build_reliability(&four_outcomes(), 10).unwrap();
        assert_eq!(diagram.total, 4);
        let bin9 = &diagram.bins[9];
        assert_eq!(bin9.count, 2);
        assert!((bin9.mean_confidence.unwrap() - 0.9).abs() < 1e-15);
        assert!((bin9.accuracy.unwrap() - 0.5).abs() < 1e-15);
        let bin6 = &diagram.bins[6];
        assert_eq!(bin6.count, 2);
        assert!((bin6.mean_confidence.unwrap() - 0.6).abs() < 1e-15);
        assert!((bin6.accuracy.unwrap() - 1.0).abs() < 1e-15);
        for (i, bin) in diagram.bins.iter().enumerate() {
            if i != 6 && i != 9 {
                assert_eq!(bin.count, 0);
                assert_eq!(bin.mean_confidence, None);
                assert_eq!(bin.accuracy, None);
            }
            assert!((bin.lower - i as f64 / 10.0).abs() < 1e-15);
            assert!((bin.upper - (i + 1) as f64 / 10.0).abs() < 1e-15);
        }
    }

    #[test]
    fn build_reliability_empty_and_single() {
        let empty = build_reliability(&[], 10).unwrap();
        assert_eq!(empty.total, 0);
        assert!(empty.bins.iter().all(|b| b.count == 0));

        let one = build_reliability(&[completed(100.0, true)], 20).unwrap();
        assert_eq!(one.total, 1);
        assert_eq!(one.bins[19].count, 1);
        assert_eq!(one.bins[19].mean_confidence, Some(1.0));
        assert_eq!(one.bins[19].accuracy, Some(1.0));
    }

    #[test]
    fn ece_hand_computed() {
        // 0.5*|0.5-0.9| + 0.5*|1.0-0.6| = 0.4
        let diagram = build_reliability(&four_outcomes(), 10).unwrap();
        assert!((ece(&diagram).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ece_perfectly_calibrated_bin() {
        // Two outcomes at 50% with one correct: conf = acc = 0.5.
        let outcomes = vec![completed(50.0, true), completed(50.0, false)];
        let diagram = build_reliability(&outcomes, 1).unwrap();
        assert_eq!(ece(&diagram).unwrap(), 0.0);
        assert_eq!(mce(&diagram).unwrap(), 0.0);
    }

    #[test]
    fn ece_constant_full_confidence_closed_form() {
        // All outcomes at confidence 1.0 with accuracy a gives ECE = 1 - a.
        for k in 0..=10usize {
            let n = 10usize;
            let outcomes: Vec<_> = (0..n).map(|i| completed(100.0, i < k)).collect();
            let diagram = build_reliability(&outcomes, 20).unwrap();
            let accuracy = k as f64 / n as f64;
            assert_eq!(ece(&diagram).unwrap(), 1.0 - accuracy);
            assert_eq!(mce(&diagram).unwrap(), 1.0 - accuracy);
        }
    }

    #[test]
    fn mce_hand_computed() {
        let diagram = build_reliability(&four_outcomes(), 10).unwrap();
        assert!((mce(&diagram).unwrap() - 0.4).abs() < 1e-12);

        // Gaps {0.05, 0.30} -> 0.30: bin at 80% with accuracy 0.75 and bin
        // at 60% with accuracy 0.30.
        let outcomes = vec![
            completed(80.0, true),
            completed(80.0, true),
            completed(80.0, true),
            completed(80.0, false),
            completed(60.0, false),
            completed(60.0, false),
            completed(60.0, false),
            completed(60.0, false),
            completed(60.0, false),
            completed(60.0, false),
            completed(60.0, true),
            completed(60.0, true),
            completed(60.0, true),
            completed(60.0, false),
        ];
        let diagram = build_reliability(&outcomes, 10).unwrap();
        assert!((mce(&diagram).unwrap() - 0.30).abs() < 1e-12);
        assert!((ece(&diagram).unwrap() - (4.0 / 14.0 * 0.05 + 10.0 / 14.0 * 0.30)).abs() < 1e-12);
    }

    #[test]
    fn metrics_undefined_on_empty() {
        let diagram = build_reliability(&[], 10).unwrap();
        assert_eq!(ece(&diagram), Err(MetricsError::EmptyDiagram));
        assert_eq!(mce(&diagram), Err(MetricsError::EmptyDiagram));
        let only_incomplete = build_reliability(&[EvalOutcome::Incomplete], 10).unwrap();
        assert_eq!(ece(&only_incomplete), Err(MetricsError::EmptyDiagram));
    }

    #[test]
    fn outcome_summary_counts() {
        let outcomes = vec![
            completed(90.0, true),
            completed(70.0, true),
            completed(60.0, false),
            EvalOutcome::Incomplete,
        ];
        let summary = outcome_summary(&outcomes);
        assert_eq!(summary.n_total, 4);
        assert_eq!(summary.n_completed, 3);
        assert!((summary.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((summary.completion_rate - 0.75).abs() < 1e-15);

        let none = outcome_summary(&[EvalOutcome::Incomplete, EvalOutcome::Incomplete]);
        assert_eq!(none.accuracy, None);
        assert_eq!(none.completion_rate, 0.0);

        let all = outcome_summary(&[completed(90.0, true), completed(80.0, true)]);
        assert_eq!(all.accuracy, Some(1.0));
        assert_eq!(all.completion_rate, 1.0);
    }

    #[test]
    fn pearson_exact_lines() {
        assert!((pearson_r(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]).unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (pearson_r(&[(0.2, 0.8), (0.5, 0.5), (0.8, 0.2)]).unwrap() + 1.0).abs() < 1e-12
        );
    }

    #[test]
    fn pearson_constant_confidence_family() {
        // A family of constant-confidence-1.0 agents: ECE = 1 - accuracy,
        // so accuracy and ECE are perfectly anti-correlated.
        let mut points = Vec::new();
        for k in [2usize, 5, 8] {
            let outcomes: Vec<_> = (0..10).map(|i| completed(100.0, i < k)).collect();
            let diagram = build_reliability(&outcomes, 20).unwrap();
            points.push((k as f64 / 10.0, ece(&diagram).unwrap()));
        }
        assert!((pearson_r(&points).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_inputs() {
        assert_eq!(pearson_r(&[(1.0, 1.0)]), Err(MetricsError::TooFewPoints));
        assert_eq!(
            pearson_r(&[(1.0, 1.0), (1.0, 2.0)]),
            Err(MetricsError::DegenerateVariance)
        );
        assert_eq!(
            pearson_r(&[(1.0, 3.0), (2.0, 3.0)]),
            Err(MetricsError::DegenerateVariance)
        );
    }

    /// Direct per-outcome loop with its own binning, kept independent of the
    /// diagram path it checks.
    fn oracle_ece_mce(outcomes: &[EvalOutcome], num_bins: usize) -> Option<(f64, f64)> {
        let mut count = vec![0usize; num_bins];
        let mut conf_sum = vec![0.0f64; num_bins];
        let mut correct = vec![0usize; num_bins];
        let mut n = 0usize;
        for outcome in outcomes {
            if let EvalOutcome::Completed { confidence, correct: ok } = outcome {
                let mut idx = (confidence.percent() * num_bins as f64 / 100.0).floor() as usize;
                if idx >= num_bins {
                    idx = num_bins - 1;
                }
                count[idx] += 1;
                conf_sum[idx] += confidence.value();
                correct[idx] += usize::from(*ok);
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        let mut ece = 0.0;
        let mut mce = 0.0f64;
        for b in 0..num_bins {
            if count[b] == 0 {
                continue;
            }
            let acc = correct[b] as f64 / count[b] as f64;
            let conf = conf_sum[b] / count[b] as f64;
            ece += count[b] as f64 / n as f64 * (acc - conf).abs();
            mce = mce.max((acc - conf).abs());
        }
        Some((ece, mce))
    }

    fn arb_outcome() -> impl Strategy<Value = EvalOutcome> {
        prop_oneof![
            1 => Just(EvalOutcome::Incomplete),
            9 => (0u32..=100, any::<bool>()).prop_map(|(p, correct)| completed(p as f64, correct)),
        ]
    }

    proptest! {
        #[test]
        fn ece_le_mce_le_one(outcomes in proptest::collection::vec(arb_outcome(), 1..200), bins in 1usize..40) {
            let diagram = build_reliability(&outcomes, bins).unwrap();
            if diagram.total > 0 {
                let e = ece(&diagram).unwrap();
                let m = mce(&diagram).unwrap();
                prop_assert!(0.0 <= e);
                prop_assert!(e <= m + 1e-12);
                prop_assert!(m <= 1.0);
            }
        }

        #[test]
        fn matches_brute_force_oracle(outcomes in proptest::collection::vec(arb_outcome(), 0..300), bins in 1usize..40) {
            let diagram = build_reliability(&outcomes, bins).unwrap();
            match oracle_ece_mce(&outcomes, bins) {
                None => {
                    prop_assert_eq!(diagram.total, 0);
                }
                Some((oracle_ece, oracle_mce)) => {
                    prop_assert!((ece(&diagram).unwrap() - oracle_ece).abs() < 1e-12);
                    prop_assert!((mce(&diagram).unwrap() - oracle_mce).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn permutation_invariant(outcomes in proptest::collection::vec(arb_outcome(), 1..100), bins in 1usize..30) {
            let mut shuffled = outcomes.clone();
            shuffled.reverse();
            shuffled.rotate_left(outcomes.len() / 3);
            let a = build_reliability(&outcomes, bins).unwrap();
            let b = build_reliability(&shuffled, bins).unwrap();
            prop_assert_eq!(&a.total, &b.total);
            for (x, y) in a.bins.iter().zip(&b.bins) {
                prop_assert_eq!(x.count, y.count);
            }
            if a.total > 0 {
                prop_assert!((ece(&a).unwrap() - ece(&b).unwrap()).abs() < 1e-12);
                prop_assert!((mce(&a).unwrap() - mce(&b).unwrap()).abs() < 1e-12);
            }
            let sa = outcome_summary(&outcomes);
            let sb = outcome_summary(&shuffled);
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn densities_sum_to_one(outcomes in proptest::collection::vec(arb_outcome(), 1..200), bins in 1usize..40) {
            let diagram = build_reliability(&outcomes, bins).unwrap();
            if diagram.total > 0 {
                let sum: f64 = diagram.densities().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn single_bin_collapses_to_overall_gap(outcomes in proptest::collection::vec(arb_outcome(), 1..200)) {
            let diagram = build_reliability(&outcomes, 1).unwrap();
            if diagram.total > 0 {
                let completed: Vec<_> = outcomes.iter().filter(|o| o.is_completed()).collect();
                let mean_conf = completed
                    .iter()
                    .map(|o| match o {
                        EvalOutcome::Completed { confidence, .. } => confidence.value(),
                        EvalOutcome::Incomplete => unreachable!(),
                    })
                    .sum::<f64>()
                    / completed.len() as f64;
                let accuracy = outcome_summary(&outcomes).accuracy.unwrap();
                let expected = (accuracy - mean_conf).abs();
                prop_assert!((ece(&diagram).unwrap() - expected).abs() < 1e-12);
                prop_assert!((mce(&diagram).unwrap() - expected).abs() < 1e-12);
            }
        }
    }
}
