//! Discrimination, selective-prediction and calibration metrics over
//! per-record confidences. Every method is oriented so that a higher
//! confidence means "more likely correct".

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record_id: String,
    pub confidence: f64,
    pub label: u8,
    #[serde(default, rename = "unsafe", skip_serializing_if = "Option::is_none")]
    pub unsafe_: Option<bool>,
}

impl ScoredRecord {
    pub fn new(record_id: impl Into<String>, confidence: f64, label: u8) -> Self {
        Self {
            record_id: record_id.into(),
            confidence,
            label,
            unsafe_: None,
        }
    }
}

fn check_finite(scored: &[ScoredRecord]) -> Result<()> {
    match scored.iter().find(|s| !s.confidence.is_finite()) {
        Some(s) => Err(Error::Precondition(format!(
            "record {:?} has non-finite confidence",
            s.record_id
        ))),
        None => Ok(()),
    }
}

/// Rank-based (Mann–Whitney) AUROC with average ranks for ties.
pub fn auroc(scored: &[ScoredRecord]) -> Result<f64> {
    check_finite(scored)?;
    let positives = scored.iter().filter(|s| s.label == 1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Precondition(
            "AUROC undefined: need both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].confidence.total_cmp(&scored[b].confidence));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scored[order[j]].confidence == scored[order[i]].confidence {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| scored[k].label == 1).count();
        positive_rank_sum += avg_rank * tied_pos as f64;
        i = j;
    }
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Most-confident-first order, ties broken by record id.
fn confidence_order(scored: &[ScoredRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .confidence
            .total_cmp(&scored[a].confidence)
            .then_with(|| scored[a].record_id.cmp(&scored[b].record_id))
    });
    order
}

/// Area under the accuracy–retention curve: mean accuracy of the top-k
/// most confident records over k = 1..n.
pub fn auarc(scored: &[ScoredRecord]) -> Result<f64> {
    check_finite(scored)?;
    if scored.is_empty() {
        return Err(Error::Precondition("AUARC of an empty set".into()));
    }
    let mut correct = 0usize;
    let mut total = 0.0;
    for (k, &i) in confidence_order(scored).iter().enumerate() {
        correct += usize::from(scored[i].label == 1);
        total += correct as f64 / (k + 1) as f64;
    }
    Ok(total / scored.len() as f64)
}

/// Accuracy-retention curve points `(retained fraction, accuracy)`.
pub fn accuracy_retention_curve(scored: &[ScoredRecord]) -> Vec<(f64, f64)> {
    let n = scored.len() as f64;
    let mut correct = 0usize;
    confidence_order(scored)
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            correct += usize::from(scored[i].label == 1);
            ((k + 1) as f64 / n, correct as f64 / (k + 1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Right-inclusive equal-width bin index; 0 falls into the first bin.
fn bin_index(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        0
    } else {
        ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1
    }
}

/// Expected calibration error over `bins` equal-width bins on `[0, 1]`.
pub fn ece(scored: &[ScoredRecord], bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    check_finite(scored)?;
    if bins == 0 {
        return Err(Error::Argument("ECE needs at least one bin".into()));
    }
    if let Some(s) = scored.iter().find(|s| !(0.0..=1.0).contains(&s.confidence)) {
        return Err(Error::Precondition(format!(
            "confidence {} of record {:?} is outside [0, 1]; map raw scores with calibration_map first",
            s.confidence, s.record_id
        )));
    }
    let mut sum_conf = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for s in scored {
        let b = bin_index(s.confidence, bins);
        sum_conf[b] += s.confidence;
        correct[b] += usize::from(s.label == 1);
        count[b] += 1;
    }
    let n = scored.len() as f64;
    let mut total = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[b] as f64;
                (sum_conf[b] / c, correct[b] as f64 / c)
            };
            if count[b] > 0 {
                total += count[b] as f64 / n * (accuracy - mean_confidence).abs();
            }
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                mean_confidence,
                accuracy,
                count: count[b],
            }
        })
        .collect();
    Ok((total, table))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    HigherConfident,
    HigherUncertain,
}

/// Maps raw scores to `[0, 1]` confidences: negate uncertainty-style
/// scores, then min-max normalize over the set. Constant input maps to 0.5.
pub fn calibration_map(raw: &[f64], direction: ScoreDirection) -> Vec<f64> {
    let oriented: Vec<f64> = match direction {
        ScoreDirection::HigherConfident => raw.to_vec(),
        ScoreDirection::HigherUncertain => raw.iter().map(|x| -x).collect(),
    };
    let lo = oriented.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = oriented.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; raw.len()];
    }
    oriented.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub auroc: f64,
    pub auarc: f64,
    pub ece: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_filtered: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_filtered: Option<usize>,
    /// Set when the unsafe-filtered subset lost a class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_warning: Option<String>,
    pub reliability_bins: Vec<ReliabilityBin>,
}

/// AUROC, AUARC and ECE of one method.
pub fn evaluate(method: &str, scored: &[ScoredRecord]) -> Result<EvalReport> {
    let (ece_value, reliability_bins) = ece(scored, DEFAULT_ECE_BINS)?;
    Ok(EvalReport {
        method: method.to_string(),
        auroc: auroc(scored)?,
        auarc: auarc(scored)?,
        ece: ece_value,
        n: scored.len(),
        auroc_filtered: None,
        n_filtered: None,
        filter_warning: None,
        reliability_bins,
    })
}

/// [`evaluate`] plus AUROC recomputed with unsafe records removed.
pub fn filtered_report(method: &str, scored: &[ScoredRecord]) -> Result<EvalReport> {
    if let Some(s) = scored.iter().find(|s| s.unsafe_.is_none()) {
        return Err(Error::Precondition(format!(
            "record {:?} carries no unsafe flag",
            s.record_id
        )));
    }
    let mut report = evaluate(method, scored)?;
    let kept: Vec<ScoredRecord> = scored
        .iter()
        .filter(|s| s.unsafe_ == Some(false))
        .cloned()
        .collect();
    report.n_filtered = Some(kept.len());
    match auroc(&kept) {
        Ok(v) => report.auroc_filtered = Some(v),
        Err(_) => {
            report.filter_warning =
                Some("filtered subset lacks one class; auroc_filtered omitted".into())
        }
    }
    Ok(report)
}

/// ROC curve points `(fpr, tpr)`, one per distinct threshold, from (0,0) to (1,1).
pub fn roc_points(scored: &[ScoredRecord]) -> Vec<(f64, f64)> {
    let positives = scored.iter().filter(|s| s.label == 1).count() as f64;
    let negatives = scored.len() as f64 - positives;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .confidence
            .partial_cmp(&scored[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let c = scored[order[i]].confidence;
        while i < order.len() && scored[order[i]].confidence == c {
            if scored[order[i]].label == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((
            if negatives > 0.0 { fp / negatives } else { 0.0 },
            if positives > 0.0 { tp / positives } else { 0.0 },
        ));
    }
    points
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Flat comma-separated summary, one row per method.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,auroc,auarc,ece,auroc_filtered,n\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            fmt6(r.auroc),
            fmt6(r.auarc),
            fmt6(r.ece),
            r.auroc_filtered.map(fmt6).unwrap_or_default(),
            r.n
        );
    }
    out
}

/// One JSON object per line, tagged with the dataset name.
pub fn report_json_lines(dataset: &str, reports: &[EvalReport]) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        dataset: &'a str,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    reports
        .iter()
        .map(|r| {
            serde_json::to_string(&Line {
                dataset,
                report: r,
            })
            .expect("reports serialize")
                + "\n"
        })
        .collect()
}

/// `method,fpr,tpr` rows for external plotting.
pub fn roc_points_table(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::from("method,fpr,tpr\n");
    for (method, points) in curves {
        for (fpr, tpr) in points {
            let _ = writeln!(out, "{method},{},{}", fmt6(*fpr), fmt6(*tpr));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(pairs: &[(f64, u8)]) -> Vec<ScoredRecord> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(c, l))| ScoredRecord::new(format!("r{i:03}"), c, l))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&recs(&[(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)])).unwrap(), 1.0);
        assert_eq!(auroc(&recs(&[(0.4, 1), (0.4, 0), (0.4, 1), (0.4, 0)])).unwrap(), 0.5);
        assert_eq!(auroc(&recs(&[(0.9, 1), (0.8, 0), (0.3, 1), (0.2, 0)])).unwrap(), 0.75);
        let err = auroc(&recs(&[(0.9, 1), (0.8, 1)])).unwrap_err();
        assert!(err.to_string().contains("AUROC undefined"));
    }

    #[test]
    fn auarc_examples() {
        assert_eq!(auarc(&recs(&[(0.3, 1), (0.9, 1), (0.1, 1)])).unwrap(), 1.0);
        assert_eq!(auarc(&recs(&[(0.9, 1), (0.1, 0)])).unwrap(), 0.75);
        assert_eq!(auarc(&recs(&[(0.9, 0), (0.1, 1)])).unwrap(), 0.25);
    }

    #[test]
    fn auarc_ties_break_by_id() {
        let a = vec![ScoredRecord::new("b", 0.5, 0), ScoredRecord::new("a", 0.5, 1)];
        assert_eq!(auarc(&a).unwrap(), 0.75);
    }

    #[test]
    fn ece_examples() {
        let (e, bins) = ece(&recs(&[(1.0, 1); 5]), 10).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(bins[9].count, 5);

        let mut one_bin: Vec<(f64, u8)> = vec![(0.8, 1); 8];
        one_bin.extend([(0.8, 0); 2]);
        let (e, _) = ece(&recs(&one_bin), 10).unwrap();
        assert!(e.abs() < 1e-15, "{e}");

        let mut two: Vec<(f64, u8)> = Vec::new();
        two.extend([(0.9, 1); 5]);
        two.extend([(0.9, 0); 5]);
        two.push((0.1, 1));
        two.extend([(0.1, 0); 9]);
        let (e, bins) = ece(&recs(&two), 10).unwrap();
        assert!((e - 0.2).abs() < 1e-15, "{e}");
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 20);
    }

    #[test]
    fn ece_rejects_out_of_range() {
        let err = ece(&recs(&[(1.5, 1)]), 10).unwrap_err();
        assert!(err.to_string().contains("calibration_map"));
    }

    #[test]
    fn bins_are_right_inclusive() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.1000001, 10), 1);
        assert_eq!(bin_index(1.0, 10), 9);
    }

    #[test]
    fn calibration_map_examples() {
        assert_eq!(
            calibration_map(&[0.0, 2f64.ln()], ScoreDirection::HigherUncertain),
            vec![1.0, 0.0]
        );
        let probs = [0.0, 0.3, 1.0, 0.7];
        assert_eq!(calibration_map(&probs, ScoreDirection::HigherConfident), probs.to_vec());
        assert_eq!(calibration_map(&[3.0; 4], ScoreDirection::HigherUncertain), vec![0.5; 4]);
    }

    #[test]
    fn filtered_report_examples() {
        let mut s = recs(&[(0.9, 1), (0.8, 0), (0.3, 1), (0.2, 0)]);
        for r in &mut s {
            r.unsafe_ = Some(false);
        }
        let rep = filtered_report("sgpu", &s).unwrap();
        assert_eq!(rep.auroc_filtered, Some(rep.auroc));

        // Half-right records sitting exactly at 0.5 are the unsafe ones.
        let mut s = recs(&[(0.9, 1), (0.8, 1), (0.5, 0), (0.5, 1), (0.5, 1), (0.5, 0), (0.2, 0), (0.1, 0)]);
        for r in &mut s {
            r.unsafe_ = Some(r.confidence == 0.5);
        }
        let rep = filtered_report("sgpu", &s).unwrap();
        assert!(rep.auroc_filtered.unwrap() >= rep.auroc);
        assert_eq!(rep.n_filtered, Some(4));

        let mut s = recs(&[(0.9, 1), (0.2, 0)]);
        s[0].unsafe_ = Some(false);
        s[1].unsafe_ = Some(true);
        let rep = filtered_report("sgpu", &s).unwrap();
        assert_eq!(rep.auroc_filtered, None);
        assert!(rep.filter_warning.is_some());

        s[1].unsafe_ = None;
        assert!(filtered_report("sgpu", &s).is_err());
    }

    #[test]
    fn roc_points_span_unit_square() {
        let pts = roc_points(&recs(&[(0.9, 1), (0.8, 0), (0.3, 1), (0.2, 0)]));
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        assert_eq!(pts.len(), 5);
    }

    #[test]
    fn table_format() {
        let rep = evaluate("pe", &recs(&[(0.9, 1), (0.1, 0)])).unwrap();
        let t = report_table(&[rep]);
        assert_eq!(t, "method,auroc,auarc,ece,auroc_filtered,n\npe,1.000000,0.750000,0.100000,,2\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = Vec<ScoredRecord>> {
            proptest::collection::vec((0u8..20, 0u8..2), 2..120).prop_filter_map(
                "both classes",
                |v| {
                    let s: Vec<ScoredRecord> = v
                        .iter()
                        .enumerate()
                        .map(|(i, &(c, l))| ScoredRecord::new(format!("r{i}"), c as f64 / 20.0, l))
                        .collect();
                    let pos = s.iter().filter(|r| r.label == 1).count();
                    (pos > 0 && pos < s.len()).then_some(s)
                },
            )
        }

        proptest! {
            #[test]
            fn auroc_invariant_under_monotone_transform(s in instance()) {
                let t: Vec<ScoredRecord> = s
                    .iter()
                    .map(|r| ScoredRecord { confidence: (3.0 * r.confidence).exp() - 7.0, ..r.clone() })
                    .collect();
                prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
            }

            #[test]
            fn auroc_flip_symmetry(s in instance()) {
                let flipped: Vec<ScoredRecord> = s
                    .iter()
                    .map(|r| ScoredRecord { confidence: -r.confidence, label: 1 - r.label, ..r.clone() })
                    .collect();
                prop_assert!((auroc(&s).unwrap() - auroc(&flipped).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn auarc_all_correct_is_one(cs in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
                let s: Vec<ScoredRecord> = cs.iter().enumerate().map(|(i, c)| ScoredRecord::new(format!("{i}"), *c, 1)).collect();
                prop_assert_eq!(auarc(&s).unwrap(), 1.0);
            }

            #[test]
            fn bin_counts_sum_to_n(s in instance()) {
                let (_, bins) = ece(&s, 10).unwrap();
                prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), s.len());
            }
        }
    }
}
