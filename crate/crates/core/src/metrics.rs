//! Segmentation scoring: Dice similarity coefficient, Jaccard index,
//! threshold sweeps, and report aggregation.
//!
//! Masks are binary tensors of any rank; scoring flattens them, so a
//! whole volume scores as one case by passing its stacked slices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores for one case at one binarization threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseScore {
    pub case_id: String,
    pub threshold: f64,
    pub dsc: f64,
    pub ji: f64,
}

/// Mean, population standard deviation, and extremes of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
    pub best: f64,
}

/// Table-style aggregate over a set of case scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub dsc: Summary,
    pub ji: Summary,
    pub cases: usize,
}

fn check_masks(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "metric masks",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn overlap_counts(a: &Tensor, b: &Tensor) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut count_a = 0.0;
    let mut count_b = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let xa = x != 0.0;
        let yb = y != 0.0;
        if xa {
            count_a += 1.0;
        }
        if yb {
            count_b += 1.0;
        }
        if xa && yb {
            inter += 1.0;
        }
    }
    (inter, count_a, count_b)
}

/// Dice similarity coefficient `2|A n B| / (|A| + |B|)`.
/// Two empty masks score 1.0; exactly one empty mask scores 0.0.
pub fn dsc(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_masks(a, b)?;
    let (inter, ca, cb) = overlap_counts(a, b);
    if ca + cb == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (ca + cb))
}

/// Jaccard index `|A n B| / |A u B|`, with the same empty-mask
/// conventions as [`dsc`].
pub fn jaccard_index(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_masks(a, b)?;
    let (inter, ca, cb) = overlap_counts(a, b);
    let union = ca + cb - inter;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(inter / union)
}

/// Binarizes a probability map: strictly above the threshold is
/// foreground.
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|p| if p > threshold { 1.0 } else { 0.0 })
}

/// Scores one probability map against the truth at each threshold.
/// Thresholds must be strictly increasing and inside (0, 1).
pub fn threshold_sweep(
    case_id: &str,
    prob: &Tensor,
    truth: &Tensor,
    thresholds: &[f64],
) -> Result<Vec<CaseScore>> {
    if thresholds.is_empty() {
        return Err(Error::invalid("threshold list is empty"));
    }
    for pair in thresholds.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::invalid("thresholds must be strictly increasing"));
        }
    }
    if thresholds[0] <= 0.0 || thresholds[thresholds.len() - 1] >= 1.0 {
        return Err(Error::invalid("thresholds must lie inside (0, 1)"));
    }
    thresholds
        .iter()
        .map(|&t| {
            let mask = binarize(prob, t);
            Ok(CaseScore {
                case_id: case_id.to_string(),
                threshold: t,
                dsc: dsc(&mask, truth)?,
                ji: jaccard_index(&mask, truth)?,
            })
        })
        .collect()
}

/// The 19 thresholds 0.05, 0.10, ..., 0.95.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

fn summarize(values: &[f64]) -> Summary {
    // Summing in sorted order makes the report identical under any
    // permutation of the input scores.
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary {
        mean,
        std: var.sqrt(),
        worst: sorted[0],
        best: sorted[sorted.len() - 1],
    }
}

/// Aggregates case scores into mean, population std, worst, and best
/// per metric.
pub fn aggregate(scores: &[CaseScore]) -> Result<AggregateReport> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate zero case scores"));
    }
    let dscs: Vec<f64> = scores.iter().map(|s| s.dsc).collect();
    let jis: Vec<f64> = scores.iter().map(|s| s.ji).collect();
    Ok(AggregateReport {
        dsc: summarize(&dscs),
        ji: summarize(&jis),
        cases: scores.len(),
    })
}

/// Renders per-case scores as CSV with header `case_id,threshold,dsc,ji`.
pub fn scores_to_csv(scores: &[CaseScore]) -> String {
    let mut out = String::from("case_id,threshold,dsc,ji\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            s.case_id, s.threshold, s.dsc, s.ji
        ));
    }
    out
}

/// Renders an aggregate report as CSV with header
/// `metric,mean,std,worst,best`.
pub fn report_to_csv(report: &AggregateReport) -> String {
    let mut out = String::from("metric,mean,std,worst,best\n");
    for (name, s) in [("dsc", report.dsc), ("ji", report.ji)] {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            name, s.mean, s.std, s.worst, s.best
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(values: &[f64]) -> Tensor {
        Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(&[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(dsc(&m, &m).unwrap(), 1.0);
        assert_eq!(jaccard_index(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask(&[1.0, 1.0, 0.0, 0.0]);
        let b = mask(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        assert_eq!(jaccard_index(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_counts() {
        // |A| = |B| = 4, |A n B| = 2: DSC 0.5, JI 1/3.
        let a = mask(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let b = mask(&[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert!((jaccard_index(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_conventions() {
        let empty = mask(&[0.0; 4]);
        let full = mask(&[1.0; 4]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard_index(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &full).unwrap(), 0.0);
        assert_eq!(jaccard_index(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn sweep_validates_thresholds() {
        let p = mask(&[0.4, 0.6]);
        let t = mask(&[0.0, 1.0]);
        assert!(threshold_sweep("c", &p, &t, &[]).is_err());
        assert!(threshold_sweep("c", &p, &t, &[0.5, 0.5]).is_err());
        assert!(threshold_sweep("c", &p, &t, &[0.0, 0.5]).is_err());
        assert!(threshold_sweep("c", &p, &t, &[0.5, 0.95]).is_ok());
    }

    #[test]
    fn sweep_has_19_standard_thresholds() {
        let t = sweep_thresholds();
        assert_eq!(t.len(), 19);
        assert!((t[0] - 0.05).abs() < 1e-12);
        assert!((t[18] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn aggregate_two_scores_by_hand() {
        let scores = vec![
            CaseScore {
                case_id: "a".into(),
                threshold: 0.5,
                dsc: 0.6,
                ji: 0.5,
            },
            CaseScore {
                case_id: "b".into(),
                threshold: 0.5,
                dsc: 0.8,
                ji: 0.7,
            },
        ];
        let r = aggregate(&scores).unwrap();
        assert!((r.dsc.mean - 0.7).abs() < 1e-15);
        assert!((r.dsc.std - 0.1).abs() < 1e-12);
        assert_eq!(r.dsc.worst, 0.6);
        assert_eq!(r.dsc.best, 0.8);
        assert_eq!(r.cases, 2);
    }

    #[test]
    fn csv_headers_match_contract() {
        let scores = vec![CaseScore {
            case_id: "a".into(),
            threshold: 0.5,
            dsc: 1.0,
            ji: 1.0,
        }];
        assert!(scores_to_csv(&scores).starts_with("case_id,threshold,dsc,ji\n"));
        let report = aggregate(&scores).unwrap();
        assert!(report_to_csv(&report).starts_with("metric,mean,std,worst,best\n"));
    }
}
