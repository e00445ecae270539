//! Per-age-group, per-expression evaluation: F1 scores, macro averages,
//! row-normalized confusion matrices, and cross-fold aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{AgeGroup, Expression};

/// An F1 value with its degeneracy marker: when a class has no true
/// samples and no predictions, the score is reported as 0 and flagged
/// rather than being treated as a real measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub value: f64,
    pub degenerate: bool,
}

/// `2·tp / (2·tp + fp + fn)`, with the 0/0 case flagged as degenerate.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> F1 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        F1 {
            value: 0.0,
            degenerate: true,
        }
    } else {
        F1 {
            value: 2.0 * tp as f64 / denom as f64,
            degenerate: false,
        }
    }
}

/// One model decision on one test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub truth: Expression,
    pub predicted: Expression,
    pub group: AgeGroup,
}

/// Metrics for one age group (or one group within one fold).
///
/// Counts are stored as reals so the same shape serves both raw per-fold
/// reports (integral values) and cross-fold means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: AgeGroup,
    /// 7×7 raw counts; rows = true class, columns = predicted class.
    pub confusion: Array2<f64>,
    /// Row-normalized confusion; zero-support rows are all-zero.
    pub normalized: Array2<f64>,
    /// Per-class F1 in `Expression::ALL` order.
    pub per_class_f1: Vec<F1>,
    /// True-sample count per class.
    pub supports: Vec<f64>,
    /// Mean F1 over classes with nonzero support.
    pub macro_f1: f64,
    /// Same, additionally excluding "surprise" (the reporting convention
    /// for evaluation data with no elderly surprise samples).
    pub macro_f1_excl_surprise: f64,
    /// Classes with zero support in this group.
    pub zero_support: Vec<Expression>,
}

/// Cross-fold standard deviations matching the fields of [`GroupMetrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStd {
    pub normalized: Array2<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub macro_f1_excl_surprise: f64,
}

/// Evaluation report over one or more age groups; after
/// [`aggregate_folds`], values are cross-fold means and `std` carries the
/// population standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricsReport {
    pub groups: BTreeMap<AgeGroup, GroupMetrics>,
    pub n_folds: usize,
    pub std: Option<BTreeMap<AgeGroup, GroupStd>>,
}

fn metrics_for_group(group: AgeGroup, confusion: Array2<f64>) -> GroupMetrics {
    let k = Expression::COUNT;
    let supports: Vec<f64> = (0..k).map(|t| confusion.row(t).sum()).collect();
    let mut normalized = Array2::zeros((k, k));
    for t in 0..k {
        if supports[t] > 0.0 {
            for p in 0..k {
                normalized[(t, p)] = confusion[(t, p)] / supports[t];
            }
        }
    }
    let per_class_f1: Vec<F1> = (0..k)
        .map(|c| {
            let tp = confusion[(c, c)];
            let fp = confusion.column(c).sum() - tp;
            let fn_ = confusion.row(c).sum() - tp;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                F1 {
                    value: 0.0,
                    degenerate: true,
                }
            } else {
                F1 {
                    value: 2.0 * tp / denom,
                    degenerate: false,
                }
            }
        })
        .collect();

    let macro_over = |skip_surprise: bool| -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, expr) in Expression::ALL.iter().enumerate() {
            if supports[c] == 0.0 || (skip_surprise && *expr == Expression::Surprise) {
                continue;
            }
            sum += per_class_f1[c].value;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };

    let zero_support = Expression::ALL
        .iter()
        .enumerate()
        .filter(|(c, _)| supports[*c] == 0.0)
        .map(|(_, &e)| e)
        .collect();

    GroupMetrics {
        group,
        macro_f1: macro_over(false),
        macro_f1_excl_surprise: macro_over(true),
        zero_support,
        confusion,
        normalized,
        per_class_f1,
        supports,
    }
}

/// Build per-group confusion matrices and F1 scores from typed predictions.
/// Only groups that appear in the input are reported.
pub fn confusion_by_group(predictions: &[Prediction]) -> Result<GroupMetricsReport> {
    if predictions.is_empty() {
        return Err(Error::NoPredictions);
    }
    let k = Expression::COUNT;
    let mut matrices: BTreeMap<AgeGroup, Array2<f64>> = BTreeMap::new();
    for p in predictions {
        let m = matrices.entry(p.group).or_insert_with(|| Array2::zeros((k, k)));
        m[(p.truth.index(), p.predicted.index())] += 1.0;
    }
    let groups = matrices
        .into_iter()
        .map(|(g, m)| (g, metrics_for_group(g, m)))
        .collect();
    Ok(GroupMetricsReport {
        groups,
        n_folds: 1,
        std: None,
    })
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Element-wise mean and population standard deviation across fold reports.
///
/// Per-class F1 means keep the degenerate flag only when the class was
/// degenerate in every fold; macro means average the fold macro values (they
/// are not recomputed from the averaged per-class scores).
pub fn aggregate_folds(reports: &[GroupMetricsReport]) -> Result<GroupMetricsReport> {
    if reports.is_empty() {
        return Err(Error::NoPredictions);
    }
    let group_set: Vec<AgeGroup> = reports[0].groups.keys().copied().collect();
    for (i, r) in reports.iter().enumerate() {
        let keys: Vec<AgeGroup> = r.groups.keys().copied().collect();
        if keys != group_set {
            return Err(Error::ReportStructureMismatch(format!(
                "fold 0 has groups {group_set:?}, fold {i} has {keys:?}"
            )));
        }
    }

    let k = Expression::COUNT;
    let n = reports.len() as f64;
    let mut groups = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for &g in &group_set {
        let folds: Vec<&GroupMetrics> = reports.iter().map(|r| &r.groups[&g]).collect();

        let mut confusion = Array2::zeros((k, k));
        let mut normalized_mean = Array2::zeros((k, k));
        let mut normalized_std = Array2::zeros((k, k));
        for t in 0..k {
            for p in 0..k {
                confusion[(t, p)] = folds.iter().map(|f| f.confusion[(t, p)]).sum::<f64>() / n;
                let vals: Vec<f64> = folds.iter().map(|f| f.normalized[(t, p)]).collect();
                let (m, s) = mean_and_std(&vals);
                normalized_mean[(t, p)] = m;
                normalized_std[(t, p)] = s;
            }
        }

        let mut per_class_f1 = Vec::with_capacity(k);
        let mut per_class_f1_std = Vec::with_capacity(k);
        for c in 0..k {
            let vals: Vec<f64> = folds.iter().map(|f| f.per_class_f1[c].value).collect();
            let (m, s) = mean_and_std(&vals);
            per_class_f1.push(F1 {
                value: m,
                degenerate: folds.iter().all(|f| f.per_class_f1[c].degenerate),
            });
            per_class_f1_std.push(s);
        }

        let supports: Vec<f64> = (0..k)
            .map(|c| folds.iter().map(|f| f.supports[c]).sum::<f64>() / n)
            .collect();
        let (macro_mean, macro_std) = mean_and_std(&folds.iter().map(|f| f.macro_f1).collect::<Vec<_>>());
        let (excl_mean, excl_std) = mean_and_std(&folds.iter().map(|f| f.macro_f1_excl_surprise).collect::<Vec<_>>());
        let zero_support = Expression::ALL
            .iter()
            .enumerate()
            .filter(|(c, _)| folds.iter().all(|f| f.supports[*c] == 0.0))
            .map(|(_, &e)| e)
            .collect();

        groups.insert(
            g,
            GroupMetrics {
                group: g,
                confusion,
                normalized: normalized_mean,
                per_class_f1,
                supports,
                macro_f1: macro_mean,
                macro_f1_excl_surprise: excl_mean,
                zero_support,
            },
        );
        stds.insert(
            g,
            GroupStd {
                normalized: normalized_std,
                per_class_f1: per_class_f1_std,
                macro_f1: macro_std,
                macro_f1_excl_surprise: excl_std,
            },
        );
    }

    Ok(GroupMetricsReport {
        groups,
        n_folds: reports.iter().map(|r| r.n_folds).sum(),
        std: Some(stds),
    })
}

impl GroupMetricsReport {
    /// Unweighted mean of the group macro-F1s (excluding-surprise
    /// convention), the headline cross-group average.
    pub fn average_macro_f1_excl_surprise(&self) -> f64 {
        let vals: Vec<f64> = self.groups.values().map(|g| g.macro_f1_excl_surprise).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Human-readable per-group tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (group, m) in &self.groups {
            let n: f64 = m.supports.iter().sum();
            let _ = writeln!(out, "group: {group} (n={n}, folds={})", self.n_folds);
            let _ = writeln!(out, "  {:<11} {:>8} {:>8}", "class", "support", "f1");
            for (c, expr) in Expression::ALL.iter().enumerate() {
                let f1 = &m.per_class_f1[c];
                let tag = if f1.degenerate { " (degenerate)" } else { "" };
                let _ = writeln!(out, "  {:<11} {:>8.1} {:>8.4}{}", expr.to_string(), m.supports[c], f1.value, tag);
            }
            let _ = writeln!(out, "  macro-F1 (nonzero support): {:.4}", m.macro_f1);
            let _ = writeln!(out, "  macro-F1 (excluding surprise): {:.4}", m.macro_f1_excl_surprise);
            if let Some(stds) = &self.std {
                let s = &stds[group];
                let _ = writeln!(out, "  macro-F1 std: {:.4} / {:.4} (excl. surprise)", s.macro_f1, s.macro_f1_excl_surprise);
            }
            let _ = writeln!(out, "  normalized confusion (rows = truth):");
            let _ = write!(out, "  {:<11}", "");
            for expr in Expression::ALL {
                let _ = write!(out, " {:>7}", &expr.to_string()[..4.min(expr.to_string().len())]);
            }
            let _ = writeln!(out);
            for (t, expr) in Expression::ALL.iter().enumerate() {
                let _ = write!(out, "  {:<11}", expr.to_string());
                for p in 0..Expression::COUNT {
                    let _ = write!(out, " {:>7.3}", m.normalized[(t, p)]);
                }
                let _ = writeln!(out);
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f1_hand_cases() {
        assert_eq!(
            f1_score(10, 0, 0),
            F1 {
                value: 1.0,
                degenerate: false
            }
        );
        assert_eq!(
            f1_score(1, 1, 1),
            F1 {
                value: 0.5,
                degenerate: false
            }
        );
        assert_eq!(
            f1_score(0, 0, 0),
            F1 {
                value: 0.0,
                degenerate: true
            }
        );
        assert_eq!(f1_score(0, 3, 2).value, 0.0);
        assert!(!f1_score(0, 3, 2).degenerate);
    }

    fn pred(t: Expression, p: Expression, g: AgeGroup) -> Prediction {
        Prediction {
            truth: t,
            predicted: p,
            group: g,
        }
    }

    #[test]
    fn row_normalization_hand_case() {
        // Neutral row with counts [10, 30, 60, 0, 0, 0, 0].
        let mut preds = Vec::new();
        for (count, predicted) in [(10, Expression::Neutral), (30, Expression::Happiness), (60, Expression::Sadness)] {
            for _ in 0..count {
                preds.push(pred(Expression::Neutral, predicted, AgeGroup::Adults));
            }
        }
        let report = confusion_by_group(&preds).unwrap();
        let m = &report.groups[&AgeGroup::Adults];
        let row: Vec<f64> = (0..7).map(|p| m.normalized[(0, p)]).collect();
        assert_eq!(row, vec![0.1, 0.3, 0.6, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.confusion.sum(), 100.0);
    }

    #[test]
    fn all_correct_gives_identity_and_macro_one() {
        let mut preds = Vec::new();
        for expr in Expression::ALL {
            for _ in 0..5 {
                preds.push(pred(expr, expr, AgeGroup::Children));
            }
        }
        let report = confusion_by_group(&preds).unwrap();
        let m = &report.groups[&AgeGroup::Children];
        for t in 0..7 {
            for p in 0..7 {
                assert_eq!(m.normalized[(t, p)], if t == p { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.macro_f1_excl_surprise, 1.0);
        assert!(m.zero_support.is_empty());
    }

    #[test]
    fn zero_support_surprise_flagged_and_excluded() {
        // Elderly group with no surprise samples at all.
        let mut preds = Vec::new();
        for expr in Expression::ALL {
            if expr == Expression::Surprise {
                continue;
            }
            for _ in 0..4 {
                preds.push(pred(expr, expr, AgeGroup::Elderly));
            }
            preds.push(pred(expr, Expression::Neutral, AgeGroup::Elderly));
        }
        let report = confusion_by_group(&preds).unwrap();
        let m = &report.groups[&AgeGroup::Elderly];
        assert_eq!(m.zero_support, vec![Expression::Surprise]);
        let s_idx = Expression::Surprise.index();
        assert!(m.per_class_f1[s_idx].degenerate);
        assert!((0..7).all(|p| m.normalized[(s_idx, p)] == 0.0));
        // With surprise support zero, the inclusive and exclusive macros agree.
        assert_eq!(m.macro_f1, m.macro_f1_excl_surprise);
        assert!(m.macro_f1 > 0.0 && m.macro_f1 < 1.0);
    }

    #[test]
    fn excluding_surprise_changes_only_the_class_set() {
        let mut preds = Vec::new();
        for expr in Expression::ALL {
            preds.push(pred(expr, expr, AgeGroup::Adults));
        }
        // Make surprise imperfect so exclusion moves the macro.
        preds.push(pred(Expression::Surprise, Expression::Fear, AgeGroup::Adults));
        let report = confusion_by_group(&preds).unwrap();
        let m = &report.groups[&AgeGroup::Adults];
        let with = m.macro_f1;
        let without = m.macro_f1_excl_surprise;
        assert!(without > with);
        // Removing a class never changes the per-class scores themselves.
        let expected_without: f64 = Expression::ALL
            .iter()
            .enumerate()
            .filter(|(_, &e)| e != Expression::Surprise)
            .map(|(c, _)| m.per_class_f1[c].value)
            .sum::<f64>()
            / 6.0;
        assert!((without - expected_without).abs() < 1e-12);
    }

    #[test]
    fn counts_sum_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut preds = Vec::new();
        for i in 0..500 {
            preds.push(pred(
                Expression::ALL[i % 7],
                Expression::ALL[(i * 3 + i / 7) % 7],
                AgeGroup::ALL[i % 3],
            ));
        }
        let a = confusion_by_group(&preds).unwrap();
        let total: f64 = a.groups.values().map(|m| m.confusion.sum()).sum();
        assert_eq!(total, 500.0);

        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        let b = confusion_by_group(&shuffled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_predictions_rejected() {
        assert!(matches!(confusion_by_group(&[]), Err(Error::NoPredictions)));
    }

    fn report_with_macro(macro_targets: &[(AgeGroup, f64)]) -> GroupMetricsReport {
        // Build a synthetic single-group report with prescribed macro-F1 by
        // directly constructing the fields (only mean/std math is under test).
        let k = Expression::COUNT;
        let mut groups = BTreeMap::new();
        for &(g, target) in macro_targets {
            let confusion = Array2::eye(k);
            let normalized = Array2::from_elem((k, k), target);
            let per_class_f1 = vec![
                F1 {
                    value: target,
                    degenerate: false
                };
                k
            ];
            groups.insert(
                g,
                GroupMetrics {
                    group: g,
                    confusion,
                    normalized,
                    per_class_f1,
                    supports: vec![1.0; k],
                    macro_f1: target,
                    macro_f1_excl_surprise: target,
                    zero_support: vec![],
                },
            );
        }
        GroupMetricsReport {
            groups,
            n_folds: 1,
            std: None,
        }
    }

    #[test]
    fn aggregate_mean_std_hand_case() {
        let a = report_with_macro(&[(AgeGroup::Adults, 0.8)]);
        let b = report_with_macro(&[(AgeGroup::Adults, 0.6)]);
        let agg = aggregate_folds(&[a, b]).unwrap();
        let m = &agg.groups[&AgeGroup::Adults];
        assert!((m.macro_f1 - 0.7).abs() < 1e-12);
        let s = &agg.std.as_ref().unwrap()[&AgeGroup::Adults];
        assert!((s.macro_f1 - 0.1).abs() < 1e-12, "population std convention: {}", s.macro_f1);
        assert_eq!(agg.n_folds, 2);
    }

    #[test]
    fn aggregate_identical_reports_zero_std() {
        let r = report_with_macro(&[(AgeGroup::Children, 0.75), (AgeGroup::Elderly, 0.5)]);
        let agg = aggregate_folds(&[r.clone(), r.clone(), r.clone(), r.clone(), r.clone()]).unwrap();
        for g in [AgeGroup::Children, AgeGroup::Elderly] {
            assert_eq!(agg.groups[&g].macro_f1, r.groups[&g].macro_f1);
            assert_eq!(agg.groups[&g].normalized, r.groups[&g].normalized);
            assert_eq!(agg.std.as_ref().unwrap()[&g].macro_f1, 0.0);
        }
    }

    #[test]
    fn aggregate_singleton_is_identity_with_zero_std() {
        let r = report_with_macro(&[(AgeGroup::Adults, 0.42)]);
        let agg = aggregate_folds(std::slice::from_ref(&r)).unwrap();
        assert_eq!(agg.groups[&AgeGroup::Adults].macro_f1, 0.42);
        assert_eq!(agg.std.as_ref().unwrap()[&AgeGroup::Adults].macro_f1, 0.0);
    }

    #[test]
    fn aggregate_rejects_structure_mismatch() {
        let a = report_with_macro(&[(AgeGroup::Adults, 0.8)]);
        let b = report_with_macro(&[(AgeGroup::Elderly, 0.6)]);
        assert!(matches!(
            aggregate_folds(&[a, b]),
            Err(Error::ReportStructureMismatch(_))
        ));
        assert!(matches!(aggregate_folds(&[]), Err(Error::NoPredictions)));
    }

    #[test]
    fn report_json_round_trip() {
        let mut preds = Vec::new();
        for i in 0..60 {
            preds.push(pred(Expression::ALL[i % 7], Expression::ALL[(i + 1) % 7], AgeGroup::ALL[i % 3]));
        }
        let report = confusion_by_group(&preds).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: GroupMetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn text_rendering_mentions_all_groups() {
        let preds = vec![
            pred(Expression::Fear, Expression::Fear, AgeGroup::Children),
            pred(Expression::Anger, Expression::Fear, AgeGroup::Elderly),
        ];
        let text = confusion_by_group(&preds).unwrap().to_text();
        assert!(text.contains("group: children"));
        assert!(text.contains("group: elderly"));
        assert!(text.contains("macro-F1"));
    }
}
