//! Test-set evaluation: confusion matrix, macro-averaged metrics, ROC/AUC
//! and best/mean±SD aggregation across runs.
//!
//! Metrics are macro-averaged (per-class values averaged with equal class
//! weight); class 1 (PAS) is the positive class and its predicted
//! probability is the ROC score.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts; class 1 = PAS = positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

/// The metric suite for one evaluated run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    /// Missing when the evaluated split contains a single class.
    pub auc: Option<f64>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
}

/// ROC polyline from (0,0) to (1,1); thresholds descend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// Argmax over two class probabilities, ties broken toward class 0.
pub fn labels_from_scores(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&p1| u8::from(p1 > 0.5)).collect()
}

/// Count confusion entries from true and predicted labels.
pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Data("label vectors must have equal length".into()));
    }
    let mut cm = ConfusionMatrix { tn: 0, fp: 0, fn_: 0, tp: 0 };
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t > 1 || p > 1 {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        match (t, p) {
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (1, 1) => cm.tp += 1,
            _ => unreachable!(),
        }
    }
    Ok(cm)
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy plus macro-averaged precision/recall/F1 (0/0 defined as 0).
/// The AUC slot is left empty; it needs scores, not counts.
pub fn macro_metrics(cm: &ConfusionMatrix) -> MetricReport {
    let total = cm.total() as f64;
    let (tn, fp, fn_, tp) = (cm.tn as f64, cm.fp as f64, cm.fn_ as f64, cm.tp as f64);

    let precision1 = safe_div(tp, tp + fp);
    let recall1 = safe_div(tp, tp + fn_);
    let precision0 = safe_div(tn, tn + fn_);
    let recall0 = safe_div(tn, tn + fp);
    let f1 = |p: f64, r: f64| safe_div(2.0 * p * r, p + r);

    MetricReport {
        accuracy: safe_div(tn + tp, total),
        auc: None,
        precision_macro: (precision0 + precision1) / 2.0,
        recall_macro: (recall0 + recall1) / 2.0,
        f1_macro: (f1(precision0, recall0) + f1(precision1, recall1)) / 2.0,
    }
}

/// ROC curve and trapezoidal AUC from class-1 scores.
///
/// Thresholds are the unique scores in descending order preceded by a
/// sentinel above the maximum; the AUC equals the pairwise concordance
/// probability with ties counted 1/2.
pub fn roc_auc(y_true: &[u8], scores: &[f64]) -> Result<(RocCurve, f64)> {
    if y_true.len() != scores.len() {
        return Err(Error::Data("labels and scores must have equal length".into()));
    }
    let pos = y_true.iter().filter(|&&y| y == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(
            "AUC needs both classes present in y_true".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    // trapezoid area accumulated in integer count units (doubled to keep
    // the tie term exact) so the result matches pairwise concordance to
    // the last bit: area2 = sum dFP * (TP_prev + TP_cur)
    let mut area2 = 0usize;
    let mut idx = 0;
    while idx < order.len() {
        let score = scores[order[idx]];
        let (prev_tp, prev_fp) = (tp, fp);
        // consume the whole tie group at this threshold
        while idx < order.len() && scores[order[idx]] == score {
            if y_true[order[idx]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        area2 += (fp - prev_fp) * (tp + prev_tp);
        thresholds.push(score);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }

    let auc = area2 as f64 / (2 * pos * neg) as f64;
    Ok((RocCurve { thresholds, fpr, tpr }, auc))
}

/// best / mean / sample SD of one metric across runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub best: f64,
    pub mean: f64,
    /// None for a single run (the n-1 denominator is undefined).
    pub sd: Option<f64>,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n >= 2 {
            Some(
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
            )
        } else {
            None
        };
        Some(Aggregate { best, mean, sd })
    }

    /// `best (mean ± sd)` with three decimals.
    pub fn formatted(&self) -> String {
        match self.sd {
            Some(sd) => format!("{:.3} ({:.3} \u{b1} {:.3})", self.best, self.mean, sd),
            None => format!("{:.3} ({:.3})", self.best, self.mean),
        }
    }
}

/// Aggregated metrics for one model across its runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub model: String,
    pub runs: usize,
    pub accuracy: Aggregate,
    pub auc: Option<Aggregate>,
    pub precision_macro: Aggregate,
    pub recall_macro: Aggregate,
    pub f1_macro: Aggregate,
}

/// Aggregate per-run reports into one summary row per model, preserving the
/// order in which models first appear.
pub fn aggregate_runs(rows: &[(String, MetricReport)]) -> Vec<ModelAggregate> {
    let mut models: Vec<String> = Vec::new();
    for (m, _) in rows {
        if !models.contains(m) {
            models.push(m.clone());
        }
    }
    models
        .into_iter()
        .map(|model| {
            let reports: Vec<&MetricReport> =
                rows.iter().filter(|(m, _)| *m == model).map(|(_, r)| r).collect();
            let collect = |f: &dyn Fn(&MetricReport) -> f64| -> Vec<f64> {
                reports.iter().map(|r| f(r)).collect()
            };
            let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
            ModelAggregate {
                model,
                runs: reports.len(),
                accuracy: Aggregate::from_values(&collect(&|r| r.accuracy)).unwrap(),
                auc: Aggregate::from_values(&aucs),
                precision_macro: Aggregate::from_values(&collect(&|r| r.precision_macro)).unwrap(),
                recall_macro: Aggregate::from_values(&collect(&|r| r.recall_macro)).unwrap(),
                f1_macro: Aggregate::from_values(&collect(&|r| r.f1_macro)).unwrap(),
            }
        })
        .collect()
}

const SVG_COLORS: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

/// Write ROC curves as an SVG plot plus a companion CSV of curve points
/// (same path with a `.csv` extension).
pub fn emit_roc_plot(curves: &[(String, RocCurve, f64)], out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let (w, h) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let x = |v: f64| ml + v * pw;
    let y = |v: f64| mt + (1.0 - v) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    // ticks and grid
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#ddd\"/>\n",
            x(v),
            y(0.0),
            y(1.0)
        ));
        svg.push_str(&format!(
            "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"#ddd\"/>\n",
            y(v),
            x(0.0),
            x(1.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{v:.1}</text>\n",
            x(v),
            y(0.0) + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{v:.1}</text>\n",
            x(0.0) - 6.0,
            y(v) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">False positive rate</text>\n",
        x(0.5),
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">True positive rate</text>\n",
        y(0.5),
        y(0.5)
    ));
    // chance diagonal
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    ));
    for (i, (name, curve, auc)) in curves.iter().enumerate() {
        let color = SVG_COLORS[i % SVG_COLORS.len()];
        let points: Vec<String> = curve
            .fpr
            .iter()
            .zip(&curve.tpr)
            .map(|(&fx, &ty)| format!("{:.2},{:.2}", x(fx), y(ty)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 18.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            x(0.55),
            x(0.62)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{name} (AUC = {auc:.3})</text>\n",
            x(0.63),
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");

    let mut f = File::create(out).map_err(|e| Error::io(out, e))?;
    f.write_all(svg.as_bytes()).map_err(|e| Error::io(out, e))?;

    let csv_path = out.with_extension("csv");
    let mut c = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(c, "# format_version=1").map_err(|e| Error::io(&csv_path, e))?;
    writeln!(c, "model,threshold,fpr,tpr,auc").map_err(|e| Error::io(&csv_path, e))?;
    for (name, curve, auc) in curves {
        for ((t, fx), ty) in curve.thresholds.iter().zip(&curve.fpr).zip(&curve.tpr) {
            writeln!(c, "{name},{t},{fx},{ty},{auc}").map_err(|e| Error::io(&csv_path, e))?;
        }
    }
    Ok(())
}

/// Brute-force pairwise concordance probability with ties counted 1/2.
/// Quadratic; intended as a test oracle and for small n.
pub fn concordance_auc(y_true: &[u8], scores: &[f64]) -> Result<f64> {
    let pos: Vec<f64> = y_true
        .iter()
        .zip(scores)
        .filter(|(&y, _)| y == 1)
        .map(|(_, &s)| s)
        .collect();
    let neg: Vec<f64> = y_true
        .iter()
        .zip(scores)
        .filter(|(&y, _)| y == 0)
        .map(|(_, &s)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::MetricUndefined("AUC needs both classes".into()));
    }
    let mut acc = 0.0;
    for &p in &pos {
        for &n in &neg {
            acc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(acc / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_confusion_matrix_metrics() {
        let cm = ConfusionMatrix { tn: 144, fp: 27, fn_: 7, tp: 49 };
        let m = macro_metrics(&cm);
        assert!((m.accuracy - 0.850).abs() < 0.0005);
        assert!((m.precision_macro - 0.799).abs() < 0.0005);
        assert!((m.recall_macro - 0.859).abs() < 0.0005);
        assert!((m.f1_macro - 0.818).abs() < 0.0005);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 0, 1, 1, 0, 0, 1, 0, 0];
        let cm = confusion(&y, &y).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        let m = macro_metrics(&cm);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1_macro, 1.0);
    }

    #[test]
    fn all_positive_predictions() {
        let cm = confusion(&[0, 0, 0, 1, 1], &[1, 1, 1, 1, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tn: 0, fp: 3, fn_: 0, tp: 2 });
        // degenerate: precision for the absent class is 0, no division error
        let m = macro_metrics(&cm);
        assert!(m.precision_macro.is_finite());
    }

    #[test]
    fn tie_scores_predict_class_zero() {
        assert_eq!(labels_from_scores(&[0.5, 0.51, 0.49]), vec![0, 1, 0]);
    }

    #[test]
    fn roc_auc_textbook_example() {
        let (_, auc) = roc_auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap();
        assert_relative_eq!(auc, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn all_tied_scores_give_half() {
        let (_, auc) = roc_auc(&[0, 1, 0, 1, 1], &[0.3; 5]).unwrap();
        assert_relative_eq!(auc, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[1, 1, 1], &[0.1, 0.2, 0.3]),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn trapezoid_equals_brute_force_concordance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(2..=20);
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if y.iter().all(|&v| v == 0) || y.iter().all(|&v| v == 1) {
                continue;
            }
            // quantized scores to provoke ties
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let (_, auc) = roc_auc(&y, &s).unwrap();
            let oracle = concordance_auc(&y, &s).unwrap();
            assert_relative_eq!(auc, oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn roc_curve_is_monotone_from_origin_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let y: Vec<u8> = (0..50).map(|_| rng.gen_range(0..2) as u8).collect();
        let s: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
        let (curve, _) = roc_auc(&y, &s).unwrap();
        assert_eq!((curve.fpr[0], curve.tpr[0]), (0.0, 0.0));
        assert_eq!((*curve.fpr.last().unwrap(), *curve.tpr.last().unwrap()), (1.0, 1.0));
        for w in 1..curve.fpr.len() {
            assert!(curve.fpr[w] >= curve.fpr[w - 1]);
            assert!(curve.tpr[w] >= curve.tpr[w - 1]);
            assert!(curve.thresholds[w] < curve.thresholds[w - 1]);
        }
    }

    #[test]
    fn auc_complement_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let y: Vec<u8> = (0..30).map(|_| rng.gen_range(0..2) as u8).collect();
        let s: Vec<f64> = (0..30).map(|_| rng.gen()).collect(); // tie-free a.s.
        let (_, auc) = roc_auc(&y, &s).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let (_, auc_neg) = roc_auc(&y, &neg).unwrap();
        assert_relative_eq!(auc + auc_neg, 1.0, epsilon = 1e-12);
        let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
        let (_, auc_warped) = roc_auc(&y, &warped).unwrap();
        assert_relative_eq!(auc, auc_warped, epsilon = 1e-12);
    }

    #[test]
    fn class_swap_leaves_macro_metrics_unchanged() {
        let cm = ConfusionMatrix { tn: 144, fp: 27, fn_: 7, tp: 49 };
        let swapped = ConfusionMatrix { tn: 49, fp: 7, fn_: 27, tp: 144 };
        let a = macro_metrics(&cm);
        let b = macro_metrics(&swapped);
        assert_relative_eq!(a.precision_macro, b.precision_macro, epsilon = 1e-12);
        assert_relative_eq!(a.recall_macro, b.recall_macro, epsilon = 1e-12);
        assert_relative_eq!(a.f1_macro, b.f1_macro, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_example() {
        let agg = Aggregate::from_values(&[0.850, 0.845, 0.828, 0.840, 0.852]).unwrap();
        assert_relative_eq!(agg.best, 0.852, epsilon = 1e-12);
        assert_relative_eq!(agg.mean, 0.843, epsilon = 1e-12);
        assert!((agg.sd.unwrap() - 0.0097).abs() < 5e-4);
    }

    #[test]
    fn aggregate_constant_and_single_run() {
        let c = Aggregate::from_values(&[0.8, 0.8, 0.8]).unwrap();
        assert!(c.sd.unwrap() < 1e-12);
        let s = Aggregate::from_values(&[0.9]).unwrap();
        assert_eq!(s.best, s.mean);
        assert_eq!(s.sd, None);
    }

    #[test]
    fn roc_plot_writes_svg_and_csv() {
        let tmp = tempfile::tempdir().unwrap();
        let (curve, auc) = roc_auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap();
        let out = tmp.path().join("roc.svg");
        emit_roc_plot(&[("demo".into(), curve, auc)], &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("AUC = 0.750"));
        let csv = std::fs::read_to_string(tmp.path().join("roc.csv")).unwrap();
        assert!(csv.lines().count() > 3);
    }
}
