//! Open-set evaluation metrics.
//!
//! Scoring is over N+1 classes: the N knowns plus the unknown sentinel at
//! index N. Macro-F1 averages per-class F1 over all N+1, with the 0/0 := 0
//! convention for empty precision, recall or F1 denominators, so detectors
//! that never predict a class are penalized rather than skipped.

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    /// confusion[truth][predicted], each in 0..=classes.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Builds the (N+1)-way confusion table and macro-F1 from paired decisions
/// and ground truth.
pub fn macro_f1(predictions: &[Label], truth: &[Label], classes: usize) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("cannot score an empty evaluation set".into()));
    }
    let k = classes + 1;
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, t) in predictions.iter().zip(truth) {
        let (pi, ti) = (p.index(classes), t.index(classes));
        if pi >= k || ti >= k {
            return Err(Error::Input(format!(
                "label index {} outside 0..={classes}",
                pi.max(ti)
            )));
        }
        confusion[ti][pi] += 1;
    }
    let mut per_class = Vec::with_capacity(k);
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c][c];
        let pred_c: usize = (0..k).map(|t| confusion[t][c]).sum();
        let truth_c: usize = confusion[c].iter().sum();
        let precision = ratio(tp, pred_c);
        let recall = ratio(tp, truth_c);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push(ClassMetrics { precision, recall, f1 });
    }
    Ok(EvalReport {
        classes,
        confusion,
        per_class,
        macro_f1: f1_sum / k as f64,
    })
}

impl EvalReport {
    /// Fixed-layout text rendering: confusion matrix then the per-class
    /// table. Stable across runs for byte-identical reports.
    pub fn to_text(&self) -> String {
        let k = self.classes + 1;
        let name = |c: usize| {
            if c == self.classes {
                "unk".to_string()
            } else {
                format!("c{c}")
            }
        };
        let mut s = String::new();
        s.push_str("confusion (rows truth, cols predicted)\n");
        s.push_str("      ");
        for c in 0..k {
            s.push_str(&format!("{:>6}", name(c)));
        }
        s.push('\n');
        for t in 0..k {
            s.push_str(&format!("{:>6}", name(t)));
            for p in 0..k {
                s.push_str(&format!("{:>6}", self.confusion[t][p]));
            }
            s.push('\n');
        }
        s.push_str("\nclass  precision  recall  f1\n");
        for (c, m) in self.per_class.iter().enumerate() {
            s.push_str(&format!(
                "{:>5}  {:>9.4}  {:>6.4}  {:.4}\n",
                name(c),
                m.precision,
                m.recall,
                m.f1
            ));
        }
        s.push_str(&format!("\nmacro_f1 {:.6}\n", self.macro_f1));
        s
    }
}

/// Evenly spaced rejection thresholds [0, 1): j / count for j in 0..count.
/// The default 20 gives 0.00, 0.05, ..., 0.95.
pub fn theta_grid(count: usize) -> Vec<f64> {
    (0..count).map(|j| j as f64 / count.max(1) as f64).collect()
}
