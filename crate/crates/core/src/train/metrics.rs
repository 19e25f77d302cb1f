use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut m = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::contract(format!(
                "label pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Header `truth,<class names...>`, one row per true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let name = |c: usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut s = String::from("truth");
        for c in 0..self.classes {
            let _ = write!(s, ",{}", name(c));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(&name(t));
            for p in 0..self.classes {
                let _ = write!(s, ",{}", self.get(t, p));
            }
            s.push('\n');
        }
        s
    }
}

/// Percentages except `kappa`, which is a plain ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub ba: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let n = m.total();
        if n == 0 {
            return Err(Error::contract("metrics need at least one sample"));
        }
        let c = m.classes();
        let ratio = |num: u64, den: u64, what: &str, metric: &str, class: usize| {
            if den == 0 {
                log::warn!("class {class} has no {what}; its {metric} counts as 0");
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let recall: Vec<f64> = (0..c).map(|k| ratio(m.get(k, k), m.row_sum(k), "true samples", "recall", k)).collect();
        let precision: Vec<f64> = (0..c).map(|k| ratio(m.get(k, k), m.col_sum(k), "predictions", "precision", k)).collect();
        let nf = n as f64;
        let po = m.trace() as f64 / nf;
        let pe = (0..c).map(|k| m.row_sum(k) as f64 * m.col_sum(k) as f64).sum::<f64>() / (nf * nf);
        let kappa = if pe == 1.0 {
            // Only one class appears anywhere: agreement is total or absent.
            if po == 1.0 { 1.0 } else { 0.0 }
        } else {
            (po - pe) / (1.0 - pe)
        };
        Ok(MetricsReport {
            oa: 100.0 * po,
            ba: recall.iter().sum::<f64>() / c as f64,
            recall,
            precision,
            kappa,
            confusion: m.clone(),
        })
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "OA {:.2}%  BA {:.2}%  kappa {:.4}", self.oa, self.ba, self.kappa)
    }
}
