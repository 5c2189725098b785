//! Open-set evaluation and seed aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{contract, Error, Result};
use crate::trainer::OpenSetLabel;

/// Per-class and aggregate open-set accuracies. All unknown target classes
/// are collapsed into one evaluation class, indexed last.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_known: usize,
    pub known_acc: Vec<f64>,
    /// `None` when the ground truth has no unknown instances.
    pub unknown_acc: Option<f64>,
    pub os: f64,
    pub os_star: f64,
    pub total_acc: f64,
    /// Rows are ground truth, columns predictions; index `num_known` is UNKNOWN.
    pub confusion: Array2<u64>,
    pub n_per_class: Vec<u64>,
}

impl EvalReport {
    pub fn unknown_index(&self) -> usize {
        self.num_known
    }

    /// Accuracy of every evaluation class, UNKNOWN last when present.
    pub fn per_class_acc(&self) -> Vec<f64> {
        let mut v = self.known_acc.clone();
        v.extend(self.unknown_acc);
        v
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Os => self.os,
            Metric::OsStar => self.os_star,
            Metric::Acc => self.total_acc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Os,
    OsStar,
    Acc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Os, Metric::OsStar, Metric::Acc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Os => "os",
            Metric::OsStar => "os_star",
            Metric::Acc => "acc",
        }
    }
}

fn label_index(label: OpenSetLabel, num_known: usize) -> Result<usize> {
    match label {
        OpenSetLabel::Known(c) if c < num_known => Ok(c),
        OpenSetLabel::Known(c) => Err(contract(format!("predicted class {c} outside 0..{num_known}"))),
        OpenSetLabel::Unknown => Ok(num_known),
    }
}

/// Builds the report from a confusion matrix of shape `(k+1) x (k+1)`.
pub fn report_from_confusion(confusion: Array2<u64>) -> Result<EvalReport> {
    let (r, c) = confusion.dim();
    if r != c || r < 2 {
        return Err(contract(format!("confusion matrix must be square with side >= 2, got {r}x{c}")));
    }
    let num_known = r - 1;
    let n_per_class: Vec<u64> = confusion.rows().into_iter().map(|row| row.sum()).collect();
    let mut known_acc = Vec::with_capacity(num_known);
    for (k, &n) in n_per_class.iter().enumerate().take(num_known) {
        if n == 0 {
            return Err(Error::UndefinedMetric(k));
        }
        known_acc.push(confusion[[k, k]] as f64 / n as f64);
    }
    let unknown_acc = match n_per_class[num_known] {
        0 => None,
        n => Some(confusion[[num_known, num_known]] as f64 / n as f64),
    };
    let known_sum: f64 = known_acc.iter().sum();
    let os_star = known_sum / num_known as f64;
    let os = match unknown_acc {
        Some(u) => (known_sum + u) / (num_known + 1) as f64,
        None => os_star,
    };
    let trace: u64 = (0..r).map(|i| confusion[[i, i]]).sum();
    let total: u64 = n_per_class.iter().sum();
    Ok(EvalReport {
        num_known,
        known_acc,
        unknown_acc,
        os,
        os_star,
        total_acc: trace as f64 / total as f64,
        confusion,
        n_per_class,
    })
}

/// Evaluates open-set predictions against hidden target labels; every label
/// `>= num_known` counts as UNKNOWN.
pub fn evaluate(predictions: &[OpenSetLabel], hidden_labels: &[usize], num_known: usize) -> Result<EvalReport> {
    if predictions.len() != hidden_labels.len() {
        return Err(contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            hidden_labels.len()
        )));
    }
    if num_known == 0 {
        return Err(contract("num_known must be positive"));
    }
    let mut confusion = Array2::<u64>::zeros((num_known + 1, num_known + 1));
    for (&p, &y) in predictions.iter().zip(hidden_labels) {
        let truth = y.min(num_known);
        confusion[[truth, label_index(p, num_known)?]] += 1;
    }
    report_from_confusion(confusion)
}

/// Across-seed aggregate of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 when `n == 1`.
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(contract("cannot aggregate zero values"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std,
            median: median(values),
            n,
        })
    }

    pub fn single_sample(&self) -> bool {
        self.n == 1
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One run of a sweep: the swept value as a label and its report, or `None`
/// when the run failed (for instance an empty pseudo-label set).
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub key: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub key: String,
    pub metrics: BTreeMap<Metric, Aggregate>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

/// Groups runs by key, preserving first-appearance order.
pub fn sweep_summary(parameter: &str, runs: &[SweepRun]) -> Result<SweepTable> {
    if runs.is_empty() {
        return Err(contract("sweep has no runs"));
    }
    let mut keys: Vec<&str> = Vec::new();
    for r in runs {
        if !keys.contains(&r.key.as_str()) {
            keys.push(&r.key);
        }
    }
    let mut rows = Vec::with_capacity(keys.len());
    for key in keys {
        let group: Vec<&SweepRun> = runs.iter().filter(|r| r.key == key).collect();
        let ok: Vec<&EvalReport> = group.iter().filter_map(|r| r.report.as_ref()).collect();
        let mut metrics = BTreeMap::new();
        if !ok.is_empty() {
            for m in Metric::ALL {
                let vals: Vec<f64> = ok.iter().map(|r| r.metric(m)).collect();
                metrics.insert(m, Aggregate::of(&vals)?);
            }
        }
        rows.push(SweepRow {
            key: key.to_string(),
            metrics,
            failed: group.len() - ok.len(),
        });
    }
    Ok(SweepTable {
        parameter: parameter.to_string(),
        rows,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_sweep_csv(path: impl AsRef<Path>, table: &SweepTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![table.parameter.clone(), "n".into()];
    for m in Metric::ALL {
        for s in ["mean", "std", "median"] {
            header.push(format!("{}_{s}", m.name()));
        }
    }
    header.extend(["single_sample".into(), "failed".into()]);
    w.write_record(&header)?;
    for row in &table.rows {
        let n = row.metrics.values().next().map_or(0, |a| a.n);
        let mut rec = vec![row.key.clone(), n.to_string()];
        for m in Metric::ALL {
            match row.metrics.get(&m) {
                Some(a) => rec.extend([fmt(a.mean), fmt(a.std), fmt(a.median)]),
                None => rec.extend(["".into(), "".into(), "".into()]),
            }
        }
        rec.push((n == 1).to_string());
        rec.push(row.failed.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn class_name(i: usize, num_known: usize) -> String {
    if i == num_known {
        "unknown".into()
    } else {
        i.to_string()
    }
}

/// `metric,value` rows: aggregate scores then per-class accuracy and counts.
pub fn write_report_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    w.write_record(["os", &fmt(report.os)])?;
    w.write_record(["os_star", &fmt(report.os_star)])?;
    w.write_record(["acc", &fmt(report.total_acc)])?;
    for (i, acc) in report.per_class_acc().iter().enumerate() {
        let name = class_name(i, report.num_known);
        w.write_record([format!("acc_{name}"), fmt(*acc)])?;
    }
    for (i, n) in report.n_per_class.iter().enumerate() {
        let name = class_name(i, report.num_known);
        w.write_record([format!("n_{name}"), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_confusion_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let side = report.confusion.nrows();
    let mut header = vec!["truth\\pred".to_string()];
    header.extend((0..side).map(|i| class_name(i, report.num_known)));
    w.write_record(&header)?;
    for i in 0..side {
        let mut rec = vec![class_name(i, report.num_known)];
        rec.extend(report.confusion.row(i).iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain `key = value` summary, convenient for diffs.
pub fn write_report_text(mut out: impl Write, report: &EvalReport) -> Result<()> {
    writeln!(out, "os = {}", fmt(report.os))?;
    writeln!(out, "os_star = {}", fmt(report.os_star))?;
    writeln!(out, "acc = {}", fmt(report.total_acc))?;
    Ok(())
}
