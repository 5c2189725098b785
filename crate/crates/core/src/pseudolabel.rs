//! Confidence scoring with the frozen source model, pseudo-label sets and
//! the pseudo-label loss.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::model::{cross_entropy, BoundParams, ExpandedClassifier};
use crate::scalar::Scalar;

/// Shannon entropy (nats) of one probability row, with `0 log 0 = 0`.
pub fn prediction_entropy<T: Scalar>(probs: ArrayView1<T>) -> Result<T> {
    let mut total = T::zero();
    for &p in probs.iter() {
        if !p.is_finite() || p < T::zero() {
            return Err(contract(format!("probability entry {p} is not in [0, 1]")));
        }
        total += p;
    }
    if (total - T::one()).abs() > T::of(1e-6) {
        return Err(contract(format!("probability row sums to {total}")));
    }
    let h = probs
        .iter()
        .filter(|&&p| p > T::zero())
        .fold(T::zero(), |acc, &p| acc - p * p.ln());
    Ok(h.max(T::zero()))
}

/// Entropy cut-offs in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub delta_k: f64,
    pub delta_u: f64,
}

impl Thresholds {
    /// `delta_u = ln(num_known) / 2`, `delta_k = delta_u / 10`.
    pub fn default_for(num_known: usize) -> Result<Self> {
        if num_known < 2 {
            return Err(contract("thresholds need at least 2 known classes"));
        }
        let delta_u = (num_known as f64).ln() / 2.0;
        Ok(Self {
            delta_k: 0.1 * delta_u,
            delta_u,
        })
    }

    pub fn validate(&self, num_known: usize) -> Result<()> {
        let max = (num_known as f64).ln();
        if !(0.0 <= self.delta_k && self.delta_k < self.delta_u && self.delta_u <= max + 1e-12) {
            return Err(contract(format!(
                "thresholds must satisfy 0 <= delta_k < delta_u <= ln({num_known}); got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn default_thresholds(num_known: usize) -> Result<(f64, f64)> {
    let t = Thresholds::default_for(num_known)?;
    Ok((t.delta_k, t.delta_u))
}

/// How the source model's confidence is scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfidenceMeasure {
    Entropy,
    /// Known iff `max p >= known_min`; unknown iff `max p <= unknown_factor / |C_s|`.
    MaxProb { known_min: f64, unknown_factor: f64 },
}

impl ConfidenceMeasure {
    pub fn max_prob_default() -> Self {
        ConfidenceMeasure::MaxProb {
            known_min: 0.95,
            unknown_factor: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoAssignment {
    Known(usize),
    Unknown,
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSets {
    /// `(target index, pseudo class)`
    pub known: Vec<(usize, usize)>,
    pub unknown: Vec<usize>,
    pub discarded: Vec<usize>,
    pub delta_k: f64,
    pub delta_u: f64,
    pub num_known: usize,
    /// Source-model prediction entropy per target instance.
    pub entropies: Vec<f64>,
}

impl PseudoLabelSets {
    pub fn len(&self) -> usize {
        self.entropies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropies.is_empty()
    }

    /// Assignment of every target index, in index order.
    pub fn assignments(&self) -> Vec<PseudoAssignment> {
        let mut out = vec![PseudoAssignment::Discarded; self.len()];
        for &(i, c) in &self.known {
            out[i] = PseudoAssignment::Known(c);
        }
        for &i in &self.unknown {
            out[i] = PseudoAssignment::Unknown;
        }
        out
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.known.is_empty() {
            return Err(Error::EmptyPseudoSet("known"));
        }
        if self.unknown.is_empty() {
            return Err(Error::EmptyPseudoSet("unknown"));
        }
        Ok(())
    }
}

fn argmax<T: Scalar>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Splits target instances into confident-known, confident-unknown and
/// discarded, without requiring either confident set to be nonempty.
pub fn partition_by_confidence<T: Scalar>(
    source_model: &ExpandedClassifier<T>,
    target_features: &Array2<T>,
    thresholds: Thresholds,
    measure: ConfidenceMeasure,
) -> Result<PseudoLabelSets> {
    if source_model.num_extra() != 0 {
        return Err(contract("pseudo-labels come from the known-only source model"));
    }
    let num_known = source_model.num_known();
    thresholds.validate(num_known)?;
    let probs = source_model.known_probabilities(target_features)?;
    let mut sets = PseudoLabelSets {
        known: Vec::new(),
        unknown: Vec::new(),
        discarded: Vec::new(),
        delta_k: thresholds.delta_k,
        delta_u: thresholds.delta_u,
        num_known,
        entropies: Vec::with_capacity(probs.nrows()),
    };
    for (i, row) in probs.rows().into_iter().enumerate() {
        let h = prediction_entropy(row)?.as_f64();
        sets.entropies.push(h);
        let (is_known, is_unknown) = match measure {
            ConfidenceMeasure::Entropy => (h <= thresholds.delta_k, h >= thresholds.delta_u),
            ConfidenceMeasure::MaxProb {
                known_min,
                unknown_factor,
            } => {
                let m = row[argmax(row)].as_f64();
                (m >= known_min, m <= unknown_factor / num_known as f64)
            }
        };
        if is_known {
            sets.known.push((i, argmax(row)));
        } else if is_unknown {
            sets.unknown.push(i);
        } else {
            sets.discarded.push(i);
        }
    }
    Ok(sets)
}

/// Pseudo-label sets from the frozen source model; both confident sets must
/// be nonempty.
pub fn assign_pseudo_labels<T: Scalar>(
    source_model: &ExpandedClassifier<T>,
    target_features: &Array2<T>,
    thresholds: Thresholds,
    measure: ConfidenceMeasure,
) -> Result<PseudoLabelSets> {
    let sets = partition_by_confidence(source_model, target_features, thresholds, measure)?;
    sets.require_nonempty()?;
    Ok(sets)
}

/// The two halves of the pseudo-label loss and their sum.
#[derive(Debug, Clone, Copy)]
pub struct PseudoLoss {
    pub total: Var,
    /// Mean cross-entropy on pseudo-known instances.
    pub known: Var,
    /// Mean `-log` of the summed unknown-output probability.
    pub unknown: Var,
}

/// Cross-entropy to the pseudo-label over all `|C_s| + K` outputs for known
/// instances, plus `-log sum_{c >= |C_s|} softmax_c` for unknown instances.
pub fn pseudo_label_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &ExpandedClassifier<T>,
    params: &BoundParams,
    known_x: &Array2<T>,
    known_labels: &[usize],
    unknown_x: &Array2<T>,
) -> Result<PseudoLoss> {
    if model.num_extra() == 0 {
        return Err(contract("pseudo-label loss needs an expanded head"));
    }
    if known_x.nrows() == 0 || unknown_x.nrows() == 0 {
        return Err(contract("pseudo-label batches must be nonempty"));
    }
    if known_labels.len() != known_x.nrows() {
        return Err(contract("one pseudo-label per known instance"));
    }
    let nk = model.num_known();
    let width = model.num_outputs();
    if let Some(&bad) = known_labels.iter().find(|&&c| c >= nk) {
        return Err(contract(format!("pseudo-label {bad} outside 0..{nk}")));
    }

    let xk = g.constant(known_x.clone());
    let logits_k = model.forward(g, params, xk)?;
    let known = cross_entropy(g, logits_k, known_labels)?;

    let xu = g.constant(unknown_x.clone());
    let logits_u = model.forward(g, params, xu)?;
    let probs_u = g.softmax_rows(logits_u)?;
    let extra = g.slice_cols(probs_u, nk, width)?;
    let mass = g.sum_rows(extra);
    let log_mass = g.log(mass)?;
    let mean = g.mean(log_mass);
    let unknown = g.scale(mean, -T::one());

    let total = g.add(known, unknown)?;
    Ok(PseudoLoss {
        total,
        known,
        unknown,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyHistogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub known_counts: Vec<usize>,
    pub unknown_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRow {
    pub index: usize,
    pub entropy: f64,
    pub assignment: PseudoAssignment,
    /// Whether the assignment agrees with the hidden label; `None` if discarded.
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    /// Fraction of pseudo-known instances whose hidden label equals the
    /// pseudo-label; `None` if the set is empty.
    pub known_precision: Option<f64>,
    /// Fraction of pseudo-unknown instances whose hidden class is not known.
    pub unknown_precision: Option<f64>,
    pub known_coverage: f64,
    pub unknown_coverage: f64,
    pub discarded_fraction: f64,
    pub histogram: EntropyHistogram,
    pub rows: Vec<ReliabilityRow>,
}

/// Scores pseudo-labels against hidden target labels (evaluation only).
pub fn pseudo_label_report(sets: &PseudoLabelSets, hidden_labels: &[usize], bins: usize) -> Result<ReliabilityReport> {
    if hidden_labels.len() != sets.len() {
        return Err(contract(format!(
            "{} hidden labels for {} target instances",
            hidden_labels.len(),
            sets.len()
        )));
    }
    let nk = sets.num_known;
    let n = sets.len().max(1) as f64;
    let ratio = |hit: usize, of: usize| (of > 0).then(|| hit as f64 / of as f64);

    let known_hits = sets.known.iter().filter(|&&(i, c)| hidden_labels[i] == c).count();
    let unknown_hits = sets.unknown.iter().filter(|&&i| hidden_labels[i] >= nk).count();

    let bins = bins.max(1);
    let top = (nk as f64).ln();
    let edges: Vec<f64> = (0..=bins).map(|b| top * b as f64 / bins as f64).collect();
    let mut known_counts = vec![0; bins];
    let mut unknown_counts = vec![0; bins];
    for (i, &h) in sets.entropies.iter().enumerate() {
        let b = (((h / top) * bins as f64).floor() as usize).min(bins - 1);
        if hidden_labels[i] < nk {
            known_counts[b] += 1;
        } else {
            unknown_counts[b] += 1;
        }
    }

    let rows = sets
        .assignments()
        .into_iter()
        .enumerate()
        .map(|(i, a)| ReliabilityRow {
            index: i,
            entropy: sets.entropies[i],
            assignment: a,
            correct: match a {
                PseudoAssignment::Known(c) => Some(hidden_labels[i] == c),
                PseudoAssignment::Unknown => Some(hidden_labels[i] >= nk),
                PseudoAssignment::Discarded => None,
            },
        })
        .collect();

    Ok(ReliabilityReport {
        known_precision: ratio(known_hits, sets.known.len()),
        unknown_precision: ratio(unknown_hits, sets.unknown.len()),
        known_coverage: sets.known.len() as f64 / n,
        unknown_coverage: sets.unknown.len() as f64 / n,
        discarded_fraction: sets.discarded.len() as f64 / n,
        histogram: EntropyHistogram {
            edges,
            known_counts,
            unknown_counts,
        },
        rows,
    })
}

fn assignment_label(a: PseudoAssignment) -> String {
    match a {
        PseudoAssignment::Known(c) => c.to_string(),
        PseudoAssignment::Unknown => "unknown".into(),
        PseudoAssignment::Discarded => "discarded".into(),
    }
}

/// `index,entropy,assignment` for every target instance (no ground truth).
pub fn write_assignments_csv(path: impl AsRef<Path>, sets: &PseudoLabelSets) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "entropy", "assignment"])?;
    for (i, a) in sets.assignments().into_iter().enumerate() {
        w.write_record([i.to_string(), sets.entropies[i].to_string(), assignment_label(a)])?;
    }
    w.flush()?;
    Ok(())
}

/// `index,entropy,assignment,correct`.
pub fn write_reliability_csv(path: impl AsRef<Path>, report: &ReliabilityReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "entropy", "assignment", "correct"])?;
    for r in &report.rows {
        let correct = match r.correct {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        w.write_record([
            r.index.to_string(),
            r.entropy.to_string(),
            assignment_label(r.assignment),
            correct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `bin_lo,bin_hi,known_count,unknown_count`.
pub fn write_histogram_csv(path: impl AsRef<Path>, hist: &EntropyHistogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "known_count", "unknown_count"])?;
    for b in 0..hist.known_counts.len() {
        w.write_record([
            hist.edges[b].to_string(),
            hist.edges[b + 1].to_string(),
            hist.known_counts[b].to_string(),
            hist.unknown_counts[b].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary lines of a reliability report as `metric,value` CSV.
pub fn write_reliability_summary(path: impl AsRef<Path>, report: &ReliabilityReport) -> Result<()> {
    let mut f = File::create(path)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
    writeln!(f, "metric,value")?;
    writeln!(f, "known_precision,{}", opt(report.known_precision))?;
    writeln!(f, "unknown_precision,{}", opt(report.unknown_precision))?;
    writeln!(f, "known_coverage,{}", report.known_coverage)?;
    writeln!(f, "unknown_coverage,{}", report.unknown_coverage)?;
    writeln!(f, "discarded_fraction,{}", report.discarded_fraction)?;
    Ok(())
}
