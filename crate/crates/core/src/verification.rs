//! Acceptance checks shared by the `verify` command and the test suite.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::consistency::{consistency_loss_pair, mi_beta_estimate};
use crate::data::TransformPolicy;
use crate::error::Result;
use crate::experiment::{prepare, ExperimentConfig};
use crate::metrics::{median, report_from_confusion, EvalReport};
use crate::model::{cross_entropy, Activation, BoundParams, Dense, ExpandedClassifier, ParamScope};
use crate::oracle::{
    check_prop1, check_prop2, exact_mi_beta, finite_diff_grad, label_transform_chain, premise_chain,
    toy_pair_distribution, DiscreteJoint, DEFAULT_STEP,
};
use crate::pseudolabel::{
    partition_by_confidence, prediction_entropy, pseudo_label_loss, ConfidenceMeasure, PseudoAssignment, Thresholds,
};
use crate::trainer::{adaptation_objective, AdaptBatch, AdaptConfig, Variant};

/// Result of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(id: u8, name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> CriterionOutcome {
    let start = Instant::now();
    let (passed, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionOutcome {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// `|a - n| <= abs` or `|a - n| <= rel * max(|a|, |n|)`.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let d = (analytic - numeric).abs();
    d <= abs || d <= rel * analytic.abs().max(numeric.abs())
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.5..1.5))
}

/// Loss kinds covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    PseudoLabel,
    Consistency,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::CrossEntropy,
        LossKind::PseudoLabel,
        LossKind::Consistency,
        LossKind::Combined,
    ];
}

/// A random small model and batch for one loss.
struct GradInstance {
    model: ExpandedClassifier<f64>,
    batch: AdaptBatch<f64>,
    labels: Vec<usize>,
    config: AdaptConfig,
}

impl GradInstance {
    fn random(kind: LossKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = rng.random_range(2..=4);
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=5)).collect();
        let nk = rng.random_range(2..=4);
        let ne = rng.random_range(1..=3);
        let seed = rng.random();
        let mut model = match kind {
            LossKind::CrossEntropy => ExpandedClassifier::build_source(d, &hidden, nk, seed)?,
            _ => {
                // Larger extra-output weights than the default init keep every term well away from zero.
                let mut m = ExpandedClassifier::build(d, &hidden, nk, ne, seed)?;
                let last = m.layers().len() - 1;
                let cols = m.scope_columns(last, ParamScope::Expanded);
                let w = &mut m.layers_mut()[last].weight;
                for i in 0..w.nrows() {
                    for j in cols.clone() {
                        w[[i, j]] = rng.random_range(-1.0..1.0);
                    }
                }
                m
            }
        };
        // Nonzero biases keep ReLU pre-activations off the kink.
        for layer in model.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let nb = rng.random_range(2..=5);
        let labels: Vec<usize> = (0..nb).map(|_| rng.random_range(0..nk)).collect();
        let known_x = random_matrix(rng, nb, d);
        let (nu, nt) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let unknown_x = random_matrix(rng, nu, d);
        let target_x = random_matrix(rng, nt, d);
        let target_plus = TransformPolicy::default().apply_batch(&target_x, rng);
        let config = AdaptConfig {
            alpha_p: rng.random_range(0.05..1.0),
            alpha_c: rng.random_range(0.5..1.5),
            beta: rng.random_range(0.8..1.6),
            ..AdaptConfig::default()
        };
        Ok(Self {
            model,
            batch: AdaptBatch {
                known_x,
                known_labels: labels.clone(),
                unknown_x,
                target_x,
                target_plus,
            },
            labels,
            config,
        })
    }

    fn loss(
        &self,
        kind: LossKind,
        model: &ExpandedClassifier<f64>,
        g: &mut Graph<f64>,
        frozen: bool,
    ) -> Result<(Var, BoundParams)> {
        let p = if frozen { model.bind_frozen(g) } else { model.bind(g) };
        let b = &self.batch;
        let root = match kind {
            LossKind::CrossEntropy => {
                let x = g.constant(b.known_x.clone());
                let logits = model.forward(g, &p, x)?;
                cross_entropy(g, logits, &self.labels)
            }
            LossKind::PseudoLabel => Ok(pseudo_label_loss(g, model, &p, &b.known_x, &b.known_labels, &b.unknown_x)?.total),
            LossKind::Consistency => consistency_loss_pair(g, model, &p, &b.target_x, &b.target_plus, self.config.beta),
            LossKind::Combined => Ok(adaptation_objective(g, model, &p, b, &self.config)?.total),
        }?;
        Ok((root, p))
    }
}

/// Worst relative mismatch over all coordinates, and whether all pass.
fn gradient_check(kind: LossKind, rng: &mut ChaCha8Rng) -> Result<(bool, f64)> {
    let inst = GradInstance::random(kind, rng)?;
    let mut g = Graph::new();
    let (root, params) = inst.loss(kind, &inst.model, &mut g, false)?;
    g.backward(root)?;
    let analytic = params.gradients(&g).flatten();
    let flat = inst.model.flat_params();
    let numeric = finite_diff_grad(
        |v| {
            let m = inst.model.with_flat_params(v).expect("same length");
            let mut g = Graph::new();
            match inst.loss(kind, &m, &mut g, true) {
                Ok((root, _)) => g.scalar(root),
                Err(_) => f64::NAN,
            }
        },
        &flat,
        DEFAULT_STEP,
    )?;
    let mut ok = true;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        if !grad_close(*a, *n, 1e-4, 1e-6) {
            ok = false;
        }
        let scale = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / scale);
    }
    Ok((ok && analytic.len() == numeric.len(), worst))
}

/// Criterion 1: every loss against central differences on `instances` random cases each.
pub fn gradient_suite(instances: usize, seed: u64) -> CriterionOutcome {
    timed(1, "gradient suite", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        let mut worst = 0.0f64;
        for kind in LossKind::ALL {
            for i in 0..instances {
                let (ok, w) = gradient_check(kind, &mut rng)?;
                worst = worst.max(w);
                if !ok {
                    failures.push(format!("{kind:?}#{i}"));
                }
            }
        }
        Ok((
            failures.is_empty(),
            format!(
                "{} losses x {instances} instances, worst relative gap {worst:.2e}, failures {:?}",
                LossKind::ALL.len(),
                failures
            ),
        ))
    })
}

fn random_probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Array2<f64> {
    let sharp = rng.random_bool(0.3);
    let mut m = Array2::from_shape_simple_fn((b, c), || {
        let u: f64 = rng.random_range(0.0..1.0);
        if sharp {
            (8.0 * u).exp()
        } else {
            u + 1e-3
        }
    });
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

/// Criterion 2: graph estimate of `I_beta` against the brute-force oracle.
pub fn mi_oracle_suite(instances: usize, seed: u64) -> CriterionOutcome {
    timed(2, "mutual information oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut bound_violations = 0;
        for _ in 0..instances {
            let b = rng.random_range(1..=8);
            let c = rng.random_range(2..=6);
            let p = random_probs(&mut rng, b, c);
            let q = random_probs(&mut rng, b, c);
            let joint = DiscreteJoint::from_paired_predictions(&p, &q, true)?;
            for beta in [1.0, rng.random_range(1.0..2.0), rng.random_range(0.2..1.0)] {
                let system = mi_beta_estimate(&p, &q, beta)?;
                let oracle = exact_mi_beta(&joint, beta);
                worst = worst.max((system - oracle).abs());
                if beta == 1.0 && system < -1e-12 {
                    bound_violations += 1;
                }
                if beta >= 1.0 && system > beta * (c as f64).ln() + 1e-9 {
                    bound_violations += 1;
                }
            }
        }
        Ok((
            worst <= 1e-10 && bound_violations == 0,
            format!("{instances} instances, max |system - oracle| {worst:.2e}, bound violations {bound_violations}"),
        ))
    })
}

/// Criterion 3: estimator error at n=5000 is at most a third of that at n=50.
pub fn prop2_convergence() -> CriterionOutcome {
    timed(3, "estimator consistency", || {
        let joint = toy_pair_distribution();
        let seeds: Vec<u64> = (0..20).collect();
        let mut parts = Vec::new();
        let mut ok = true;
        for beta in [1.0, 1.3] {
            let t = check_prop2(&joint, beta, &[50, 500, 5000], &seeds, mi_beta_estimate)?;
            ok &= t.shrinks_by(3.0);
            let errs: Vec<String> = t.rows.iter().map(|r| format!("{:.2e}", r.mean_abs_error)).collect();
            parts.push(format!("beta {beta}: errors {}", errs.join(" > ")));
        }
        Ok((ok, parts.join("; ")))
    })
}

/// Criterion 4: the information inequality on random premise-satisfying chains.
pub fn prop1_inequality(chains: usize, seed: u64) -> CriterionOutcome {
    timed(4, "information inequality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut violations = 0;
        let mut premise_failures = 0;
        let mut max_slack = f64::NEG_INFINITY;
        for i in 0..chains {
            let chain = if i % 4 == 3 {
                label_transform_chain(&mut rng)
            } else {
                premise_chain(&mut rng)
            };
            let out = check_prop1(&chain)?;
            if !out.premise.satisfied {
                premise_failures += 1;
            }
            if !out.holds {
                violations += 1;
            }
            max_slack = max_slack.max(out.i_pred_pred - out.i_pred_label);
        }
        Ok((
            violations == 0 && premise_failures == 0,
            format!(
                "{chains} chains, violations {violations}, premise failures {premise_failures}, max I(y~;y~+) - I(y~;y) = {max_slack:.2e}"
            ),
        ))
    })
}

fn passthrough(num_known: usize) -> Result<ExpandedClassifier<f64>> {
    let layer = Dense {
        weight: Array2::eye(num_known),
        bias: Array2::zeros((1, num_known)),
        activation: Activation::Identity,
    };
    ExpandedClassifier::from_layers(vec![layer], num_known, 0)
}

fn log_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j].ln())
}

/// Eq.-2 style assignment from a probability row, computed in base 2.
fn assign_base2(p: &[f64], t: Thresholds) -> PseudoAssignment {
    let h2 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>();
    let ln2 = std::f64::consts::LN_2;
    if h2 <= t.delta_k / ln2 {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        PseudoAssignment::Known(best)
    } else if h2 >= t.delta_u / ln2 {
        PseudoAssignment::Unknown
    } else {
        PseudoAssignment::Discarded
    }
}

/// Criterion 5: worked examples, threshold formula, base invariance and monotonicity.
pub fn pseudo_label_mechanics(trials: usize, seed: u64) -> CriterionOutcome {
    timed(5, "pseudo-label mechanics", || {
        let mut notes = Vec::new();
        let mut ok = true;

        let r = 0.01 / 3.0;
        let s = 0.1 / 3.0;
        let rows = vec![vec![0.99, r, r, r], vec![0.25; 4], vec![0.9, s, s, s]];
        let model = passthrough(4)?;
        let t4 = Thresholds::default_for(4)?;
        let sets = partition_by_confidence(&model, &log_rows(&rows), t4, ConfidenceMeasure::Entropy)?;
        let h0 = prediction_entropy(ndarray::ArrayView1::from(&rows[0][..]))?;
        let h2 = prediction_entropy(ndarray::ArrayView1::from(&rows[2][..]))?;
        let examples = sets.known == vec![(0, 0)]
            && sets.unknown == vec![1]
            && sets.discarded == vec![2]
            && (h0 - 0.0670).abs() < 5e-5
            && (h2 - 0.434).abs() < 1e-3;
        ok &= examples;
        notes.push(format!("worked examples {}", if examples { "ok" } else { "MISMATCH" }));

        let t31 = Thresholds::default_for(31)?;
        let formula = (t31.delta_u - 1.7169).abs() < 1e-4 && (t31.delta_k - 0.1717).abs() < 1e-4;
        ok &= formula;
        notes.push(format!("delta_u(31) = {:.4}", t31.delta_u));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base_mismatch = 0;
        let mut monotone_violations = 0;
        for _ in 0..trials {
            let k = rng.random_range(2..=6);
            let n = 40;
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let temp = rng.random_range(0.2..6.0);
                    let v: Vec<f64> = (0..k).map(|_| (temp * rng.random_range(0.0..1.0f64)).exp()).collect();
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let x = log_rows(&probs);
            let model = passthrough(k)?;
            let max_h = (k as f64).ln();
            let du = rng.random_range(0.05..1.0) * max_h;
            let dk = rng.random_range(0.0..1.0) * du;
            let t = Thresholds { delta_k: dk, delta_u: du };
            let sets = partition_by_confidence(&model, &x, t, ConfidenceMeasure::Entropy)?;
            let natural = sets.assignments();
            // Softmax of log-probabilities reproduces the row up to rounding.
            let probs_seen = model.known_probabilities(&x)?;
            for (i, a) in natural.iter().enumerate() {
                if assign_base2(&probs_seen.row(i).to_vec(), t) != *a {
                    base_mismatch += 1;
                }
            }
            let raised = Thresholds {
                delta_k: rng.random_range(dk..=du),
                delta_u: du,
            };
            let lowered = Thresholds {
                delta_k: dk,
                delta_u: rng.random_range(dk..=du),
            };
            let sr = partition_by_confidence(&model, &x, raised, ConfidenceMeasure::Entropy)?;
            let sl = partition_by_confidence(&model, &x, lowered, ConfidenceMeasure::Entropy)?;
            if !sets.known.iter().all(|e| sr.known.contains(e)) {
                monotone_violations += 1;
            }
            if !sets.unknown.iter().all(|e| sl.unknown.contains(e)) {
                monotone_violations += 1;
            }
        }
        ok &= base_mismatch == 0 && monotone_violations == 0;
        notes.push(format!(
            "{trials} randomized threshold trials: base mismatches {base_mismatch}, monotonicity violations {monotone_violations}"
        ));
        Ok((ok, notes.join("; ")))
    })
}

/// Criterion 10: `OS = (k OS* + acc_unknown) / (k + 1)` on random confusion matrices.
pub fn metric_identity(matrices: usize, seed: u64) -> CriterionOutcome {
    timed(10, "metric identities", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut range_violations = 0;
        for _ in 0..matrices {
            let k = rng.random_range(1..=8);
            let side = k + 1;
            let mut c = Array2::from_shape_simple_fn((side, side), || rng.random_range(0..40u64));
            for i in 0..side {
                c[[i, i]] += 1;
            }
            let r: EvalReport = report_from_confusion(c)?;
            let u = r.unknown_acc.expect("unknown row is nonempty");
            let rhs = (k as f64 * r.os_star + u) / (k + 1) as f64;
            worst = worst.max((r.os - rhs).abs());
            if [r.os, r.os_star, r.total_acc].iter().any(|v| !(0.0..=1.0).contains(v)) {
                range_violations += 1;
            }
        }
        Ok((
            worst <= 1e-12 && range_violations == 0,
            format!("{matrices} matrices, max identity gap {worst:.2e}, out-of-range {range_violations}"),
        ))
    })
}

/// Per-seed results of the desk-scale protocol.
#[derive(Debug, Clone)]
pub struct DeskRun {
    pub seed: u64,
    pub baseline: EvalReport,
    pub full: EvalReport,
    pub pseudo_label: EvalReport,
    pub consistency: EvalReport,
    pub small_beta: EvalReport,
}

pub const SMALL_BETA: f64 = 0.85;

/// Runs every desk-scale variant needed by criteria 6 to 8 for one seed.
pub fn desk_run(config: &ExperimentConfig, seed: u64) -> Result<DeskRun> {
    let prepared = prepare::<f64>(config, seed)?;
    let adapt = &config.adapt;
    Ok(DeskRun {
        seed,
        baseline: prepared.baseline(adapt)?,
        full: prepared.run_variant(adapt, Variant::Full)?,
        pseudo_label: prepared.run_variant(adapt, Variant::PseudoLabel)?,
        consistency: prepared.run_variant(adapt, Variant::Consistency)?,
        small_beta: prepared.run_variant(
            &AdaptConfig {
                beta: SMALL_BETA,
                ..adapt.clone()
            },
            Variant::Full,
        )?,
    })
}

fn med(runs: &[DeskRun], f: impl Fn(&DeskRun) -> f64) -> f64 {
    median(&runs.iter().map(f).collect::<Vec<_>>())
}

/// Criterion 6: median Acc and OS of the full method at least `target`, and
/// at least `margin` above the unadapted baseline.
pub fn adaptation_quality(runs: &[DeskRun], target: f64, margin: f64, seconds: f64) -> CriterionOutcome {
    let acc = med(runs, |r| r.full.total_acc);
    let os = med(runs, |r| r.full.os);
    let base_acc = med(runs, |r| r.baseline.total_acc);
    let base_os = med(runs, |r| r.baseline.os);
    CriterionOutcome {
        id: 6,
        name: "desk-scale adaptation quality",
        passed: !runs.is_empty() && acc >= target && os >= target && acc - base_acc >= margin && os - base_os >= margin,
        detail: format!(
            "{} seeds: median Acc {acc:.3} (baseline {base_acc:.3}), median OS {os:.3} (baseline {base_os:.3}); need >= {target} and +{margin}",
            runs.len()
        ),
        seconds,
    }
}

/// Criterion 7: median Acc of the full method at least that of each single-loss variant.
pub fn ablation_ordering(runs: &[DeskRun], seconds: f64) -> CriterionOutcome {
    let full = med(runs, |r| r.full.total_acc);
    let pl = med(runs, |r| r.pseudo_label.total_acc);
    let tc = med(runs, |r| r.consistency.total_acc);
    CriterionOutcome {
        id: 7,
        name: "ablation ordering",
        passed: !runs.is_empty() && full >= pl && full >= tc,
        detail: format!("median Acc full {full:.3}, pl {pl:.3}, tc {tc:.3}"),
        seconds,
    }
}

/// Criterion 8: the OS* - Acc gap is larger at a small beta than at the default.
pub fn beta_sensitivity(runs: &[DeskRun], seconds: f64) -> CriterionOutcome {
    let small = med(runs, |r| r.small_beta.os_star - r.small_beta.total_acc);
    let default = med(runs, |r| r.full.os_star - r.full.total_acc);
    CriterionOutcome {
        id: 8,
        name: "beta sensitivity",
        passed: !runs.is_empty() && small > default,
        detail: format!("median OS* - Acc: beta {SMALL_BETA} -> {small:.3}, default -> {default:.3}"),
        seconds,
    }
}

/// Criteria 1 to 5 and 10, which need no training.
pub fn oracle_suite() -> Vec<CriterionOutcome> {
    vec![
        gradient_suite(50, 11),
        mi_oracle_suite(100, 12),
        prop2_convergence(),
        prop1_inequality(200, 14),
        pseudo_label_mechanics(200, 15),
        metric_identity(1000, 16),
    ]
}
