//! Source pretraining, target adaptation and open-set inference.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::consistency::consistency_loss_pair;
use crate::data::{LabeledData, TransformPolicy};
use crate::error::{contract, Error, Result};
use crate::model::{cross_entropy, BoundParams, ExpandedClassifier, Gradients, ParamScope};
use crate::pseudolabel::{
    assign_pseudo_labels, partition_by_confidence, pseudo_label_loss, ConfidenceMeasure, PseudoLabelSets,
    Thresholds,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(contract(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Updates the columns `cols` of one parameter matrix in place:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Array2<T>,
    grad: &Array2<T>,
    velocity: &mut Array2<T>,
    config: &OptimConfig,
    cols: Range<usize>,
) -> Result<()> {
    if param.dim() != grad.dim() || param.dim() != velocity.dim() {
        return Err(contract(format!(
            "sgd shapes differ: param {:?}, grad {:?}, velocity {:?}",
            param.dim(),
            grad.dim(),
            velocity.dim()
        )));
    }
    if cols.end > param.ncols() {
        return Err(contract("sgd column range out of bounds"));
    }
    let (lr, mu, wd) = (
        T::of(config.learning_rate),
        T::of(config.momentum),
        T::of(config.weight_decay),
    );
    for i in 0..param.nrows() {
        for j in cols.clone() {
            let v = mu * velocity[[i, j]] + grad[[i, j]] + wd * param[[i, j]];
            velocity[[i, j]] = v;
            param[[i, j]] -= lr * v;
        }
    }
    Ok(())
}

/// Momentum buffers and step counter for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub velocity: Vec<(Array2<T>, Array2<T>)>,
    pub step_count: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &ExpandedClassifier<T>, config: OptimConfig) -> Self {
        Self {
            config,
            velocity: model
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array2::zeros(l.bias.raw_dim())))
                .collect(),
            step_count: 0,
        }
    }

    /// One momentum step over the parameters selected by `scope`.
    pub fn step(&mut self, model: &mut ExpandedClassifier<T>, grads: &Gradients<T>, scope: ParamScope) -> Result<()> {
        if grads.layers.len() != model.layers().len() || self.velocity.len() != model.layers().len() {
            return Err(contract("gradient/velocity layer count differs from model"));
        }
        let ranges: Vec<_> = (0..model.layers().len()).map(|l| model.scope_columns(l, scope)).collect();
        for (li, layer) in model.layers_mut().iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (vw, vb) = &mut self.velocity[li];
            sgd_step(&mut layer.weight, gw, vw, &self.config, ranges[li].clone())?;
            sgd_step(&mut layer.bias, gb, vb, &self.config, ranges[li].clone())?;
        }
        self.step_count += 1;
        Ok(())
    }
}

fn gather_rows<T: Scalar>(x: &Array2<T>, idx: &[usize]) -> Array2<T> {
    x.select(Axis(0), idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 100,
            batch_size: 64,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 0 is the initialised model before any step.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTraining<T> {
    pub model: ExpandedClassifier<T>,
    pub log: Vec<EpochRecord>,
    pub steps: u64,
}

impl<T> SourceTraining<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.log.last().map_or(0.0, |r| r.accuracy)
    }
}

/// Mean cross-entropy and accuracy of a known-only model on labeled data.
pub fn source_metrics<T: Scalar>(model: &ExpandedClassifier<T>, data: &LabeledData<T>) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let x = g.constant(data.features.clone());
    let logits = model.forward(&mut g, &p, x)?;
    let loss = cross_entropy(&mut g, logits, &data.labels)?;
    let hits = g
        .value(logits)
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| argmax_row(*row) == y)
        .count();
    Ok((g.scalar(loss).as_f64(), hits as f64 / data.len() as f64))
}

fn argmax_row<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a known-only classifier with mini-batch cross-entropy.
pub fn train_source<T: Scalar>(
    data: &LabeledData<T>,
    num_known: usize,
    config: &SourceTrainConfig,
) -> Result<SourceTraining<T>> {
    if data.is_empty() {
        return Err(contract("source dataset is empty"));
    }
    if data.features.nrows() != data.labels.len() {
        return Err(contract("source features and labels differ in length"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= num_known) {
        return Err(contract(format!("source label {bad} outside 0..{num_known}")));
    }
    if config.batch_size == 0 {
        return Err(contract("batch_size must be positive"));
    }
    config.optim.validate()?;

    let mut model = ExpandedClassifier::build_source(data.dim(), &config.hidden, num_known, config.seed)?;
    let mut state = OptimState::new(&model, config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let (loss, accuracy) = source_metrics(&model, data)?;
    let mut log = vec![EpochRecord { epoch: 0, loss, accuracy }];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = gather_rows(&data.features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let xv = g.constant(x);
            let logits = model.forward(&mut g, &params, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite("source cross-entropy"));
            }
            g.backward(loss)?;
            state.step(&mut model, &params.gradients(&g), ParamScope::All)?;
        }
        let (loss, accuracy) = source_metrics(&model, data)?;
        log.push(EpochRecord { epoch, loss, accuracy });
    }
    log::debug!(
        "source training: {} epochs, final accuracy {:.4}",
        config.epochs,
        log.last().map_or(0.0, |r| r.accuracy)
    );
    Ok(SourceTraining {
        model,
        log,
        steps: state.step_count,
    })
}

/// Which loss terms an adaptation run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Pseudo-label loss only.
    PseudoLabel,
    /// Transformation consistency only.
    Consistency,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::PseudoLabel, Variant::Consistency, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PseudoLabel => "pl",
            Variant::Consistency => "tc",
            Variant::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub alpha_p: f64,
    pub alpha_c: f64,
    pub beta: f64,
    /// Number of extra (unknown) outputs.
    pub extra_outputs: usize,
    pub pseudo_batch: usize,
    pub consistency_batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// `None` uses the entropy defaults for the source class count.
    pub thresholds: Option<Thresholds>,
    pub confidence: ConfidenceMeasure,
    pub transform: TransformPolicy,
    pub optim: OptimConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha_p: 0.1,
            alpha_c: 1.0,
            beta: 1.3,
            extra_outputs: 8,
            pseudo_batch: 32,
            consistency_batch: 32,
            steps: 2000,
            seed: 0,
            thresholds: None,
            confidence: ConfidenceMeasure::Entropy,
            transform: TransformPolicy::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_p >= 0.0) || !(self.alpha_c >= 0.0) {
            return Err(contract("alpha_p and alpha_c must be >= 0"));
        }
        if self.alpha_p == 0.0 && self.alpha_c == 0.0 {
            return Err(contract("alpha_p and alpha_c cannot both be zero"));
        }
        if !(self.beta > 0.0) {
            return Err(contract("beta must be positive"));
        }
        if self.extra_outputs == 0 {
            return Err(contract("extra_outputs must be at least 1"));
        }
        if self.alpha_p > 0.0 && self.pseudo_batch < 2 {
            return Err(contract("pseudo_batch must be at least 2"));
        }
        if self.alpha_c > 0.0 && self.consistency_batch == 0 {
            return Err(contract("consistency_batch must be positive"));
        }
        self.transform.validate()?;
        self.optim.validate()
    }

    /// The same configuration restricted to one ablation variant.
    pub fn for_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        match variant {
            Variant::PseudoLabel => c.alpha_c = 0.0,
            Variant::Consistency => c.alpha_p = 0.0,
            Variant::Full => {}
        }
        c
    }

    pub fn thresholds_for(&self, num_known: usize) -> Result<Thresholds> {
        match self.thresholds {
            Some(t) => Ok(t),
            None => Thresholds::default_for(num_known),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub pseudo_loss: Option<f64>,
    pub consistency_loss: Option<f64>,
    pub total: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation<T> {
    pub model: ExpandedClassifier<T>,
    pub pseudo_labels: PseudoLabelSets,
    pub log: Vec<StepRecord>,
}

/// Inputs of one adaptation step.
#[derive(Debug, Clone)]
pub struct AdaptBatch<T> {
    pub known_x: Array2<T>,
    pub known_labels: Vec<usize>,
    pub unknown_x: Array2<T>,
    pub target_x: Array2<T>,
    pub target_plus: Array2<T>,
}

/// Graph nodes of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub pseudo: Option<Var>,
    pub consistency: Option<Var>,
    pub total: Var,
}

/// `alpha_p * L_P + alpha_c * L_C`; a term with zero weight is not built.
pub fn adaptation_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &ExpandedClassifier<T>,
    params: &BoundParams,
    batch: &AdaptBatch<T>,
    config: &AdaptConfig,
) -> Result<Objective> {
    let pseudo = if config.alpha_p > 0.0 {
        let l = pseudo_label_loss(g, model, params, &batch.known_x, &batch.known_labels, &batch.unknown_x)?;
        Some(l.total)
    } else {
        None
    };
    let consistency = if config.alpha_c > 0.0 {
        Some(consistency_loss_pair(
            g,
            model,
            params,
            &batch.target_x,
            &batch.target_plus,
            T::of(config.beta),
        )?)
    } else {
        None
    };
    let weighted_p = pseudo.map(|v| g.scale(v, T::of(config.alpha_p)));
    let weighted_c = consistency.map(|v| g.scale(v, T::of(config.alpha_c)));
    let total = match (weighted_p, weighted_c) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(contract("both loss weights are zero")),
    };
    Ok(Objective {
        pseudo,
        consistency,
        total,
    })
}

/// Draws the per-step batches: a stratified pseudo-labeled batch and an
/// unrestricted target batch with one transformed copy per row.
fn draw_batch<T: Scalar>(
    target: &Array2<T>,
    sets: &PseudoLabelSets,
    config: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> AdaptBatch<T> {
    let empty = || Array2::zeros((0, target.ncols()));
    let (known_x, known_labels, unknown_x) = if config.alpha_p > 0.0 {
        let (nk_set, nu_set) = (sets.known.len(), sets.unknown.len());
        let total = config.pseudo_batch;
        let nk = ((total as f64 * nk_set as f64 / (nk_set + nu_set) as f64).round() as usize).clamp(1, total - 1);
        let nu = total - nk;
        let picks: Vec<(usize, usize)> = (0..nk).map(|_| sets.known[rng.random_range(0..nk_set)]).collect();
        let uidx: Vec<usize> = (0..nu).map(|_| sets.unknown[rng.random_range(0..nu_set)]).collect();
        let kidx: Vec<usize> = picks.iter().map(|p| p.0).collect();
        (
            gather_rows(target, &kidx),
            picks.iter().map(|p| p.1).collect(),
            gather_rows(target, &uidx),
        )
    } else {
        (empty(), Vec::new(), empty())
    };
    let (target_x, target_plus) = if config.alpha_c > 0.0 {
        let n = config.consistency_batch.min(target.nrows());
        let idx = rand::seq::index::sample(rng, target.nrows(), n).into_vec();
        let x = gather_rows(target, &idx);
        let plus = config.transform.apply_batch(&x, rng);
        (x, plus)
    } else {
        (empty(), empty())
    };
    AdaptBatch {
        known_x,
        known_labels,
        unknown_x,
        target_x,
        target_plus,
    }
}

/// Adapts a source model to unlabeled target features.
///
/// The head is expanded by `extra_outputs`, pseudo-labels are assigned once
/// from the unchanged source model, then every step minimises
/// `alpha_p * L_P + alpha_c * L_C` over all parameters.
pub fn adapt<T: Scalar>(
    source_model: &ExpandedClassifier<T>,
    target_features: &Array2<T>,
    config: &AdaptConfig,
) -> Result<Adaptation<T>> {
    config.validate()?;
    if target_features.nrows() == 0 {
        return Err(contract("target set is empty"));
    }
    let thresholds = config.thresholds_for(source_model.num_known())?;
    let sets = if config.alpha_p > 0.0 {
        assign_pseudo_labels(source_model, target_features, thresholds, config.confidence)?
    } else {
        partition_by_confidence(source_model, target_features, thresholds, config.confidence)?
    };
    log::debug!(
        "pseudo-labels: {} known, {} unknown, {} discarded",
        sets.known.len(),
        sets.unknown.len(),
        sets.discarded.len()
    );

    let mut model = source_model.expand_head(config.extra_outputs, config.seed)?;
    let mut state = OptimState::new(&model, config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = draw_batch(target_features, &sets, config, &mut rng);
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let obj = adaptation_objective(&mut g, &model, &params, &batch, config)?;
        let total = g.scalar(obj.total).as_f64();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(obj.total)?;
        state.step(&mut model, &params.gradients(&g), ParamScope::All)?;
        log.push(StepRecord {
            step,
            pseudo_loss: obj.pseudo.map(|v| g.scalar(v).as_f64()),
            consistency_loss: obj.consistency.map(|v| g.scalar(v).as_f64()),
            total,
            learning_rate: config.optim.learning_rate,
        });
    }
    Ok(Adaptation {
        model,
        pseudo_labels: sets,
        log,
    })
}

/// Prediction of the open-set classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpenSetLabel {
    Known(usize),
    Unknown,
}

/// Decision rule on one probability row: unknown iff the summed extra-output
/// mass strictly exceeds the largest known probability.
pub fn open_set_decision<T: Scalar>(probs: ndarray::ArrayView1<T>, num_known: usize) -> OpenSetLabel {
    let known = probs.slice(ndarray::s![..num_known]);
    let best = argmax_row(known);
    let unknown_mass: T = probs.iter().skip(num_known).copied().sum();
    if unknown_mass > known[best] {
        OpenSetLabel::Unknown
    } else {
        OpenSetLabel::Known(best)
    }
}

pub fn predict_open_set<T: Scalar>(model: &ExpandedClassifier<T>, features: &Array2<T>) -> Result<Vec<OpenSetLabel>> {
    let probs = model.probabilities(features)?;
    Ok(decide_rows(probs.view(), model.num_known()))
}

fn decide_rows<T: Scalar>(probs: ArrayView2<T>, num_known: usize) -> Vec<OpenSetLabel> {
    probs
        .rows()
        .into_iter()
        .map(|r| open_set_decision(r, num_known))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use ndarray::array;

    #[test]
    fn plain_gradient_descent_without_momentum_or_decay() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.5, 0.25]];
        let mut v = Array2::zeros((1, 2));
        sgd_step(&mut p, &g, &mut v, &cfg, 0..2).unwrap();
        assert_eq!(p, array![[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]]);
    }

    #[test]
    fn zero_gradient_still_moves_by_momentum() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = array![[1.0]];
        let mut v = array![[2.0]];
        sgd_step(&mut p, &array![[0.0]], &mut v, &cfg, 0..1).unwrap();
        assert_eq!(v, array![[1.8]]);
        assert_eq!(p, array![[1.0 - 0.1 * 1.8]]);
    }

    #[test]
    fn two_hand_computed_steps() {
        // lr 0.5, mu 0.9, wd 0.1, constant gradient 1, p0 = 2.
        // v1 = 0 + 1 + 0.2 = 1.2;            p1 = 2 - 0.6 = 1.4
        // v2 = 1.08 + 1 + 0.14 = 2.22;       p2 = 1.4 - 1.11 = 0.29
        let cfg = OptimConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let mut p = array![[2.0f64]];
        let mut v = array![[0.0]];
        sgd_step(&mut p, &array![[1.0]], &mut v, &cfg, 0..1).unwrap();
        assert!((p[[0, 0]] - 1.4).abs() < 1e-15);
        sgd_step(&mut p, &array![[1.0]], &mut v, &cfg, 0..1).unwrap();
        assert!((v[[0, 0]] - 2.22).abs() < 1e-14);
        assert!((p[[0, 0]] - 0.29).abs() < 1e-14);
    }

    #[test]
    fn sgd_shape_mismatch_is_contract_error() {
        let mut p = Array2::<f64>::zeros((2, 2));
        let mut v = Array2::zeros((2, 2));
        let g = Array2::zeros((2, 3));
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, &OptimConfig::default(), 0..2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scoped_steps_leave_the_other_partition_untouched() {
        let src = ExpandedClassifier::<f64>::build_source(2, &[6], 3, 1).unwrap();
        let model = src.expand_head(4, 2).unwrap();
        let grads = Gradients {
            layers: model
                .layers()
                .iter()
                .map(|l| (Array2::ones(l.weight.raw_dim()), Array2::ones(l.bias.raw_dim())))
                .collect(),
        };
        let cfg = OptimConfig {
            learning_rate: 0.1,
            ..OptimConfig::default()
        };
        for (scope, frozen) in [
            (ParamScope::Expanded, ParamScope::Inherited),
            (ParamScope::Inherited, ParamScope::Expanded),
        ] {
            let mut m = model.clone();
            let mut st = OptimState::new(&m, cfg);
            st.step(&mut m, &grads, scope).unwrap();
            assert_eq!(st.step_count, 1);
            for li in 0..m.layers().len() {
                let cols = m.scope_columns(li, frozen);
                let before = model.layers()[li].weight.slice(ndarray::s![.., cols.clone()]);
                let after = m.layers()[li].weight.slice(ndarray::s![.., cols.clone()]);
                assert_eq!(before, after);
                let before = model.layers()[li].bias.slice(ndarray::s![.., cols.clone()]);
                let after = m.layers()[li].bias.slice(ndarray::s![.., cols]);
                assert_eq!(before, after);
            }
            assert_ne!(m, model);
        }
    }

    #[test]
    fn open_set_rule() {
        let p = array![0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(open_set_decision(p.view(), 4), OpenSetLabel::Known(3));
        let p = array![0.4, 0.0, 0.0, 0.0, 0.3, 0.3];
        assert_eq!(open_set_decision(p.view(), 4), OpenSetLabel::Unknown);
        let p = array![0.5, 0.0, 0.0, 0.0, 0.25, 0.25];
        assert_eq!(open_set_decision(p.view(), 4), OpenSetLabel::Known(0));
        let p = array![0.2, 0.2, 0.1, 0.1, 0.2, 0.2];
        assert_eq!(open_set_decision(p.view(), 4), OpenSetLabel::Unknown);
        let p = array![0.3, 0.3, 0.0, 0.0, 0.2, 0.2];
        assert_eq!(open_set_decision(p.view(), 4), OpenSetLabel::Unknown);
        let p = array![0.35, 0.35, 0.0, 0.0, 0.15, 0.15];
        assert_eq!(open_set_decision(p.view(), 4), OpenSetLabel::Known(0));
    }

    fn blobs() -> LabeledData<f64> {
        let cfg = SynthConfig {
            num_known: 2,
            num_unknown: 0,
            source_per_class: 40,
            target_per_class: 8,
            ..SynthConfig::default()
        };
        generate_synthetic::<f64>(&cfg, 5).unwrap().source
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs();
        let cfg = SourceTrainConfig {
            hidden: vec![16],
            epochs: 200,
            batch_size: 16,
            seed: 3,
            ..SourceTrainConfig::default()
        };
        let out = train_source(&data, 2, &cfg).unwrap();
        assert!(out.final_accuracy() >= 0.99, "{}", out.final_accuracy());
        assert!(out.log[1].loss < out.log[0].loss);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = blobs();
        let cfg = SourceTrainConfig {
            hidden: vec![16],
            epochs: 0,
            seed: 3,
            ..SourceTrainConfig::default()
        };
        let out = train_source(&data, 2, &cfg).unwrap();
        assert_eq!(out.model, ExpandedClassifier::build_source(2, &[16], 2, 3).unwrap());
        assert_eq!(out.steps, 0);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn empty_source_is_rejected() {
        let data = LabeledData::<f64> {
            features: Array2::zeros((0, 2)),
            labels: vec![],
        };
        assert!(train_source(&data, 2, &SourceTrainConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AdaptConfig::default();
        c.validate().unwrap();
        c.alpha_p = 0.0;
        c.alpha_c = 0.0;
        assert!(c.validate().is_err());
        let c = AdaptConfig {
            beta: 0.0,
            ..AdaptConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AdaptConfig::default().for_variant(Variant::PseudoLabel);
        assert_eq!((c.alpha_p, c.alpha_c), (0.1, 0.0));
        let c = AdaptConfig::default().for_variant(Variant::Consistency);
        assert_eq!((c.alpha_p, c.alpha_c), (0.0, 1.0));
    }
}
