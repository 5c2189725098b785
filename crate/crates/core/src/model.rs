//! Multilayer perceptron with an expandable output head.
//!
//! The final layer emits `num_known + num_extra` logits. Its first
//! `num_known` columns, together with every hidden layer, form the inherited
//! parameter set; the last `num_extra` columns (weights and biases) form the
//! expanded set trained from scratch on the target domain.

use std::ops::Range;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Standard deviation of freshly initialised expanded-head weights.
pub const EXPANDED_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer computing `act(x · weight + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `fan_in x fan_out`
    pub weight: Array2<T>,
    /// `1 x fan_out`
    pub bias: Array2<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    fn gaussian(fan_in: usize, fan_out: usize, std: f64, act: Activation, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || T::of(normal.sample(rng)));
        Dense {
            weight,
            bias: Array2::zeros((1, fan_out)),
            activation: act,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// Which trainable scalars an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    All,
    /// Parameters carried over from the source model.
    Inherited,
    /// The `num_extra` new output columns.
    Expanded,
}

/// Per-layer gradients (weight, bias), shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Array2<T>, Array2<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Concatenation in the order of [`ExpandedClassifier::flat_params`].
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

/// Graph handles of a model's parameters for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn gradients<T: Scalar>(&self, g: &Graph<T>) -> Gradients<T> {
        Gradients {
            layers: self
                .vars
                .iter()
                .map(|&(w, b)| (g.grad(w).clone(), g.grad(b).clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedClassifier<T> {
    layers: Vec<Dense<T>>,
    num_known: usize,
    num_extra: usize,
}

impl<T: Scalar> ExpandedClassifier<T> {
    /// Builds a classifier with `num_extra >= 1` unknown outputs.
    ///
    /// Weights are drawn from `N(0, 2 / fan_in)`, biases start at zero.
    pub fn build(
        input_dim: usize,
        hidden: &[usize],
        num_known: usize,
        num_extra: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_extra < 1 {
            return Err(contract("num_extra must be at least 1; use build_source for a known-only head"));
        }
        Self::build_inner(input_dim, hidden, num_known, num_extra, seed)
    }

    /// Builds a known-only classifier, as trained on the source domain.
    pub fn build_source(input_dim: usize, hidden: &[usize], num_known: usize, seed: u64) -> Result<Self> {
        Self::build_inner(input_dim, hidden, num_known, 0, seed)
    }

    fn build_inner(
        input_dim: usize,
        hidden: &[usize],
        num_known: usize,
        num_extra: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(contract("input_dim must be at least 1"));
        }
        if num_known < 2 {
            return Err(contract("num_known must be at least 2"));
        }
        if hidden.contains(&0) {
            return Err(contract("hidden layer widths must be nonzero"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            let std = (2.0 / fan_in as f64).sqrt();
            layers.push(Dense::gaussian(fan_in, h, std, Activation::Relu, &mut rng));
            fan_in = h;
        }
        let std = (2.0 / fan_in as f64).sqrt();
        layers.push(Dense::gaussian(
            fan_in,
            num_known + num_extra,
            std,
            Activation::Identity,
            &mut rng,
        ));
        Ok(Self {
            layers,
            num_known,
            num_extra,
        })
    }

    /// Assembles a classifier from explicit layers, checking shape consistency.
    pub fn from_layers(layers: Vec<Dense<T>>, num_known: usize, num_extra: usize) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| contract("a classifier needs at least one layer"))?;
        if last.fan_out() != num_known + num_extra {
            return Err(contract(format!(
                "final layer emits {} logits, expected {}",
                last.fan_out(),
                num_known + num_extra
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(contract(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.dim() != (1, l.fan_out()) {
                return Err(contract(format!("layer {i} bias has shape {:?}", l.bias.dim())));
            }
        }
        Ok(Self {
            layers,
            num_known,
            num_extra,
        })
    }

    /// Copies this known-only model and appends `k` unknown outputs.
    ///
    /// Hidden layers and the first `num_known` output columns are copied
    /// bitwise. New columns get `N(0, 0.01^2)` weights and zero bias.
    pub fn expand_head(&self, k: usize, seed: u64) -> Result<Self> {
        if self.num_extra != 0 {
            return Err(contract("expand_head expects a known-only source model"));
        }
        if k < 1 {
            return Err(contract("expanded head needs at least one extra output"));
        }
        let mut layers = self.layers.clone();
        let last = layers.last_mut().expect("at least one layer");
        let fan_in = last.fan_in();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = Dense::<T>::gaussian(fan_in, k, EXPANDED_INIT_STD, Activation::Identity, &mut rng);
        let weight = ndarray::concatenate(ndarray::Axis(1), &[last.weight.view(), fresh.weight.view()])
            .expect("same fan_in");
        let bias = ndarray::concatenate(ndarray::Axis(1), &[last.bias.view(), fresh.bias.view()])
            .expect("single row");
        last.weight = weight;
        last.bias = bias;
        Ok(Self {
            layers,
            num_known: self.num_known,
            num_extra: k,
        })
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    pub fn num_extra(&self) -> usize {
        self.num_extra
    }

    pub fn num_outputs(&self) -> usize {
        self.num_known + self.num_extra
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Every parameter, layer by layer: weight (row-major) then bias.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// A copy with parameters replaced from a [`flat_params`](Self::flat_params) vector.
    pub fn with_flat_params(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_parameters() {
            return Err(contract(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for l in &mut out.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(out)
    }

    /// Output columns of `layer` that belong to `scope`.
    pub fn scope_columns(&self, layer: usize, scope: ParamScope) -> Range<usize> {
        let width = self.layers[layer].fan_out();
        let is_last = layer + 1 == self.layers.len();
        match (scope, is_last) {
            (ParamScope::All, _) => 0..width,
            (ParamScope::Inherited, false) => 0..width,
            (ParamScope::Expanded, false) => 0..0,
            (ParamScope::Inherited, true) => 0..self.num_known,
            (ParamScope::Expanded, true) => self.num_known..width,
        }
    }

    /// Registers every parameter as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers parameters as constants (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }

    /// Logits for a `b x input_dim` batch node.
    pub fn forward(&self, g: &mut Graph<T>, params: &BoundParams, x: Var) -> Result<Var> {
        let (rows, cols) = g.value(x).dim();
        if cols != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward",
                left: (rows, cols),
                right: (self.input_dim(), self.num_outputs()),
            });
        }
        let mut h = x;
        for (layer, &(w, b)) in self.layers.iter().zip(&params.vars) {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = match layer.activation {
                Activation::Relu => g.relu(z),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    /// Logits without building a differentiable graph.
    pub fn logits(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &params, xv)?;
        Ok(g.value(out).clone())
    }

    /// Softmax probabilities over all outputs.
    pub fn probabilities(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let logits = self.logits(x)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(crate::autodiff::softmax_kernel(logits.view()))
    }

    /// Softmax over the first `num_known` logits only, i.e. the source head.
    pub fn known_probabilities(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let logits = self.logits(x)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(crate::autodiff::softmax_kernel(
            logits.slice(s![.., ..self.num_known]),
        ))
    }
}

/// Mean softmax cross-entropy of `logits` (`b x C`) against class indices.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, width) = g.value(logits).dim();
    if rows != labels.len() || rows == 0 {
        return Err(contract(format!("{rows} logit rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= width) {
        return Err(contract(format!("label {bad} outside 0..{width}")));
    }
    let probs = g.softmax_rows(logits)?;
    let logp = g.log(probs)?;
    let mut onehot = Array2::zeros((rows, width));
    for (i, &c) in labels.iter().enumerate() {
        onehot[[i, c]] = T::one();
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(logp, onehot)?;
    let picked = g.sum(picked);
    Ok(g.scale(picked, -T::one() / T::of(rows as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn build_is_deterministic() {
        let a = ExpandedClassifier::<f64>::build(2, &[16], 4, 6, 7).unwrap();
        let b = ExpandedClassifier::<f64>::build(2, &[16], 4, 6, 7).unwrap();
        assert_eq!(a, b);
        let c = ExpandedClassifier::<f64>::build(2, &[16], 4, 6, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_shape_is_known_plus_extra() {
        let m = ExpandedClassifier::<f64>::build(2, &[16], 4, 6, 7).unwrap();
        let out = m.logits(&Array2::zeros((5, 2))).unwrap();
        assert_eq!(out.dim(), (5, 10));
    }

    #[test]
    fn build_rejects_degenerate_dims() {
        assert!(ExpandedClassifier::<f64>::build(0, &[4], 4, 2, 1).is_err());
        assert!(ExpandedClassifier::<f64>::build(2, &[4], 1, 2, 1).is_err());
        assert!(ExpandedClassifier::<f64>::build(2, &[4], 4, 0, 1).is_err());
        assert!(ExpandedClassifier::<f64>::build(2, &[0], 4, 1, 1).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut m = ExpandedClassifier::<f64>::build(3, &[5], 4, 2, 1).unwrap();
        for l in m.layers_mut() {
            l.weight.fill(0.0);
        }
        let x = array![[1.0, -2.0, 0.5]];
        assert!(m.logits(&x).unwrap().iter().all(|&v| v == 0.0));
        let p = m.probabilities(&x).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_single_hidden_layer() {
        let layers = vec![
            Dense {
                weight: array![[1.0, -1.0], [2.0, 0.5]],
                bias: array![[0.5, 0.0]],
                activation: Activation::Relu,
            },
            Dense {
                weight: array![[1.0, 2.0], [3.0, -1.0]],
                bias: array![[0.0, 1.0]],
                activation: Activation::Identity,
            },
        ];
        let m = ExpandedClassifier::from_layers(layers, 2, 0).unwrap();
        // h = relu([1,1]·W1 + b1) = relu([3.5, -0.5]) = [3.5, 0]
        // out = [3.5, 7.0] + [0, 1] = [3.5, 8.0]
        let out = m.logits(&array![[1.0, 1.0]]).unwrap();
        assert_eq!(out, array![[3.5, 8.0]]);
    }

    #[test]
    fn expand_head_inherits_known_logits_exactly() {
        let src = ExpandedClassifier::<f64>::build_source(3, &[8, 8], 4, 11).unwrap();
        let exp = src.expand_head(6, 5).unwrap();
        assert_eq!(exp.num_outputs(), 10);
        let x = Array2::from_shape_fn((7, 3), |(i, j)| (i as f64 - 3.0) * 0.7 + j as f64 * 0.3);
        let a = src.logits(&x).unwrap();
        let b = exp.logits(&x).unwrap();
        assert_eq!(a, b.slice(s![.., ..4]).to_owned());
        assert_eq!(src.layers()[0], exp.layers()[0]);
    }

    #[test]
    fn expand_head_is_deterministic_and_checked() {
        let src = ExpandedClassifier::<f64>::build_source(2, &[4], 3, 1).unwrap();
        assert_eq!(src.expand_head(6, 9).unwrap(), src.expand_head(6, 9).unwrap());
        assert!(src.expand_head(0, 9).is_err());
        let exp = src.expand_head(2, 9).unwrap();
        assert!(exp.expand_head(2, 9).is_err());
    }

    #[test]
    fn zero_expanded_weights_give_equal_unknown_probabilities() {
        let src = ExpandedClassifier::<f64>::build_source(2, &[4], 3, 1).unwrap();
        let mut exp = src.expand_head(5, 2).unwrap();
        let last = exp.layers_mut().last_mut().unwrap();
        last.weight.slice_mut(s![.., 3..]).fill(0.0);
        let p = exp.probabilities(&array![[0.3, -1.0], [2.0, 1.0]]).unwrap();
        for row in p.rows() {
            for c in 4..8 {
                assert_eq!(row[c], row[3]);
            }
        }
    }

    #[test]
    fn scopes_partition_every_column() {
        let m = ExpandedClassifier::<f64>::build(2, &[5, 6], 4, 3, 0).unwrap();
        for layer in 0..m.layers().len() {
            let width = m.layers()[layer].fan_out();
            let inh = m.scope_columns(layer, ParamScope::Inherited);
            let ext = m.scope_columns(layer, ParamScope::Expanded);
            for c in 0..width {
                assert!(inh.contains(&c) ^ ext.contains(&c), "layer {layer} column {c}");
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = ExpandedClassifier::<f64>::build(3, &[8], 3, 2, 4).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.1);
        let full = m.logits(&x).unwrap();
        for i in 0..6 {
            let one = m.logits(&x.slice(s![i..i + 1, ..]).to_owned()).unwrap();
            assert_eq!(one.row(0), full.row(i));
        }
    }

    #[test]
    fn forward_checks_input_width() {
        let m = ExpandedClassifier::<f64>::build(3, &[8], 3, 2, 4).unwrap();
        assert!(matches!(
            m.logits(&Array2::zeros((2, 4))),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_gradient_matches_fd() {
        let m = ExpandedClassifier::<f64>::build(2, &[4], 2, 1, 3).unwrap();
        let x = array![[0.5, -1.0], [1.5, 0.3]];
        let loss = |m: &ExpandedClassifier<f64>| {
            let mut g = Graph::new();
            let p = m.bind(&mut g);
            let xv = g.constant(x.clone());
            let out = m.forward(&mut g, &p, xv).unwrap();
            let sq = g.mul(out, out).unwrap();
            let root = g.sum(sq);
            (g, p, root)
        };
        let (mut g, p, root) = loss(&m);
        g.backward(root).unwrap();
        let grads = p.gradients(&g);
        let h = 1e-5;
        for li in 0..m.layers().len() {
            for idx in 0..m.layers()[li].weight.len() {
                let eval = |d: f64| {
                    let mut mm = m.clone();
                    mm.layers_mut()[li].weight.as_slice_mut().unwrap()[idx] += d;
                    let (g, _, r) = loss(&mm);
                    g.scalar(r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grads.layers[li].0.as_slice().unwrap()[idx];
                assert!((a - fd).abs() <= (1e-4 * a.abs().max(fd.abs())).max(1e-6));
            }
        }
    }
}
