//! Reference computations for verification: central finite differences,
//! exact information quantities on small discrete distributions, and
//! empirical checks of the two information-theoretic propositions.
//!
//! Nothing here uses the autodiff graph, so agreement with it is evidence.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Largest alphabet accepted on any axis.
pub const MAX_SYMBOLS: usize = 6;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// A joint distribution over two small finite alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    table: Array2<f64>,
}

impl DiscreteJoint {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        let (r, c) = table.dim();
        if r == 0 || c == 0 || r > MAX_SYMBOLS || c > MAX_SYMBOLS {
            return Err(contract(format!("joint table must be between 1x1 and 6x6, got {r}x{c}")));
        }
        if table.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(contract("joint table entries must be finite and >= 0"));
        }
        let total: f64 = table.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(contract(format!("joint table sums to {total}, not 1")));
        }
        Ok(Self { table })
    }

    /// The independent joint `p(a) q(b)`.
    pub fn product(p: &[f64], q: &[f64]) -> Result<Self> {
        Self::new(Array2::from_shape_fn((p.len(), q.len()), |(i, j)| p[i] * q[j]))
    }

    /// `(1/b) sum_n p_n(i) p+_n(j)` by explicit loops, optionally symmetrized.
    pub fn from_paired_predictions(probs: &Array2<f64>, probs_plus: &Array2<f64>, symmetrize: bool) -> Result<Self> {
        if probs.dim() != probs_plus.dim() || probs.nrows() == 0 {
            return Err(contract("paired predictions must be nonempty and equally shaped"));
        }
        let (b, c) = probs.dim();
        let mut t = Array2::zeros((c, c));
        for i in 0..c {
            for j in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    s += probs[[n, i]] * probs_plus[[n, j]];
                }
                t[[i, j]] = s / b as f64;
            }
        }
        if symmetrize {
            let tt = t.t().to_owned();
            t = (&t + &tt) * 0.5;
        }
        let total: f64 = t.sum();
        t /= total;
        Self::new(t)
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.table.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        self.table.columns().into_iter().map(|c| c.sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self {
            table: self.table.t().to_owned(),
        }
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy(self.table.as_slice_memory_order().expect("owned table"))
    }

    /// `sum p log(p / (r q))`.
    pub fn mutual_information(&self) -> f64 {
        let (r, q) = (self.row_marginal(), self.col_marginal());
        let mut s = 0.0;
        for ((i, j), &p) in self.table.indexed_iter() {
            if p > 0.0 {
                s += p * (p / (r[i] * q[j])).ln();
            }
        }
        s
    }
}

/// `sum_{i,j} P_ij log(P_ij / (r_i q_j)^((beta+1)/2))` by direct summation.
pub fn exact_mi_beta(joint: &DiscreteJoint, beta: f64) -> f64 {
    let (r, q) = (joint.row_marginal(), joint.col_marginal());
    let e = 0.5 * (beta + 1.0);
    let mut s = 0.0;
    for ((i, j), &p) in joint.table.indexed_iter() {
        if p > 0.0 {
            s += p * (p.ln() - e * (r[i] * q[j]).ln());
        }
    }
    s
}

/// `H(rows) + H(cols) - H(joint)`, the entropy form of mutual information.
pub fn mi_by_entropies(joint: &DiscreteJoint) -> f64 {
    entropy(&joint.row_marginal()) + entropy(&joint.col_marginal()) - joint.joint_entropy()
}

/// Discrete chain `y -> x -> x+` with deterministic predictors on `x` and `x+`.
///
/// `p_xp_given_xy[y]` is `p(x+ | x, y)`; the chain is Markov when it does not
/// depend on `y` wherever `p(x, y) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub p_y: Vec<f64>,
    /// `ny x nx`.
    pub p_x_given_y: Array2<f64>,
    /// One `nx x nxp` kernel per label.
    pub p_xp_given_xy: Vec<Array2<f64>>,
    /// Prediction for every `x` symbol.
    pub predict: Vec<usize>,
    /// Prediction for every `x+` symbol.
    pub predict_plus: Vec<usize>,
}

impl ChainSpec {
    /// A chain whose transform kernel ignores the label.
    pub fn markov(
        p_y: Vec<f64>,
        p_x_given_y: Array2<f64>,
        p_xp_given_x: Array2<f64>,
        predict: Vec<usize>,
        predict_plus: Vec<usize>,
    ) -> Self {
        let kernels = vec![p_xp_given_x; p_y.len()];
        Self {
            p_y,
            p_x_given_y,
            p_xp_given_xy: kernels,
            predict,
            predict_plus,
        }
    }

    fn sizes(&self) -> (usize, usize, usize) {
        let nxp = self.p_xp_given_xy.first().map_or(0, |k| k.ncols());
        (self.p_y.len(), self.p_x_given_y.ncols(), nxp)
    }

    pub fn validate(&self) -> Result<()> {
        let (ny, nx, nxp) = self.sizes();
        if [ny, nx, nxp].iter().any(|&n| n == 0 || n > MAX_SYMBOLS) {
            return Err(contract(format!("chain alphabets must have 1..=6 symbols, got {ny}, {nx}, {nxp}")));
        }
        if self.p_x_given_y.nrows() != ny || self.p_xp_given_xy.len() != ny {
            return Err(contract("chain tables disagree on the label alphabet"));
        }
        if self.p_xp_given_xy.iter().any(|k| k.dim() != (nx, nxp)) {
            return Err(contract("transform kernels must all be nx x nxp"));
        }
        if self.predict.len() != nx || self.predict_plus.len() != nxp {
            return Err(contract("prediction maps must cover every symbol"));
        }
        let stochastic = |v: &[f64]| v.iter().all(|&p| p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !stochastic(&self.p_y)
            || self.p_x_given_y.rows().into_iter().any(|r| !stochastic(&r.to_vec()))
            || self
                .p_xp_given_xy
                .iter()
                .any(|k| k.rows().into_iter().any(|r| !stochastic(&r.to_vec())))
        {
            return Err(contract("chain tables must be probability distributions"));
        }
        for x in 0..nx {
            let mut reference: Option<usize> = None;
            for y in 0..ny {
                if self.p_y[y] * self.p_x_given_y[[y, x]] == 0.0 {
                    continue;
                }
                match reference {
                    None => reference = Some(y),
                    Some(y0) => {
                        let same = self.p_xp_given_xy[y0]
                            .row(x)
                            .iter()
                            .zip(self.p_xp_given_xy[y].row(x))
                            .all(|(a, b)| (a - b).abs() <= 1e-12);
                        if !same {
                            return Err(contract(format!(
                                "chain is not Markov: p(x+ | x={x}) differs between labels {y0} and {y}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Calls `f(y, x, x+, probability)` for every cell with positive mass.
    fn for_each_cell(&self, mut f: impl FnMut(usize, usize, usize, f64)) {
        let (ny, nx, nxp) = self.sizes();
        for y in 0..ny {
            for x in 0..nx {
                let pyx = self.p_y[y] * self.p_x_given_y[[y, x]];
                if pyx == 0.0 {
                    continue;
                }
                for xp in 0..nxp {
                    let p = pyx * self.p_xp_given_xy[y][[x, xp]];
                    if p > 0.0 {
                        f(y, x, xp, p);
                    }
                }
            }
        }
    }

    fn pair_mi(&self, rows: usize, cols: usize, pick: impl Fn(usize, usize, usize) -> (usize, usize)) -> f64 {
        let mut t = Array2::<f64>::zeros((rows, cols));
        self.for_each_cell(|y, x, xp, p| t[pick(y, x, xp)] += p);
        let total = t.sum();
        t /= total;
        mi_of_table(&t)
    }
}

fn mi_of_table(t: &Array2<f64>) -> f64 {
    let r: Vec<f64> = t.rows().into_iter().map(|v| v.sum()).collect();
    let q: Vec<f64> = t.columns().into_iter().map(|v| v.sum()).collect();
    let mut s = 0.0;
    for ((i, j), &p) in t.indexed_iter() {
        if p > 0.0 {
            s += p * (p / (r[i] * q[j])).ln();
        }
    }
    s
}

/// Information equalities that make `x+` carry exactly the label information of `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PremiseCheck {
    pub i_x_xp: f64,
    pub i_x_y: f64,
    pub i_xp_y: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Outcome {
    /// `I(y~; y~+)`.
    pub i_pred_pred: f64,
    /// `I(y~; y)`.
    pub i_pred_label: f64,
    pub holds: bool,
    pub premise: PremiseCheck,
}

/// Exact enumeration of `I(y~; y~+)` and `I(y~; y)` on a Markov chain.
pub fn check_prop1(chain: &ChainSpec) -> Result<Prop1Outcome> {
    chain.validate()?;
    let (ny, nx, nxp) = chain.sizes();
    let n_pred = chain.predict.iter().chain(&chain.predict_plus).max().map_or(1, |&m| m + 1);
    let i_pred_pred = chain.pair_mi(n_pred, n_pred, |_, x, xp| (chain.predict[x], chain.predict_plus[xp]));
    let i_pred_label = chain.pair_mi(n_pred, ny, |y, x, _| (chain.predict[x], y));
    let i_x_xp = chain.pair_mi(nx, nxp, |_, x, xp| (x, xp));
    let i_x_y = chain.pair_mi(nx, ny, |y, x, _| (x, y));
    let i_xp_y = chain.pair_mi(nxp, ny, |y, _, xp| (xp, y));
    let tol = 1e-9;
    Ok(Prop1Outcome {
        i_pred_pred,
        i_pred_label,
        holds: i_pred_pred <= i_pred_label + 1e-12,
        premise: PremiseCheck {
            i_x_xp,
            i_x_y,
            i_xp_y,
            satisfied: (i_x_xp - i_x_y).abs() < tol && (i_x_y - i_xp_y).abs() < tol,
        },
    })
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Random chain satisfying the premise by construction: each label owns a
/// disjoint block of `x` symbols, and `x+` is redrawn inside the block of the
/// label (so it keeps the label and nothing else). Both predictions use the
/// same random map.
pub fn premise_chain<R: Rng + ?Sized>(rng: &mut R) -> ChainSpec {
    let ny = rng.random_range(2..=3);
    let blocks: Vec<usize> = (0..ny).map(|_| rng.random_range(1..=2)).collect();
    let nx: usize = blocks.iter().sum();
    let mut owner = Vec::with_capacity(nx);
    for (y, &b) in blocks.iter().enumerate() {
        owner.extend(std::iter::repeat_n(y, b));
    }
    let mut p_x_given_y = Array2::zeros((ny, nx));
    let mut resample = Array2::zeros((ny, nx));
    for y in 0..ny {
        let cols: Vec<usize> = (0..nx).filter(|&x| owner[x] == y).collect();
        for (w, &x) in random_simplex(rng, cols.len()).iter().zip(&cols) {
            p_x_given_y[[y, x]] = *w;
        }
        for (w, &x) in random_simplex(rng, cols.len()).iter().zip(&cols) {
            resample[[y, x]] = *w;
        }
    }
    let kernel = Array2::from_shape_fn((nx, nx), |(x, xp)| resample[[owner[x], xp]]);
    let n_pred = rng.random_range(1..=4);
    let predict: Vec<usize> = (0..nx).map(|_| rng.random_range(0..n_pred)).collect();
    ChainSpec::markov(random_simplex(rng, ny), p_x_given_y, kernel, predict.clone(), predict)
}

/// Chain whose transform returns the label itself; `y~+` is the label.
pub fn label_transform_chain<R: Rng + ?Sized>(rng: &mut R) -> ChainSpec {
    let ny = rng.random_range(2..=3);
    let nx = rng.random_range(ny..=MAX_SYMBOLS);
    // Every x belongs to one label so y is a function of x.
    let owner: Vec<usize> = (0..nx).map(|x| if x < ny { x } else { rng.random_range(0..ny) }).collect();
    let mut p_x_given_y = Array2::zeros((ny, nx));
    for y in 0..ny {
        let cols: Vec<usize> = (0..nx).filter(|&x| owner[x] == y).collect();
        for (w, &x) in random_simplex(rng, cols.len()).iter().zip(&cols) {
            p_x_given_y[[y, x]] = *w;
        }
    }
    let kernel = Array2::from_shape_fn((nx, ny), |(x, y)| if owner[x] == y { 1.0 } else { 0.0 });
    let predict: Vec<usize> = (0..nx).map(|_| rng.random_range(0..3)).collect();
    ChainSpec::markov(random_simplex(rng, ny), p_x_given_y, kernel, predict, (0..ny).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub beta: f64,
    pub exact: f64,
    pub seeds: usize,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    /// Whether the error at the largest `n` is at most `1/factor` of the error
    /// at the smallest `n`.
    pub fn shrinks_by(&self, factor: f64) -> bool {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.mean_abs_error <= a.mean_abs_error / factor,
            _ => false,
        }
    }

    /// Mean error never increases with `n`.
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_abs_error <= w[0].mean_abs_error)
    }
}

/// `n` i.i.d. pairs from `joint`, as one-hot rows.
pub fn sample_pairs<R: Rng + ?Sized>(joint: &DiscreteJoint, n: usize, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let (r, c) = joint.table.dim();
    let cells: Vec<((usize, usize), f64)> = joint.table.indexed_iter().map(|(ij, &p)| (ij, p)).collect();
    let mut a = Array2::zeros((n, r));
    let mut b = Array2::zeros((n, c));
    for k in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = cells.iter().rev().find(|(_, p)| *p > 0.0).map(|x| x.0).unwrap_or((0, 0));
        for &((i, j), p) in &cells {
            acc += p;
            if u < acc {
                pick = (i, j);
                break;
            }
        }
        a[[k, pick.0]] = 1.0;
        b[[k, pick.1]] = 1.0;
    }
    (a, b)
}

/// Plug-in estimate from paired predictions, computed without the autodiff graph.
pub fn plug_in_mi_beta(probs: &Array2<f64>, probs_plus: &Array2<f64>, beta: f64) -> Result<f64> {
    Ok(exact_mi_beta(
        &DiscreteJoint::from_paired_predictions(probs, probs_plus, true)?,
        beta,
    ))
}

/// Mean absolute error of an estimator against the exact value of a
/// symmetric pair distribution, for each sample size over the given seeds.
pub fn check_prop2<F>(joint: &DiscreteJoint, beta: f64, sizes: &[usize], seeds: &[u64], mut estimator: F) -> Result<ConvergenceTable>
where
    F: FnMut(&Array2<f64>, &Array2<f64>, f64) -> Result<f64>,
{
    if sizes.is_empty() || seeds.is_empty() {
        return Err(contract("convergence check needs sample sizes and seeds"));
    }
    let exact = exact_mi_beta(joint, beta);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut errs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let (a, b) = sample_pairs(joint, n, &mut rng);
            errs.push((estimator(&a, &b, beta)? - exact).abs());
        }
        rows.push(ConvergenceRow {
            n,
            mean_abs_error: errs.iter().sum::<f64>() / errs.len() as f64,
            max_abs_error: errs.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(ConvergenceTable {
        beta,
        exact,
        seeds: seeds.len(),
        rows,
    })
}

/// Symmetric 3-class pair distribution used for the convergence check.
pub fn toy_pair_distribution() -> DiscreteJoint {
    DiscreteJoint::new(ndarray::array![
        [0.25, 0.04, 0.03],
        [0.04, 0.30, 0.05],
        [0.03, 0.05, 0.21]
    ])
    .expect("valid toy table")
}

pub fn write_convergence_csv(path: impl AsRef<Path>, tables: &[ConvergenceTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["beta", "n", "seeds", "exact", "mean_abs_error", "max_abs_error"])?;
    for t in tables {
        for r in &t.rows {
            w.write_record([
                format!("{}", t.beta),
                r.n.to_string(),
                t.seeds.to_string(),
                format!("{:.12}", t.exact),
                format!("{:.12}", r.mean_abs_error),
                format!("{:.12}", r.max_abs_error),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
