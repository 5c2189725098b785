//! Transformation-consistency objective: the β-weighted mutual information
//! between predictions on an input and on its transformed copy.
//!
//! For a batch of paired probability rows the empirical joint is
//! `P = (1/b) probsᵀ · probs_plus`, symmetrized to `(P + Pᵀ) / 2`, and
//!
//! ```text
//! I_β = Σ P log P − (β + 1)/2 · (Σ_c P_c log P_c + Σ_c' P_c' log P_c')
//! ```
//!
//! which equals `Σ P log(P / (P_c P_c')^((β+1)/2))` because the marginals
//! are the row and column sums of `P`. At β = 1 this is the plug-in mutual
//! information.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::TransformPolicy;
use crate::error::{contract, Error, Result};
use crate::model::{BoundParams, ExpandedClassifier};
use crate::scalar::Scalar;

/// Empirical joint distribution of paired predictions, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct JointPredictionMatrix {
    /// `C x C`
    pub joint: Var,
    /// `C x 1` row sums.
    pub row_marginal: Var,
    /// `1 x C` column sums.
    pub col_marginal: Var,
    pub symmetrized: bool,
}

fn check_prob_rows<T: Scalar>(m: &Array2<T>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let s: T = row.iter().copied().sum();
        if !s.is_finite() || (s - T::one()).abs() > T::of(1e-6) || row.iter().any(|&v| v < T::zero()) {
            return Err(contract(format!("{what} row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

fn joint_inner<T: Scalar>(g: &mut Graph<T>, probs: Var, probs_plus: Var, symmetrize: bool) -> Result<JointPredictionMatrix> {
    let (sa, sb) = (g.value(probs).dim(), g.value(probs_plus).dim());
    if sa != sb {
        return Err(Error::Dimension {
            op: "build_joint",
            left: sa,
            right: sb,
        });
    }
    if sa.0 == 0 {
        return Err(contract("joint needs at least one pair"));
    }
    check_prob_rows(g.value(probs), "probs")?;
    check_prob_rows(g.value(probs_plus), "probs_plus")?;

    let pt = g.transpose(probs);
    let prod = g.matmul(pt, probs_plus)?;
    let mut joint = g.scale(prod, T::one() / T::of(sa.0 as f64));
    if symmetrize {
        let jt = g.transpose(joint);
        let both = g.add(joint, jt)?;
        joint = g.scale(both, T::of(0.5));
    }
    let row_marginal = g.sum_rows(joint);
    let col_marginal = g.sum_cols(joint);
    Ok(JointPredictionMatrix {
        joint,
        row_marginal,
        col_marginal,
        symmetrized: symmetrize,
    })
}

/// Symmetrized empirical joint of two `b x C` probability matrices.
pub fn build_joint<T: Scalar>(g: &mut Graph<T>, probs: Var, probs_plus: Var) -> Result<JointPredictionMatrix> {
    joint_inner(g, probs, probs_plus, true)
}

/// Empirical joint without symmetrization.
pub fn build_joint_raw<T: Scalar>(g: &mut Graph<T>, probs: Var, probs_plus: Var) -> Result<JointPredictionMatrix> {
    joint_inner(g, probs, probs_plus, false)
}

fn neg_entropy_sum<T: Scalar>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let lp = g.log(p)?;
    let plp = g.mul(p, lp)?;
    Ok(g.sum(plp))
}

/// β-weighted mutual information of a joint, as a `1 x 1` node.
pub fn mi_beta<T: Scalar>(g: &mut Graph<T>, joint: &JointPredictionMatrix, beta: T) -> Result<Var> {
    if !(beta > T::zero()) {
        return Err(contract(format!("beta must be positive, got {beta}")));
    }
    let pj = neg_entropy_sum(g, joint.joint)?;
    let pr = neg_entropy_sum(g, joint.row_marginal)?;
    let pc = neg_entropy_sum(g, joint.col_marginal)?;
    let marg = g.add(pr, pc)?;
    let weighted = g.scale(marg, (beta + T::one()) / T::of(2.0));
    g.sub(pj, weighted)
}

/// `-I_β` between predictions on `batch` and on `batch_plus` (row-paired).
pub fn consistency_loss_pair<T: Scalar>(
    g: &mut Graph<T>,
    model: &ExpandedClassifier<T>,
    params: &BoundParams,
    batch: &Array2<T>,
    batch_plus: &Array2<T>,
    beta: T,
) -> Result<Var> {
    if batch.nrows() == 0 {
        return Err(contract("consistency batch must be nonempty"));
    }
    let x = g.constant(batch.clone());
    let xp = g.constant(batch_plus.clone());
    let logits = model.forward(g, params, x)?;
    let logits_plus = model.forward(g, params, xp)?;
    let probs = g.softmax_rows(logits)?;
    let probs_plus = g.softmax_rows(logits_plus)?;
    let joint = build_joint(g, probs, probs_plus)?;
    let mi = mi_beta(g, &joint, beta)?;
    Ok(g.scale(mi, -T::one()))
}

/// Draws one transformed copy per instance and returns `-I_β`.
pub fn consistency_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &ExpandedClassifier<T>,
    params: &BoundParams,
    batch: &Array2<T>,
    policy: &TransformPolicy,
    beta: T,
    rng: &mut R,
) -> Result<Var> {
    policy.validate()?;
    let plus = policy.apply_batch(batch, rng);
    consistency_loss_pair(g, model, params, batch, &plus, beta)
}

/// `Î_β` of two fixed probability matrices, evaluated without gradients.
pub fn mi_beta_estimate<T: Scalar>(probs: &Array2<T>, probs_plus: &Array2<T>, beta: T) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(probs.clone());
    let b = g.constant(probs_plus.clone());
    let joint = build_joint(&mut g, a, b)?;
    let mi = mi_beta(&mut g, &joint, beta)?;
    Ok(g.scalar(mi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn joint_values(probs: &Array2<f64>, plus: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut g = Graph::new();
        let a = g.constant(probs.clone());
        let b = g.constant(plus.clone());
        let j = build_joint(&mut g, a, b).unwrap();
        (
            g.value(j.joint).clone(),
            g.value(j.row_marginal).clone(),
            g.value(j.col_marginal).clone(),
        )
    }

    fn random_probs(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_simple_fn((b, c), || rng.random_range(0.01..1.0));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        m
    }

    #[test]
    fn one_hot_pair_gives_single_cell() {
        let p = array![[0.0, 0.0, 1.0, 0.0]];
        let (j, r, c) = joint_values(&p, &p);
        let mut expected = Array2::zeros((4, 4));
        expected[[2, 2]] = 1.0;
        assert_eq!(j, expected);
        assert_eq!(r.column(0), c.row(0));
    }

    #[test]
    fn uniform_rows_give_uniform_joint() {
        let p = Array2::from_elem((5, 3), 1.0 / 3.0);
        let (j, _, _) = joint_values(&p, &p);
        assert!(j.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn joint_matches_brute_force_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_probs(&mut rng, 5, 4);
        let b = random_probs(&mut rng, 5, 4);
        let (j, r, c) = joint_values(&a, &b);
        for ci in 0..4 {
            for cj in 0..4 {
                let mut raw_ij = 0.0;
                let mut raw_ji = 0.0;
                for n in 0..5 {
                    raw_ij += a[[n, ci]] * b[[n, cj]];
                    raw_ji += a[[n, cj]] * b[[n, ci]];
                }
                let want = 0.5 * (raw_ij + raw_ji) / 5.0;
                assert!((j[[ci, cj]] - want).abs() < 1e-12);
            }
        }
        assert!((j.sum() - 1.0).abs() < 1e-12);
        for k in 0..4 {
            assert!((r[[k, 0]] - j.row(k).sum()).abs() < 1e-15);
            assert!((c[[0, k]] - j.column(k).sum()).abs() < 1e-15);
        }
        assert_eq!(j, j.t());
    }

    #[test]
    fn joint_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array2::from_elem((2, 3), 1.0 / 3.0));
        let b = g.constant(Array2::from_elem((3, 3), 1.0 / 3.0));
        assert!(matches!(build_joint(&mut g, a, b), Err(Error::Dimension { .. })));
    }

    fn mi_of_joint(p: Array2<f64>, beta: f64) -> f64 {
        // Feed the joint through a one-pair "batch" is not possible in
        // general, so assemble the graph directly from the joint matrix.
        let mut g = Graph::new();
        let joint = g.constant(p);
        let row_marginal = g.sum_rows(joint);
        let col_marginal = g.sum_cols(joint);
        let j = JointPredictionMatrix {
            joint,
            row_marginal,
            col_marginal,
            symmetrized: true,
        };
        let v = mi_beta(&mut g, &j, beta).unwrap();
        g.scalar(v)
    }

    #[test]
    fn independent_joint_has_zero_mi() {
        let m = array![0.2, 0.5, 0.3];
        let p = Array2::from_shape_fn((3, 3), |(i, j)| m[i] * m[j]);
        assert!(mi_of_joint(p, 1.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_joint_gives_beta_log_c() {
        let p = Array2::eye(10) / 10.0;
        let v = mi_of_joint(p, 1.3);
        assert!((v - 1.3 * 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.9934).abs() < 1e-4);
    }

    #[test]
    fn beta_must_be_positive() {
        let p = Array2::from_elem((2, 2), 0.25);
        let mut g = Graph::new();
        let joint = g.constant(p);
        let r = g.sum_rows(joint);
        let c = g.sum_cols(joint);
        let j = JointPredictionMatrix {
            joint,
            row_marginal: r,
            col_marginal: c,
            symmetrized: true,
        };
        assert!(mi_beta(&mut g, &j, 0.0).is_err());
        assert!(mi_beta(&mut g, &j, -1.0).is_err());
    }

    #[test]
    fn transposed_inputs_give_identical_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_probs(&mut rng, 6, 5);
        let b = random_probs(&mut rng, 6, 5);
        let x = mi_beta_estimate(&a, &b, 1.3).unwrap();
        let y = mi_beta_estimate(&b, &a, 1.3).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn collapse_scores_zero_and_spreading_scores_higher() {
        let one = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(mi_beta_estimate(&one, &one, 1.3f64).unwrap().abs() < 1e-12);
        let two = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let three = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let i2 = mi_beta_estimate(&two, &two, 1.3).unwrap();
        let i3 = mi_beta_estimate(&three, &three, 1.3).unwrap();
        assert!(0.0 < i2 && i2 < i3);
        // Uniform predictions carry no dependence; only the (beta - 1) marginal bonus remains.
        let uniform = Array2::from_elem((4, 3), 1.0 / 3.0);
        let iu = mi_beta_estimate(&uniform, &uniform, 1.3f64).unwrap();
        assert!((iu - 0.3 * 3f64.ln()).abs() < 1e-12);
        assert!(iu < i3);
    }

    #[test]
    fn identity_transform_loss_on_collapsed_model_is_zero() {
        use crate::model::{Activation, Dense};
        // Constant logits strongly favouring class 0 for every input.
        let layer = Dense {
            weight: Array2::zeros((2, 3)),
            bias: array![[800.0, 0.0, 0.0]],
            activation: Activation::Identity,
        };
        let m = ExpandedClassifier::from_layers(vec![layer], 2, 1).unwrap();
        let mut g = Graph::<f64>::new();
        let p = m.bind(&mut g);
        let x = array![[0.1, 0.2], [1.0, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = consistency_loss(&mut g, &m, &p, &x, &TransformPolicy::identity(), 1.3, &mut rng).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
    }
}
