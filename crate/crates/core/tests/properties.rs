use ndarray::Array2;
use osda::autodiff::Graph;
use osda::consistency::{build_joint, consistency_loss_pair, mi_beta, mi_beta_estimate};
use osda::data::TransformPolicy;
use osda::metrics::{evaluate, report_from_confusion};
use osda::model::{ExpandedClassifier, ParamScope};
use osda::oracle::{exact_mi_beta, finite_diff_grad, DiscreteJoint};
use osda::pseudolabel::{partition_by_confidence, pseudo_label_loss, ConfidenceMeasure, Thresholds};
use osda::trainer::{adaptation_objective, predict_open_set, AdaptBatch, AdaptConfig, OpenSetLabel, OptimConfig, OptimState};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::collection::vec(0.0f64..4.0, cols), rows).prop_map(move |raw| {
        let mut m = Array2::zeros((rows, cols));
        for (i, r) in raw.iter().enumerate() {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            for (j, v) in e.iter().enumerate() {
                m[[i, j]] = v / s;
            }
        }
        m
    })
}

fn paired_probs() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..=8, 2usize..=6).prop_flat_map(|(b, c)| (prob_matrix(b, c), prob_matrix(b, c)))
}

fn confusion() -> impl Strategy<Value = Array2<u64>> {
    (1usize..=6).prop_flat_map(|k| {
        prop::collection::vec(prop::collection::vec(0u64..30, k + 1), k + 1).prop_map(move |rows| {
            let side = k + 1;
            let mut c = Array2::zeros((side, side));
            for (i, r) in rows.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    c[[i, j]] = *v;
                }
                // Every class keeps at least one instance.
                c[[i, i]] += 1;
            }
            c
        })
    })
}

fn random_model(seed: u64, d: usize, nk: usize, ne: usize) -> ExpandedClassifier<f64> {
    let mut m = ExpandedClassifier::build(d, &[5], nk, ne, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for layer in m.layers_mut() {
        layer.bias.mapv_inplace(|_| rand::Rng::random_range(&mut rng, -0.5..0.5));
    }
    m
}

fn random_features(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rand::Rng::random_range(&mut rng, -3.0..3.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn os_identity_and_ranges(c in confusion()) {
        let r = report_from_confusion(c).unwrap();
        let k = r.num_known as f64;
        let u = r.unknown_acc.unwrap();
        prop_assert!((r.os - (k * r.os_star + u) / (k + 1.0)).abs() < 1e-12);
        for v in [r.os, r.os_star, r.total_acc, u] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn evaluation_ignores_instance_order(
        labels in prop::collection::vec(0usize..5, 10..60),
        guesses in prop::collection::vec(0usize..4, 60),
        seed in any::<u64>(),
    ) {
        let mut labels = labels;
        labels.extend(0..5);
        let preds: Vec<OpenSetLabel> = labels
            .iter()
            .zip(guesses.iter().cycle())
            .map(|(_, &g)| if g == 3 { OpenSetLabel::Unknown } else { OpenSetLabel::Known(g) })
            .collect();
        let a = evaluate(&preds, &labels, 3).unwrap();
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<OpenSetLabel> = idx.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let b = evaluate(&p2, &l2, 3).unwrap();
        prop_assert_eq!(a.confusion, b.confusion);
        prop_assert_eq!(a.os, b.os);
        prop_assert_eq!(a.total_acc, b.total_acc);
    }

    #[test]
    fn mi_matches_oracle_and_bounds((p, q) in paired_probs(), beta in 1.0f64..2.0) {
        let c = p.ncols() as f64;
        let joint = DiscreteJoint::from_paired_predictions(&p, &q, true).unwrap();
        let sys = mi_beta_estimate(&p, &q, beta).unwrap();
        prop_assert!((sys - exact_mi_beta(&joint, beta)).abs() < 1e-10);
        prop_assert!(sys <= beta * c.ln() + 1e-10);
        let i1 = mi_beta_estimate(&p, &q, 1.0).unwrap();
        prop_assert!(i1 >= -1e-12);
        prop_assert!(i1 <= c.ln() + 1e-12);
    }

    #[test]
    fn mi_is_symmetric_in_the_pair((p, q) in paired_probs(), beta in 0.5f64..2.0) {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(p.clone()), g.constant(q.clone()));
        let j1 = build_joint(&mut g, a, b).unwrap();
        let j2 = build_joint(&mut g, b, a).unwrap();
        let m1 = mi_beta(&mut g, &j1, beta).unwrap();
        let m2 = mi_beta(&mut g, &j2, beta).unwrap();
        prop_assert_eq!(g.scalar(m1), g.scalar(m2));
    }

    #[test]
    fn finite_differences_exact_on_quadratics(
        coef in prop::collection::vec(-3.0f64..3.0, 1..6),
        x in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let x = &x[..coef.len()];
        let f = |v: &[f64]| v.iter().zip(&coef).map(|(a, c)| c * a * a + a).sum::<f64>();
        let grad = finite_diff_grad(f, x, 1e-4).unwrap();
        for ((g, c), a) in grad.iter().zip(&coef).zip(x) {
            prop_assert!((g - (2.0 * c * a + 1.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn partition_covers_every_instance_once(
        seed in any::<u64>(),
        du_frac in 0.05f64..1.0,
        dk_frac in 0.0f64..1.0,
    ) {
        let model = ExpandedClassifier::<f64>::build_source(3, &[6], 4, seed).unwrap();
        let x = random_features(seed, 50, 3);
        let du = du_frac * 4f64.ln();
        let t = Thresholds { delta_k: dk_frac * du, delta_u: du };
        let sets = partition_by_confidence(&model, &x, t, ConfidenceMeasure::Entropy).unwrap();
        let mut seen = [0; 50];
        for &(i, c) in &sets.known {
            prop_assert!(c < 4);
            seen[i] += 1;
        }
        for &i in sets.unknown.iter().chain(&sets.discarded) {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn known_term_ignores_unknown_batch(seed in any::<u64>()) {
        let model = random_model(seed, 2, 3, 2);
        let kx = random_features(seed, 4, 2);
        let ux = random_features(seed.wrapping_add(1), 3, 2);
        let loss = |kx: &Array2<f64>, ux: &Array2<f64>| {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let l = pseudo_label_loss(&mut g, &model, &p, kx, &[0, 1, 2, 0], ux).unwrap();
            (g.scalar(l.known), g.scalar(l.unknown))
        };
        let (k0, u0) = loss(&kx, &ux);
        let mut ux2 = ux.clone();
        ux2[[0, 0]] += 0.7;
        let (k1, u1) = loss(&kx, &ux2);
        prop_assert_eq!(k0, k1);
        prop_assert!(u0.is_finite() && u1.is_finite());
    }

    #[test]
    fn objective_is_weighted_sum(seed in any::<u64>(), ap in 0.01f64..2.0, ac in 0.01f64..2.0, beta in 0.8f64..1.6) {
        let model = random_model(seed, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target_x = random_features(seed.wrapping_add(7), 6, 2);
        let batch = AdaptBatch {
            known_x: random_features(seed.wrapping_add(3), 4, 2),
            known_labels: vec![0, 1, 2, 1],
            unknown_x: random_features(seed.wrapping_add(5), 3, 2),
            target_plus: TransformPolicy::default().apply_batch(&target_x, &mut rng),
            target_x,
        };
        let cfg = AdaptConfig { alpha_p: ap, alpha_c: ac, beta, ..AdaptConfig::default() };
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let obj = adaptation_objective(&mut g, &model, &p, &batch, &cfg).unwrap();
        let total = g.scalar(obj.total);

        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let lp = pseudo_label_loss(&mut g, &model, &p, &batch.known_x, &batch.known_labels, &batch.unknown_x).unwrap();
        let lc = consistency_loss_pair(&mut g, &model, &p, &batch.target_x, &batch.target_plus, beta).unwrap();
        let parts = ap * g.scalar(lp.total) + ac * g.scalar(lc);
        prop_assert!((total - parts).abs() <= 1e-12 * parts.abs().max(1.0));
    }

    #[test]
    fn expanded_head_inherits_source_logits(seed in any::<u64>(), k in 1usize..10) {
        let src = ExpandedClassifier::<f64>::build_source(3, &[4, 4], 3, seed).unwrap();
        let exp = src.expand_head(k, seed).unwrap();
        let x = random_features(seed, 9, 3);
        let a = src.logits(&x).unwrap();
        let b = exp.logits(&x).unwrap();
        prop_assert_eq!(b.ncols(), 3 + k);
        prop_assert_eq!(a, b.slice(ndarray::s![.., 0..3]).to_owned());
    }

    #[test]
    fn scoped_steps_leave_the_other_partition_bitwise(seed in any::<u64>(), expanded in any::<bool>()) {
        let model = random_model(seed, 2, 3, 2);
        let x = random_features(seed, 5, 2);
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let xv = g.constant(x);
        let logits = model.forward(&mut g, &p, xv).unwrap();
        let root = osda::model::cross_entropy(&mut g, logits, &[0, 1, 2, 3, 4]).unwrap();
        g.backward(root).unwrap();
        let grads = p.gradients(&g);
        let mut m = model.clone();
        let mut state = OptimState::new(&m, OptimConfig { learning_rate: 0.1, ..OptimConfig::default() });
        let (scope, frozen) = if expanded {
            (ParamScope::Expanded, ParamScope::Inherited)
        } else {
            (ParamScope::Inherited, ParamScope::Expanded)
        };
        state.step(&mut m, &grads, scope).unwrap();
        let last = m.layers().len() - 1;
        for (l, (a, b)) in model.layers().iter().zip(m.layers()).enumerate() {
            let cols = if l == last { model.scope_columns(l, frozen) } else if frozen == ParamScope::Inherited { 0..a.weight.ncols() } else { 0..0 };
            for j in cols {
                prop_assert_eq!(a.weight.column(j), b.weight.column(j));
                prop_assert_eq!(a.bias[[0, j]], b.bias[[0, j]]);
            }
        }
        prop_assert_ne!(&model, &m);
    }

    #[test]
    fn open_set_labels_stay_in_range(seed in any::<u64>()) {
        let model = random_model(seed, 2, 3, 4);
        let x = random_features(seed, 30, 2);
        for label in predict_open_set(&model, &x).unwrap() {
            if let OpenSetLabel::Known(c) = label {
                prop_assert!(c < 3);
            }
        }
    }
}
