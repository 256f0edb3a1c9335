use ndarray::{Array1, Array2};
use proptest::prelude::*;

use zooadapt::diversity::{hsic, KernelConfig};
use zooadapt::ensemble_adapt::{ensemble_forward, ensemble_weights, kl_divergence, EnsembleModel};
use zooadapt::inference::{conditional_entropy, forward, ProbMatrix};
use zooadapt::selection::{greedy_transferable_set, SelectionConfig};
use zooadapt::sute::{indicator_gd, indicator_ic, sute_of_ensemble, sute_score, SuteConfig, SuteValue};
use zooadapt::tensorio::{Head, ModelRecord};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn probs(n: usize, c: usize) -> impl Strategy<Value = ProbMatrix> {
    prop::collection::vec(simplex(c), n)
        .prop_map(move |rows| ProbMatrix::new(Array2::from_shape_fn((n, c), |(i, k)| rows[i][k])).unwrap())
}

fn model(id: String, n: usize, c: usize) -> impl Strategy<Value = ModelRecord> {
    (1usize..4).prop_flat_map(move |d| {
        let id = id.clone();
        (
            prop::collection::vec(prop_oneof![-1.0f64..-0.1, 0.1f64..1.0], n * d),
            prop::collection::vec(-4.0f64..4.0, c * d),
            prop::collection::vec(-1.0f64..1.0, c),
        )
            .prop_map(move |(f, w, b)| {
                let head = Head {
                    weights: Array2::from_shape_vec((c, d), w).unwrap(),
                    bias: Array1::from(b),
                };
                ModelRecord::new(id.clone(), "d", "a", Array2::from_shape_vec((n, d), f).unwrap(), head).unwrap()
            })
    })
}

fn zoo(n: usize, c: usize) -> impl Strategy<Value = Vec<ModelRecord>> {
    (1usize..6).prop_flat_map(move |r| (0..r).map(|j| model(format!("m{j}"), n, c)).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_rows_are_distributions(m in model("x".into(), 8, 4)) {
        let p = forward(&m, 1.0).unwrap();
        for r in p.values().rows() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn indicators_are_bounded(p in probs(10, 4)) {
        let ln_c = 4f64.ln();
        let ic = indicator_ic(&p);
        let gd = indicator_gd(&p);
        prop_assert!(ic <= 1e-12 && ic >= -ln_c - 1e-12);
        prop_assert!(gd >= -1e-12 && gd <= ln_c + 1e-12);
        // Entropy of the mean dominates the mean entropy.
        prop_assert!(gd >= -ic - 1e-12);
    }

    #[test]
    fn conditional_entropy_is_bounded(s in prop::collection::vec(0usize..3, 12), p in prop::collection::vec(0usize..3, 12)) {
        let h = conditional_entropy(&s, &p, 3).unwrap();
        prop_assert!(h >= 0.0 && h <= 3f64.ln() + 1e-12);
    }

    #[test]
    fn hsic_symmetric_and_nonnegative(a in probs(12, 3), b in probs(12, 3), linear in any::<bool>()) {
        let kc = if linear { KernelConfig::linear() } else { KernelConfig::default() };
        let ab = hsic(&a, &b, &kc).unwrap();
        prop_assert!((ab - hsic(&b, &a, &kc).unwrap()).abs() <= 1e-12);
        prop_assert!(ab >= -1e-9);
    }

    #[test]
    fn weights_form_an_order_preserving_distribution(s in prop::collection::vec(-3.0f64..3.0, 1..8), t in 0.1f64..4.0) {
        let w = ensemble_weights(&s, t).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn mixture_kl_is_convex(ps in prop::collection::vec(simplex(5), 3), q in simplex(5), w in simplex(3)) {
        let mix: Vec<f64> = (0..5).map(|k| (0..3).map(|i| w[i] * ps[i][k]).sum()).collect();
        let rhs: f64 = (0..3).map(|i| w[i] * kl_divergence(&ps[i], &q)).sum();
        prop_assert!(kl_divergence(&mix, &q) <= rhs + 1e-9);
    }

    #[test]
    fn ensemble_output_is_convex_combination(a in model("a".into(), 6, 3), b in model("b".into(), 6, 3), wa in 0.01f64..0.99) {
        let e = EnsembleModel::new(&[&a, &b], &[wa, 1.0 - wa]).unwrap();
        let q = ensemble_forward(&e).unwrap();
        let (pa, pb) = (forward(&a, 1.0).unwrap(), forward(&b, 1.0).unwrap());
        for ((x, y), z) in q.values().iter().zip(pa.values()).zip(pb.values()) {
            prop_assert!((x - (wa * y + (1.0 - wa) * z)).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_never_loses_to_best_single(models in zoo(20, 3)) {
        let cfg = SelectionConfig::new(SuteConfig::for_classes(3));
        let sutes: Vec<SuteValue> = models.iter().map(|m| sute_score(m, &cfg.sute).unwrap().sute).collect();
        let finite: Vec<f64> = sutes.iter().filter_map(|s| s.finite()).collect();
        prop_assume!(!finite.is_empty());
        let (set, audit) = greedy_transferable_set(&models, &cfg).unwrap();
        prop_assert_eq!(audit.sute_evaluations, 2 * finite.len() - 1);
        prop_assert_eq!(audit.replay(), set.clone());
        let idx: Vec<usize> = set.iter().map(|id| models.iter().position(|m| &m.id == id).unwrap()).collect();
        let recs: Vec<&ModelRecord> = idx.iter().map(|&i| &models[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| sutes[i].finite().unwrap()).collect();
        let w = ensemble_weights(&s, 1.0).unwrap();
        let best = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(sute_of_ensemble(&recs, &w, &cfg.sute).unwrap().sute >= SuteValue::Finite(best));
    }
}
