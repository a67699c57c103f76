use markov_icl::closed_form::{
    recover_pq_len2, xstar_general_binary, xstar_len2_correlated, xstar_len2_iid,
    GeneralMinimizerSpec, Len2Moments, MomentMethod, Recovery,
};
use markov_icl::lsa::{LayerParams, LsaModel, ParamForm};
use markov_icl::markov_data::{PromptSampler, TransitionKernel};
use markov_icl::multiobjective::{dominates, forward_equiv_check, pareto_filter};
use markov_icl::reparam::{pair_count, pair_index, pairs0, phi, predict_reparam, ReparamVector};
use nalgebra::DVector;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn binary_kernels_are_stochastic(p01 in 0.0..=1.0f64, p10 in 0.0..=1.0f64) {
        let k = TransitionKernel::binary(p01, p10).unwrap();
        for r in 0..2 {
            prop_assert!((k.probs().row(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_prompts_are_well_formed(p in 0.0..=1.0f64, d in 1usize..5, n in 1usize..8, seed in any::<u64>()) {
        let prompts = PromptSampler::binary(p, d, n, seed).unwrap().batch(0, 3);
        for pr in &prompts {
            prop_assert_eq!(pr.z().shape(), (d + 1, n + 1));
            prop_assert_eq!(pr.z()[(d, n)], 0.0);
            prop_assert!(pr.label() == 0.0 || pr.label() == 1.0);
            prop_assert!(pr.z().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn pair_ranks_enumerate_the_upper_triangle(d in 1usize..7) {
        let pairs = pairs0(d);
        prop_assert_eq!(pairs.len(), pair_count(d));
        for (r, &(i, k)) in pairs.iter().enumerate() {
            prop_assert_eq!(pair_index(i + 1, k + 1, d).unwrap(), r + 1);
        }
    }

    #[test]
    fn phi_is_gauge_invariant(
        d in 1usize..4,
        c in prop_oneof![-3.0..-0.2f64, 0.2..3.0f64],
        seed in any::<u64>(),
    ) {
        let m = LsaModel::random(ParamForm::Sparse, d, 4, 1, 1.0, seed).unwrap();
        let (b, a) = m.layers()[0].sparse_parts().unwrap();
        let x = phi(&b, &a).unwrap();
        let y = phi(&(&b * c), &(&a / c)).unwrap();
        for (u, v) in x.as_vector().iter().zip(y.as_vector().iter()) {
            prop_assert!(close(*u, *v, 1e-12));
        }
    }

    #[test]
    fn reparam_prediction_matches_one_sparse_layer(d in 1usize..4, n in 1usize..9, seed in any::<u64>()) {
        let m = LsaModel::random(ParamForm::Sparse, d, n, 1, 0.5, seed).unwrap();
        let (b, a) = m.layers()[0].sparse_parts().unwrap();
        let x = phi(&b, &a).unwrap();
        for pr in PromptSampler::binary(0.5, d, n, seed ^ 1).unwrap().batch(0, 4) {
            prop_assert!(close(predict_reparam(&x, &pr).unwrap(), m.predict(&pr).unwrap(), 1e-10));
        }
    }

    #[test]
    fn restricted_forward_pass_is_preconditioned_descent(
        d in 1usize..5,
        n in 2usize..12,
        layers in 1usize..5,
        seed in any::<u64>(),
    ) {
        let m = LsaModel::random(ParamForm::Restricted, d, n, layers, 0.3, seed).unwrap();
        for pr in PromptSampler::binary(0.4, d, n, seed ^ 7).unwrap().batch(0, 2) {
            let dev = forward_equiv_check(&m, &pr).unwrap().max_deviation();
            prop_assert!(dev < 1e-9, "deviation {}", dev);
        }
    }

    #[test]
    fn recovery_inverts_phi_whenever_it_succeeds(x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, x3 in -2.0..2.0f64) {
        let x = ReparamVector::new(1, DVector::from_vec(vec![x1, x2, x3])).unwrap();
        match recover_pq_len2(&x).unwrap() {
            Recovery::Preimage(LayerParams::Sparse { b, a }) => {
                let back = phi(&b, &a).unwrap();
                for (u, v) in back.as_vector().iter().zip(x.as_vector().iter()) {
                    prop_assert!((u - v).abs() <= 1e-10 * (1.0 + x.as_vector().amax()));
                }
            }
            Recovery::NoRealPreimage { discriminant } => {
                prop_assert!(discriminant < 0.0);
                prop_assert!(x1 != 0.0);
            }
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }

    #[test]
    fn iid_closed_form_is_the_uncorrelated_special_case(p in 0.05..0.95f64, n in 2usize..200) {
        let a = xstar_len2_iid(p, n).unwrap();
        let b = xstar_len2_correlated(&Len2Moments::iid(p, n).unwrap()).unwrap();
        for (u, v) in a.as_vector().iter().zip(b.as_vector().iter()) {
            prop_assert!(close(*u, *v, 1e-9));
        }
    }

    #[test]
    fn pareto_filter_keeps_exactly_the_nondominated(pts in prop::collection::vec((0u8..6, 0u8..6, 0u8..6), 1..40)) {
        let points: Vec<DVector<f64>> =
            pts.iter().map(|&(a, b, c)| DVector::from_vec(vec![a as f64, b as f64, c as f64])).collect();
        let front = pareto_filter(&points);
        for p in &points {
            let dominated = points.iter().any(|q| dominates(q, p));
            prop_assert_eq!(front.contains(p), !dominated);
        }
    }
}

#[test]
fn exact_moment_engine_reproduces_the_length_two_closed_form() {
    for &(p, n) in &[(0.3, 10usize), (0.5, 100), (0.8, 3)] {
        let mut spec = GeneralMinimizerSpec::binary(1, n, p, 1, 0).unwrap();
        spec.method = MomentMethod::ExactUniform;
        let general = xstar_general_binary(&spec).unwrap();
        let closed = xstar_len2_iid(p, n).unwrap();
        for (u, v) in general.x.as_vector().iter().zip(closed.as_vector().iter()) {
            assert!(close(*u, *v, 1e-9), "p={p} n={n}: {u} vs {v}");
        }
        assert!(general.x_se.iter().all(|&s| s == 0.0));
    }
}

#[test]
fn zero_model_predicts_zero() {
    let m = LsaModel::new(2, 3, vec![LayerParams::zeros(ParamForm::Dense, 2)]).unwrap();
    let pr = PromptSampler::binary(0.5, 2, 3, 0).unwrap().prompt(0);
    assert_eq!(m.predict(&pr).unwrap(), 0.0);
}
