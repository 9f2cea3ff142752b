//! Property checks that cut across modules.

use nalgebra::DVector;
use proptest::prelude::*;

use kdlab::data::synth_sphere;
use kdlab::embed::{alignf, alignment_qp, combine, gaussian_bank, nystrom_embed, AlignfOptions};
use kdlab::experiments::two_stage_compare;
use kdlab::flow::{simulate_flow_rk4, simulate_gd, DistillConfig, Regularization};
use kdlab::model::{
    forward, hidden_features, init_network, ActivationKind, KnowledgeSource, PrivilegedKnowledge,
};
use kdlab::spectral::{f_infinity, EigenRoute, KernelSolution};

fn instance(
    n: usize,
    m: usize,
    seed: u64,
) -> (
    kdlab::data::Dataset,
    kdlab::model::TwoLayerNet,
    PrivilegedKnowledge,
) {
    let ds = synth_sphere(n, 4, seed).unwrap();
    let net = init_network(m, 4, 1.0, seed, ActivationKind::Tanh).unwrap();
    let teacher = init_network(m, 4, 1.0, seed + 1000, ActivationKind::Tanh).unwrap();
    let pk = PrivilegedKnowledge::new(
        hidden_features(&teacher, &ds).unwrap(),
        KnowledgeSource::External,
    )
    .unwrap();
    (ds, net, pk)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn objective_never_increases(seed in 0u64..500, lambda in 0.0f64..2.0) {
        let (ds, net, pk) = instance(4, 5, seed);
        let cfg = DistillConfig { dt: 0.02, horizon: 4.0, ..DistillConfig::default().with_lambda(lambda) };
        let traj = simulate_flow_rk4(&net, &ds, &pk, &cfg, None).unwrap();
        for w in traj.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn final_value_sits_on_the_segment(seed in 0u64..500, lambda in 1e-3f64..10.0) {
        let (ds, net, pk) = instance(5, 6, seed);
        let fv = f_infinity(&ds.labels, &pk, &net.output, Regularization::Finite(lambda)).unwrap();
        let a = net.a_bar();
        let expect = (&ds.labels * a + &fv.teacher_combination * lambda) / (a + lambda);
        prop_assert!((&fv.f_infinity - expect).amax() < 1e-12);
        let spread = (&fv.teacher_combination - &ds.labels).norm();
        prop_assert!((fv.final_error - lambda / (a + lambda) * spread).abs() < 1e-12 * spread.max(1.0));
    }

    #[test]
    fn linearized_solution_interpolates(seed in 0u64..500, lambda in 0.05f64..2.0) {
        let (ds, net, pk) = instance(3, 4, seed);
        let sol = KernelSolution::new(&net, &ds, &pk, Regularization::Finite(lambda), EigenRoute::Auto).unwrap();
        let f0 = forward(&net, &ds).unwrap();
        prop_assert!((sol.output(0.0) - f0).amax() < 1e-9);
        let p_min = sol.decomposition.p_min().unwrap();
        let late = sol.output(60.0 / p_min);
        prop_assert!((late - &sol.final_value.f_infinity).amax() < 1e-9);
    }

    #[test]
    fn two_stage_never_wins(alpha in 1e-6f64..0.999_999, beta in 1e-6f64..0.999_999) {
        let r = two_stage_compare(alpha, beta).unwrap();
        prop_assert!(r.s1 <= r.s2);
        prop_assert!(r.two_stage_better);
    }

    #[test]
    fn alignment_weights_are_feasible(seed in 0u64..500) {
        let ds = synth_sphere(10, 3, seed).unwrap();
        let bank = gaussian_bank(&ds, &[0.4, 1.0, 2.5]).unwrap();
        let opts = AlignfOptions::default();
        let w = alignf(&bank, &ds.labels, opts).unwrap();
        let (_, a) = alignment_qp(&bank, &ds.labels).unwrap();
        prop_assert!(w.mu.iter().all(|&x| x >= 0.0));
        prop_assert!((w.mu.norm() - 1.0).abs() < 1e-12);
        prop_assert!(w.kkt_residual <= opts.tolerance * a.amax().max(1.0), "kkt {:e}, scale {:e}", w.kkt_residual, a.amax());
    }

    #[test]
    fn nystrom_error_shrinks_with_rank(seed in 0u64..500) {
        let ds = synth_sphere(9, 3, seed).unwrap();
        let k = combine(&gaussian_bank(&ds, &[0.7]).unwrap(), &DVector::from_element(1, 1.0)).unwrap();
        let errors: Vec<f64> = (1..=9)
            .map(|r| {
                let (phi, _) = nystrom_embed(&k, r, seed).unwrap();
                (&phi * phi.transpose() - &k).norm()
            })
            .collect();
        for w in errors.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10);
        }
        prop_assert!(errors[8] < 1e-8);
    }
}

#[test]
fn gradient_descent_approaches_the_flow() {
    let (ds, net, pk) = instance(4, 6, 3);
    let base = DistillConfig {
        horizon: 2.0,
        record_every: 1_000_000,
        ..DistillConfig::default().with_lambda(0.5)
    };
    let flow = simulate_flow_rk4(
        &net,
        &ds,
        &pk,
        &DistillConfig {
            dt: 1e-3,
            ..base.clone()
        },
        None,
    )
    .unwrap();
    let target = flow.final_output();
    let gap = |lr: f64| {
        let gd = simulate_gd(
            &net,
            &ds,
            &pk,
            &DistillConfig {
                learning_rate: lr,
                ..base.clone()
            },
            None,
        )
        .unwrap();
        (gd.final_output() - target).norm()
    };
    let (coarse, fine) = (gap(0.02), gap(0.005));
    // forward Euler is first order
    assert!(fine < coarse / 3.0, "coarse {coarse:e}, fine {fine:e}");
}

#[test]
fn weight_drift_shrinks_with_width() {
    let ds = synth_sphere(5, 4, 11).unwrap();
    let cfg = DistillConfig {
        dt: 0.05,
        horizon: 10.0,
        record_every: 1_000_000,
        ..DistillConfig::default().with_lambda(0.5)
    };
    let drift: Vec<f64> = [16, 64, 256]
        .iter()
        .map(|&m| {
            let net = init_network(m, 4, 0.5, 11, ActivationKind::Tanh).unwrap();
            // teacher-init: the distillation residual starts at zero, so only the
            // O(1/√m) fit term moves the units
            let pk = PrivilegedKnowledge::from_network(&net, &ds).unwrap();
            let traj = simulate_flow_rk4(&net, &ds, &pk, &cfg, None).unwrap();
            traj.weight_drift.last().unwrap().amax()
        })
        .collect();
    assert!(drift[1] < drift[0] && drift[2] < drift[1], "{drift:?}");
}
